//! The dataset text format.
//!
//! ```text
//! ZSLDS v1 p=<p> m=<m> q=<q>
//! CLASS <id> <parent-id or -> <q comma-separated reals>
//! IMAGE <id> <class-id> <p*m comma-separated reals, region by region>
//! SPLIT SEEN <class ids>
//! SPLIT UNSEEN <class ids>
//! ```
//!
//! Sections appear in that order: all CLASS lines, then all IMAGE lines,
//! then the two SPLIT lines. Image values are stored region by region
//! (column by column of the `p x m` matrix). Files written here are
//! canonical — entities sorted by id, reals at 9 significant digits — so
//! saving a loaded file reproduces it byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Vector};

use super::{ClassEntry, ZslDataset, ZslImage};

fn push_reals(out: &mut String, values: impl Iterator<Item = f64>) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(',');
        }
        let _ = write!(out, "{v:.8e}");
        first = false;
    }
}

impl ZslDataset {
    pub fn to_text(&self) -> Result<String> {
        self.validate()?;
        let mut out = String::new();
        let _ = writeln!(out, "ZSLDS v1 p={} m={} q={}", self.p, self.m, self.q);
        for c in &self.classes {
            let _ = write!(out, "CLASS {} ", c.id);
            match c.parent {
                Some(p) => {
                    let _ = write!(out, "{p}");
                }
                None => out.push('-'),
            }
            out.push(' ');
            push_reals(&mut out, c.semantic.data().iter().copied());
            out.push('\n');
        }
        for img in &self.images {
            let _ = write!(out, "IMAGE {} {} ", img.id, img.class_id);
            let values = (0..self.m)
                .flat_map(|col| (0..self.p).map(move |row| (row, col)))
                .map(|(row, col)| img.regions.get(row, col));
            push_reals(&mut out, values);
            out.push('\n');
        }
        for (name, ids) in [("SEEN", &self.seen), ("UNSEEN", &self.unseen)] {
            let _ = write!(out, "SPLIT {name}");
            for id in ids.iter() {
                let _ = write!(out, " {id}");
            }
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_text()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        Parser {
            path: path.display().to_string(),
        }
        .parse(text)
    }
}

struct Parser {
    path: String,
}

// Which section of the file we currently expect.
#[derive(PartialEq, Eq, PartialOrd, Ord, Clone, Copy)]
enum Section {
    Classes,
    Images,
    SplitSeen,
    SplitUnseen,
    Done,
}

impl Parser {
    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line,
            msg: msg.into(),
        }
    }

    fn parse_reals(&self, line_no: usize, text: &str, expected: usize) -> Result<Vec<f64>> {
        let values = text
            .split(',')
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| self.err(line_no, format!("bad number {tok}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != expected {
            return Err(self.err(
                line_no,
                format!("expected {expected} values, found {}", values.len()),
            ));
        }
        Ok(values)
    }

    fn parse(&self, text: &str) -> Result<ZslDataset> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines
            .next()
            .ok_or_else(|| self.err(1, "empty dataset file"))?;
        let (p, m, q) = self.parse_header(header)?;

        let mut classes: Vec<ClassEntry> = Vec::new();
        let mut images: Vec<ZslImage> = Vec::new();
        let mut seen: Option<Vec<u32>> = None;
        let mut unseen: Option<Vec<u32>> = None;
        let mut section = Section::Classes;

        for (line_no, raw) in lines {
            let line = raw.trim_end();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let tag = parts.next().unwrap();
            match tag {
                "CLASS" if section <= Section::Classes => section = Section::Classes,
                "IMAGE" if section <= Section::Images => section = Section::Images,
                "SPLIT" if section < Section::Done => {}
                "CLASS" | "IMAGE" | "SPLIT" => {
                    return Err(self.err(
                        line_no,
                        format!("{tag} line out of order; sections are CLASS, IMAGE, SPLIT"),
                    ))
                }
                other => return Err(self.err(line_no, format!("unknown line tag {other}"))),
            }
            match tag {
                "CLASS" => {
                    let id = self.parse_u32(line_no, parts.next(), "class id")?;
                    let parent_tok = parts
                        .next()
                        .ok_or_else(|| self.err(line_no, "CLASS line missing parent field"))?;
                    let parent = if parent_tok == "-" {
                        None
                    } else {
                        Some(self.parse_u32(line_no, Some(parent_tok), "parent id")?)
                    };
                    let rest = parts
                        .next()
                        .ok_or_else(|| self.err(line_no, "CLASS line missing semantic values"))?;
                    if parts.next().is_some() {
                        return Err(self.err(line_no, "unexpected trailing fields on CLASS line"));
                    }
                    let semantic = Vector::from_vec(self.parse_reals(line_no, rest, q)?);
                    classes.push(ClassEntry {
                        id,
                        parent,
                        semantic,
                    });
                }
                "IMAGE" => {
                    let id = self.parse_u32(line_no, parts.next(), "image id")?;
                    let class_id = self.parse_u32(line_no, parts.next(), "class id")?;
                    let rest = parts
                        .next()
                        .ok_or_else(|| self.err(line_no, "IMAGE line missing region values"))?;
                    if parts.next().is_some() {
                        return Err(self.err(line_no, "unexpected trailing fields on IMAGE line"));
                    }
                    let values = self.parse_reals(line_no, rest, p * m)?;
                    let mut regions = Matrix::zeros(p, m);
                    for col in 0..m {
                        for row in 0..p {
                            regions.set(row, col, values[col * p + row]);
                        }
                    }
                    images.push(ZslImage {
                        id,
                        class_id,
                        regions,
                    });
                }
                "SPLIT" => {
                    let which = parts
                        .next()
                        .ok_or_else(|| self.err(line_no, "SPLIT line missing SEEN/UNSEEN"))?;
                    let ids = parts
                        .map(|tok| self.parse_u32(line_no, Some(tok), "class id"))
                        .collect::<Result<Vec<u32>>>()?;
                    match which {
                        "SEEN" if section <= Section::SplitSeen => {
                            seen = Some(ids);
                            section = Section::SplitUnseen;
                        }
                        "UNSEEN" if section == Section::SplitUnseen => {
                            unseen = Some(ids);
                            section = Section::Done;
                        }
                        "SEEN" | "UNSEEN" => {
                            return Err(self.err(line_no, "duplicate or misordered SPLIT line"))
                        }
                        other => {
                            return Err(
                                self.err(line_no, format!("SPLIT must be SEEN or UNSEEN, got {other}"))
                            )
                        }
                    }
                }
                _ => unreachable!(),
            }
        }
        let seen = seen.ok_or_else(|| self.err(0, "missing SPLIT SEEN line"))?;
        let unseen = unseen.ok_or_else(|| self.err(0, "missing SPLIT UNSEEN line"))?;
        ZslDataset {
            p,
            m,
            q,
            classes,
            images,
            seen,
            unseen,
        }
        .canonicalize()
    }

    fn parse_u32(&self, line_no: usize, tok: Option<&str>, what: &str) -> Result<u32> {
        let tok = tok.ok_or_else(|| self.err(line_no, format!("missing {what}")))?;
        tok.parse::<u32>()
            .map_err(|_| self.err(line_no, format!("bad {what} {tok}")))
    }

    fn parse_header(&self, header: &str) -> Result<(usize, usize, usize)> {
        let mut parts = header.split_whitespace();
        if parts.next() != Some("ZSLDS") {
            return Err(self.err(1, "dataset files start with ZSLDS"));
        }
        if parts.next() != Some("v1") {
            return Err(self.err(1, "unsupported dataset file version"));
        }
        let mut dims = [None::<usize>; 3];
        let names = ["p", "m", "q"];
        for part in parts {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| self.err(1, format!("bad header field {part}")))?;
            let slot = names
                .iter()
                .position(|n| *n == key)
                .ok_or_else(|| self.err(1, format!("unknown header field {key}")))?;
            dims[slot] = Some(
                value
                    .parse::<usize>()
                    .map_err(|_| self.err(1, format!("bad value for header field {key}")))?,
            );
        }
        let get = |i: usize| {
            dims[i].ok_or_else(|| self.err(1, format!("missing header field {}", names[i])))
        };
        Ok((get(0)?, get(1)?, get(2)?))
    }
}
