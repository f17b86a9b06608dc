//! The complete network: attention stack plus semantic matcher.
//!
//! This module owns the canonical flat ordering of all trainable
//! parameters (the optimizer and the gradient check walk that ordering),
//! the text model-file format, and the batch-level composition of the
//! three loss terms with their joint backward pass.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matcher::{
    self, ClassSemanticTable, LossBreakdown, MatcherBatchTrace, MatcherParams,
};
use crate::rng;
use crate::sga::{self, SgaConfig, SgaLayerParams, SgaTrace};
use crate::tensor::{Matrix, Vector};

/// Relative weights of the alignment and guide losses against the
/// cross-entropy term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_align: f64,
    pub lambda_guide: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_align: 1.0,
            lambda_guide: 1.0,
        }
    }
}

/// Attention stack plus matcher, with everything needed to run them.
#[derive(Debug, Clone, PartialEq)]
pub struct ZslModel {
    pub cfg: SgaConfig,
    pub layers: Vec<SgaLayerParams>,
    pub matcher: MatcherParams,
}

impl ZslModel {
    /// Fresh model with seeded random weights.
    pub fn init(cfg: SgaConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, rng::streams::MODEL_INIT);
        let layers = (0..cfg.k_layers)
            .map(|_| SgaLayerParams::init(&cfg, &mut rng))
            .collect();
        let matcher = MatcherParams::init(cfg.p, cfg.q, &mut rng);
        Ok(ZslModel {
            cfg,
            layers,
            matcher,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        if self.layers.len() != self.cfg.k_layers {
            return Err(Error::Validation(format!(
                "model has {} attention layers, config says {}",
                self.layers.len(),
                self.cfg.k_layers
            )));
        }
        for l in &self.layers {
            l.validate(&self.cfg)?;
        }
        self.matcher.validate(self.cfg.p, self.cfg.q)
    }

    /// Total number of trainable scalars.
    pub fn flat_len(cfg: &SgaConfig) -> usize {
        cfg.k_layers * SgaLayerParams::flat_len(cfg) + MatcherParams::flat_len(cfg.p, cfg.q)
    }

    /// All parameters in the canonical order: attention layers outermost
    /// first (each as w_ia, w_gs, w_ga, w_p, b_p), then the matcher.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::flat_len(&self.cfg));
        for l in &self.layers {
            l.write_flat(&mut out);
        }
        self.matcher.write_flat(&mut out);
        out
    }

    pub fn from_flat(cfg: SgaConfig, flat: &[f64]) -> Result<Self> {
        if flat.len() != Self::flat_len(&cfg) {
            return Err(Error::InvalidArgument(format!(
                "flat parameter buffer has {} scalars, model needs {}",
                flat.len(),
                Self::flat_len(&cfg)
            )));
        }
        let mut it = flat.iter().copied();
        let layers = (0..cfg.k_layers)
            .map(|_| SgaLayerParams::read_flat(&cfg, &mut it))
            .collect::<Result<Vec<_>>>()?;
        let matcher = MatcherParams::read_flat(cfg.p, cfg.q, &mut it)?;
        Ok(ZslModel {
            cfg,
            layers,
            matcher,
        })
    }

    /// Runs the attention stack and returns the fused image vector that
    /// gets matched against embedded class semantics.
    pub fn embed_image(&self, regions: &Matrix) -> Result<Vector> {
        let (_, fused, _) = sga::sga_forward(&self.cfg, &self.layers, regions)?;
        Ok(fused)
    }

    /// Like [`embed_image`](Self::embed_image) but also returns each
    /// layer's attention weights, outermost first.
    pub fn embed_image_with_attention(&self, regions: &Matrix) -> Result<(Vector, Vec<Vector>)> {
        let (_, fused, probs) = sga::sga_forward(&self.cfg, &self.layers, regions)?;
        Ok((fused, probs))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_text()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn to_text(&self) -> Result<String> {
        self.validate()?;
        let cfg = &self.cfg;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "S2GAMODEL v1 p={} m={} q={} d={} k={}",
            cfg.p, cfg.m, cfg.q, cfg.d, cfg.k_layers
        );
        let flat = self.to_flat();
        for (name, range) in block_spans(cfg) {
            let _ = write!(out, "PARAM {name}");
            for v in &flat[range] {
                let _ = write!(out, " {v:.8e}");
            }
            out.push('\n');
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.display().to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| parse_err(1, "empty model file".to_string()))?;
        let cfg = parse_model_header(header).map_err(|msg| parse_err(1, msg))?;

        let spans = block_spans(&cfg);
        let mut flat = vec![0.0; ZslModel::flat_len(&cfg)];
        let mut seen = vec![false; spans.len()];
        for (idx, line) in lines {
            let lineno = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("PARAM") => {}
                Some(other) => {
                    return Err(parse_err(lineno, format!("expected PARAM line, got {other}")))
                }
                None => continue,
            }
            let name = parts
                .next()
                .ok_or_else(|| parse_err(lineno, "PARAM line without a name".to_string()))?;
            let pos = spans
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| parse_err(lineno, format!("unknown parameter block {name}")))?;
            if seen[pos] {
                return Err(parse_err(lineno, format!("duplicate parameter block {name}")));
            }
            seen[pos] = true;
            let range = spans[pos].1.clone();
            let mut count = 0;
            for (slot, tok) in flat[range.clone()].iter_mut().zip(parts.by_ref()) {
                *slot = tok
                    .parse::<f64>()
                    .map_err(|_| parse_err(lineno, format!("bad number {tok} in block {name}")))?;
                count += 1;
            }
            if count != range.len() || parts.next().is_some() {
                return Err(parse_err(
                    lineno,
                    format!("block {name} must hold exactly {} values", range.len()),
                ));
            }
        }
        if let Some(pos) = seen.iter().position(|s| !s) {
            return Err(Error::Validation(format!(
                "model file {} is missing parameter block {}",
                path.display(),
                spans[pos].0
            )));
        }
        let model = ZslModel::from_flat(cfg, &flat)?;
        model.validate()?;
        Ok(model)
    }
}

fn parse_model_header(header: &str) -> std::result::Result<SgaConfig, String> {
    let mut parts = header.split_whitespace();
    if parts.next() != Some("S2GAMODEL") {
        return Err("model files start with S2GAMODEL".to_string());
    }
    if parts.next() != Some("v1") {
        return Err("unsupported model file version".to_string());
    }
    let mut dims = [None::<usize>; 5];
    let names = ["p", "m", "q", "d", "k"];
    for part in parts {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| format!("bad header field {part}"))?;
        let slot = names
            .iter()
            .position(|n| *n == key)
            .ok_or_else(|| format!("unknown header field {key}"))?;
        let v = value
            .parse::<usize>()
            .map_err(|_| format!("bad value for header field {key}"))?;
        dims[slot] = Some(v);
    }
    let get = |i: usize| dims[i].ok_or_else(|| format!("missing header field {}", names[i]));
    Ok(SgaConfig {
        p: get(0)?,
        m: get(1)?,
        q: get(2)?,
        d: get(3)?,
        k_layers: get(4)?,
    })
}

/// Named slices of the canonical flat ordering, e.g. `layer.0.w_ia`.
///
/// Model files store one PARAM line per block in exactly this order; the
/// gradient check uses the names to report which block a bad coordinate
/// lives in.
pub fn block_spans(cfg: &SgaConfig) -> Vec<(String, Range<usize>)> {
    let mut spans = Vec::new();
    let mut at = 0;
    let mut push = |spans: &mut Vec<(String, Range<usize>)>, name: String, len: usize| {
        spans.push((name, at..at + len));
        at += len;
    };
    for k in 0..cfg.k_layers {
        push(&mut spans, format!("layer.{k}.w_ia"), cfg.d * cfg.p);
        push(&mut spans, format!("layer.{k}.w_gs"), cfg.q * cfg.p);
        push(&mut spans, format!("layer.{k}.w_ga"), cfg.d * cfg.q);
        push(&mut spans, format!("layer.{k}.w_p"), cfg.d);
        push(&mut spans, format!("layer.{k}.b_p"), 1);
    }
    push(&mut spans, "matcher.w_e".to_string(), cfg.p * cfg.q);
    push(&mut spans, "matcher.b_e".to_string(), cfg.p);
    spans
}

/// Gradients for every trainable parameter, shaped like the model.
#[derive(Debug, Clone)]
pub struct ModelGradients {
    pub layers: Vec<SgaLayerParams>,
    pub matcher: MatcherParams,
}

impl ModelGradients {
    pub fn zeros(cfg: &SgaConfig) -> Self {
        ModelGradients {
            layers: (0..cfg.k_layers).map(|_| SgaLayerParams::zeros(cfg)).collect(),
            matcher: MatcherParams::zeros(cfg.p, cfg.q),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.write_flat(&mut out);
        }
        self.matcher.write_flat(&mut out);
        out
    }
}

/// One training example: fixed region features plus the index of its class
/// in the (seen) semantic table.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub regions: Matrix,
    pub class_index: usize,
}

/// Forward traces of a batch, kept for the backward pass.
pub struct BatchTrace {
    sga: Vec<SgaTrace>,
    matcher: MatcherBatchTrace,
    /// Mean summed guide loss over the batch.
    guide: f64,
}

/// Runs the full network over a batch and composes the loss.
///
/// The guide term sums the squared distance between every layer's guide
/// middle activation and the true class semantic, averaged over the batch.
pub fn batch_forward(
    model: &ZslModel,
    table: &ClassSemanticTable,
    batch: &[&TrainExample],
    weights: &LossWeights,
) -> Result<(LossBreakdown, BatchTrace)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".to_string()));
    }
    let mut sga_traces = Vec::with_capacity(batch.len());
    let mut matcher_examples = Vec::with_capacity(batch.len());
    let mut guide = 0.0;
    for ex in batch {
        if ex.class_index >= table.len() {
            return Err(Error::InvalidArgument(format!(
                "class index {} out of range for table of {}",
                ex.class_index,
                table.len()
            )));
        }
        let trace = sga::sga_forward_trace(&model.cfg, &model.layers, &ex.regions)?;
        let semantic = table.semantic_at(ex.class_index);
        for layer in &trace.layers {
            guide += sga::guide_loss(&layer.mid, semantic)?;
        }
        matcher_examples.push(matcher::BatchExample {
            fused: trace.fused.clone(),
            class_index: ex.class_index,
        });
        sga_traces.push(trace);
    }
    guide /= batch.len() as f64;
    let matcher_trace = matcher::matcher_forward_batch(&model.matcher, table, &matcher_examples)?;
    let loss = matcher::total_loss(
        matcher_trace.classify,
        matcher_trace.align,
        guide,
        weights.lambda_align,
        weights.lambda_guide,
    );
    Ok((
        loss,
        BatchTrace {
            sga: sga_traces,
            matcher: matcher_trace,
            guide,
        },
    ))
}

/// Backward pass matching [`batch_forward`]; gradients are for the total
/// weighted loss averaged over the batch.
pub fn batch_backward(
    model: &ZslModel,
    table: &ClassSemanticTable,
    batch: &[&TrainExample],
    trace: &BatchTrace,
    weights: &LossWeights,
) -> Result<ModelGradients> {
    let matcher_examples: Vec<matcher::BatchExample> = batch
        .iter()
        .zip(&trace.sga)
        .map(|(ex, t)| matcher::BatchExample {
            fused: t.fused.clone(),
            class_index: ex.class_index,
        })
        .collect();
    let (matcher_grads, d_fused) = matcher::matcher_backward(
        &model.matcher,
        table,
        &trace.matcher,
        &matcher_examples,
        weights.lambda_align,
    )?;

    let mut grads = ModelGradients::zeros(&model.cfg);
    grads.matcher = matcher_grads;
    let inv_b = 1.0 / batch.len() as f64;
    for ((ex, sga_trace), du) in batch.iter().zip(&trace.sga).zip(&d_fused) {
        let semantic = table.semantic_at(ex.class_index);
        let grad_mids: Vec<Vector> = sga_trace
            .layers
            .iter()
            .map(|layer| {
                sga::guide_loss_grad(&layer.mid, semantic)
                    .map(|g| g.scale(weights.lambda_guide * inv_b))
            })
            .collect::<Result<Vec<_>>>()?;
        let (layer_grads, _) =
            sga::sga_backward(&model.cfg, &model.layers, sga_trace, du, &grad_mids)?;
        for (acc, g) in grads.layers.iter_mut().zip(layer_grads) {
            acc.w_ia = acc.w_ia.add(&g.w_ia)?;
            acc.w_gs = acc.w_gs.add(&g.w_gs)?;
            acc.w_ga = acc.w_ga.add(&g.w_ga)?;
            acc.w_p.add_assign(&g.w_p);
            acc.b_p += g.b_p;
        }
    }
    Ok(grads)
}

impl BatchTrace {
    pub fn guide(&self) -> f64 {
        self.guide
    }
}
