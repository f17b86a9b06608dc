//! Seen/unseen class splits along a super-category taxonomy.
//!
//! Two protocols:
//!
//! - **Shared** (SCS): unseen classes keep seen siblings — every unseen
//!   class's super-category still contains seen classes, so knowledge can
//!   transfer within the family.
//! - **Exclusive** (SCE): whole super-categories go unseen, so nothing in
//!   an unseen class's family was ever trained on. Strictly harder.
//!
//! Classes must carry parents; [`super_categories`] derives them from the
//! semantic vectors via k-means when a dataset has none.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Vector;

use super::ClassEntry;

/// Which split protocol to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Scs,
    Sce,
}

impl SplitKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitKind::Scs => "scs",
            SplitKind::Sce => "sce",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "scs" => Ok(SplitKind::Scs),
            "sce" => Ok(SplitKind::Sce),
            other => Err(Error::InvalidArgument(format!(
                "unknown split kind {other}, expected scs or sce"
            ))),
        }
    }
}

fn parents_of(classes: &[ClassEntry]) -> Result<BTreeMap<u32, u32>> {
    let mut map = BTreeMap::new();
    for c in classes {
        let parent = c.parent.ok_or_else(|| {
            Error::Validation(format!(
                "class {} has no super-category; derive them first (k-means over semantics)",
                c.id
            ))
        })?;
        map.insert(c.id, parent);
    }
    Ok(map)
}

fn groups_of(parents: &BTreeMap<u32, u32>) -> BTreeMap<u32, Vec<u32>> {
    let mut groups: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for (&class, &parent) in parents {
        groups.entry(parent).or_default().push(class);
    }
    groups
}

fn unseen_target(n_classes: usize, unseen_fraction: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&unseen_fraction) || unseen_fraction <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "unseen fraction must lie in (0, 1), got {unseen_fraction}"
        )));
    }
    let target = (unseen_fraction * n_classes as f64).round() as usize;
    if target == 0 || target >= n_classes {
        return Err(Error::InvalidArgument(format!(
            "unseen fraction {unseen_fraction} of {n_classes} classes leaves no usable split"
        )));
    }
    Ok(target)
}

fn finish(
    classes: &[ClassEntry],
    unseen: Vec<u32>,
) -> (Vec<u32>, Vec<u32>) {
    let mut unseen = unseen;
    unseen.sort_unstable();
    let seen = classes
        .iter()
        .map(|c| c.id)
        .filter(|id| unseen.binary_search(id).is_err())
        .collect();
    (seen, unseen)
}

/// Shared split: marks classes unseen in seeded random order, but only
/// while their super-category keeps at least two classes that stay seen.
/// Returns `(seen, unseen)`, both sorted.
pub fn split_scs(
    classes: &[ClassEntry],
    unseen_fraction: f64,
    seed: u64,
) -> Result<(Vec<u32>, Vec<u32>)> {
    let parents = parents_of(classes)?;
    let target = unseen_target(classes.len(), unseen_fraction)?;
    let groups = groups_of(&parents);
    let mut remaining: BTreeMap<u32, usize> =
        groups.iter().map(|(&p, members)| (p, members.len())).collect();

    let mut rng = rng::stream(seed, rng::streams::SYNTH_SPLIT);
    let order = rng::shuffled_indices(&mut rng, classes.len());
    let mut unseen = Vec::with_capacity(target);
    for idx in order {
        if unseen.len() == target {
            break;
        }
        let class = &classes[idx];
        let parent = parents[&class.id];
        // Keep at least two seen classes in the family.
        if remaining[&parent] >= 3 {
            *remaining.get_mut(&parent).unwrap() -= 1;
            unseen.push(class.id);
        }
    }
    if unseen.len() < target {
        return Err(Error::Validation(format!(
            "shared split infeasible: only {} of {target} classes could go unseen \
             without emptying a super-category",
            unseen.len()
        )));
    }
    Ok(finish(classes, unseen))
}

/// Exclusive split: whole super-categories go unseen, in seeded random
/// order, until at least `round(fraction * classes)` classes are unseen.
/// Returns `(seen, unseen)`, both sorted.
pub fn split_sce(
    classes: &[ClassEntry],
    unseen_fraction: f64,
    seed: u64,
) -> Result<(Vec<u32>, Vec<u32>)> {
    let parents = parents_of(classes)?;
    let target = unseen_target(classes.len(), unseen_fraction)?;
    let groups = groups_of(&parents);
    let parent_ids: Vec<u32> = groups.keys().copied().collect();

    let mut rng = rng::stream(seed, rng::streams::SYNTH_SPLIT);
    let order = rng::shuffled_indices(&mut rng, parent_ids.len());
    let mut unseen = Vec::new();
    for idx in order {
        if unseen.len() >= target {
            break;
        }
        unseen.extend_from_slice(&groups[&parent_ids[idx]]);
    }
    if unseen.len() >= classes.len() {
        return Err(Error::Validation(
            "exclusive split infeasible: taking whole super-categories would leave \
             no seen classes"
                .to_string(),
        ));
    }
    if unseen.len() < target {
        return Err(Error::Validation(
            "exclusive split could not reach the requested unseen fraction".to_string(),
        ));
    }
    Ok(finish(classes, unseen))
}

/// True when every unseen class still has a seen class in its
/// super-category (and all parents are known).
pub fn is_scs(classes: &[ClassEntry], unseen: &[u32]) -> bool {
    let Ok(parents) = parents_of(classes) else {
        return false;
    };
    let is_unseen = |id: u32| unseen.contains(&id);
    unseen.iter().all(|u| {
        let Some(&pu) = parents.get(u) else {
            return false;
        };
        classes
            .iter()
            .any(|c| c.id != *u && parents[&c.id] == pu && !is_unseen(c.id))
    })
}

/// True when no unseen class shares a super-category with any seen class.
pub fn is_sce(classes: &[ClassEntry], unseen: &[u32]) -> bool {
    let Ok(parents) = parents_of(classes) else {
        return false;
    };
    let is_unseen = |id: u32| unseen.contains(&id);
    unseen.iter().all(|u| {
        let Some(&pu) = parents.get(u) else {
            return false;
        };
        classes
            .iter()
            .all(|c| parents[&c.id] != pu || is_unseen(c.id))
    })
}

/// Groups classes into `k` super-categories by k-means over their semantic
/// vectors. Returns class id -> cluster index. Deterministic for a given
/// seed; ties in assignment go to the lowest cluster index.
pub fn super_categories(
    classes: &[ClassEntry],
    k: usize,
    seed: u64,
) -> Result<BTreeMap<u32, u32>> {
    if classes.is_empty() {
        return Err(Error::InvalidArgument("no classes to cluster".to_string()));
    }
    if k == 0 || k > classes.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot form {k} super-categories from {} classes",
            classes.len()
        )));
    }
    let q = classes[0].semantic.len();
    for c in classes {
        if c.semantic.len() != q {
            return Err(Error::shape(
                format!("semantic vector of class {}", c.id),
                format!("{}", c.semantic.len()),
                format!("{q}"),
            ));
        }
    }

    // Farthest-first center seeding: a random first center, then always
    // the class farthest from every chosen center. Spreads the seeds
    // across well-separated groups instead of gambling on a uniform draw.
    let mut rng = rng::stream(seed, rng::streams::SYNTH_CLUSTER);
    let first = rng::shuffled_indices(&mut rng, classes.len())[0];
    let mut centers: Vec<Vector> = vec![classes[first].semantic.clone()];
    while centers.len() < k {
        let far = (0..classes.len())
            .max_by(|&a, &b| {
                let da = centers
                    .iter()
                    .map(|c| classes[a].semantic.sub(c).unwrap().norm_sq())
                    .fold(f64::INFINITY, f64::min);
                let db = centers
                    .iter()
                    .map(|c| classes[b].semantic.sub(c).unwrap().norm_sq())
                    .fold(f64::INFINITY, f64::min);
                da.partial_cmp(&db).unwrap().then(b.cmp(&a))
            })
            .unwrap();
        centers.push(classes[far].semantic.clone());
    }

    let mut assignment = vec![0usize; classes.len()];
    for _round in 0..100 {
        // Assign.
        let mut changed = false;
        for (i, c) in classes.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (j, center) in centers.iter().enumerate() {
                let d = c.semantic.sub(center).expect("dims checked").norm_sq();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        // Update.
        for j in 0..k {
            let members: Vec<usize> = (0..classes.len())
                .filter(|&i| assignment[i] == j)
                .collect();
            if members.is_empty() {
                // Rescue an empty cluster with the point farthest from its
                // current center.
                let far = (0..classes.len())
                    .max_by(|&a, &b| {
                        let da = classes[a]
                            .semantic
                            .sub(&centers[assignment[a]])
                            .unwrap()
                            .norm_sq();
                        let db = classes[b]
                            .semantic
                            .sub(&centers[assignment[b]])
                            .unwrap()
                            .norm_sq();
                        da.partial_cmp(&db).unwrap().then(b.cmp(&a))
                    })
                    .unwrap();
                centers[j] = classes[far].semantic.clone();
                assignment[far] = j;
                continue;
            }
            let mut mean = Vector::zeros(q);
            for &i in &members {
                mean.add_assign(&classes[i].semantic);
            }
            centers[j] = mean.scale(1.0 / members.len() as f64);
        }
    }
    Ok(classes
        .iter()
        .zip(&assignment)
        .map(|(c, &a)| (c.id, a as u32))
        .collect())
}
