//! Zero-shot evaluation: nearest-class accuracy and retrieval mAP.
//!
//! A trained model never saw labeled images of the evaluation classes.
//! Their semantic vectors are embedded into the visual space with the
//! trained matcher; images are assigned to the nearest embedded class, and
//! retrieval ranks all images by distance to an embedded class.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::matcher::{embed_semantic, ClassSemanticTable};
use crate::model::ZslModel;
use crate::tensor::{Matrix, Vector};

/// How image and class vectors are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceKind {
    Euclidean,
    /// `1 - cosine similarity`; vectors with zero norm compare as
    /// maximally dissimilar-but-not-opposite (distance 1).
    Cosine,
}

impl DistanceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DistanceKind::Euclidean => "euclidean",
            DistanceKind::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(DistanceKind::Euclidean),
            "cosine" => Ok(DistanceKind::Cosine),
            other => Err(Error::InvalidArgument(format!(
                "unknown distance kind {other}, expected euclidean or cosine"
            ))),
        }
    }
}

pub fn distance(kind: DistanceKind, a: &Vector, b: &Vector) -> Result<f64> {
    match kind {
        DistanceKind::Euclidean => Ok(a.sub(b)?.norm()),
        DistanceKind::Cosine => {
            let denom = a.norm() * b.norm();
            if denom == 0.0 {
                // Undefined direction; callers still need a total order.
                if a.len() != b.len() {
                    return Err(Error::shape(
                        "cosine distance",
                        format!("{}", a.len()),
                        format!("{}", b.len()),
                    ));
                }
                return Ok(1.0);
            }
            Ok(1.0 - a.dot(b)? / denom)
        }
    }
}

/// Embeds every class of the table into the visual space, in id order.
pub fn embed_classes(model: &ZslModel, table: &ClassSemanticTable) -> Result<Vec<(u32, Vector)>> {
    table
        .iter()
        .map(|(id, s)| Ok((id, embed_semantic(&model.matcher, s)?)))
        .collect()
}

/// Id of the class whose embedding is closest to `fused`. Ties go to the
/// lowest class id (the list is in ascending id order).
pub fn nearest_class(
    embedded: &[(u32, Vector)],
    fused: &Vector,
    kind: DistanceKind,
) -> Result<u32> {
    if embedded.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot classify against zero classes".to_string(),
        ));
    }
    let mut best_id = embedded[0].0;
    let mut best_d = distance(kind, &embedded[0].1, fused)?;
    for (id, v) in &embedded[1..] {
        let d = distance(kind, v, fused)?;
        if d < best_d {
            best_d = d;
            best_id = *id;
        }
    }
    Ok(best_id)
}

/// Assigns one image to the nearest embedded class of `table`.
pub fn classify_zero_shot(
    model: &ZslModel,
    table: &ClassSemanticTable,
    regions: &Matrix,
    kind: DistanceKind,
) -> Result<u32> {
    let embedded = embed_classes(model, table)?;
    let fused = model.embed_image(regions)?;
    nearest_class(&embedded, &fused, kind)
}

/// Accuracy over a labeled image set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Per class id: (correct, total).
    pub per_class: BTreeMap<u32, (usize, usize)>,
}

/// Classifies every `(regions, true_class)` pair against the table.
///
/// Every true class must be present in the table; a missing one indicates
/// the caller assembled the wrong evaluation pool.
pub fn evaluate_accuracy(
    model: &ZslModel,
    table: &ClassSemanticTable,
    examples: &[(&Matrix, u32)],
    kind: DistanceKind,
) -> Result<EvalResult> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument(
            "no examples to evaluate".to_string(),
        ));
    }
    let embedded = embed_classes(model, table)?;
    let mut per_class: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    let mut correct = 0usize;
    for (regions, truth) in examples {
        if table.index_of(*truth).is_none() {
            return Err(Error::Validation(format!(
                "evaluation image labeled with class {truth} which is not in the candidate table"
            )));
        }
        let fused = model.embed_image(regions)?;
        let predicted = nearest_class(&embedded, &fused, kind)?;
        let entry = per_class.entry(*truth).or_insert((0, 0));
        entry.1 += 1;
        if predicted == *truth {
            entry.0 += 1;
            correct += 1;
        }
    }
    Ok(EvalResult {
        total: examples.len(),
        correct,
        accuracy: correct as f64 / examples.len() as f64,
        per_class,
    })
}

/// How deep the ranked list is scored for average precision, as a share of
/// each query class's relevant-image count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthMode {
    /// Half as many retrievals as there are relevant images.
    Half,
    /// Exactly as many retrievals as there are relevant images.
    Full,
}

impl DepthMode {
    pub fn ratio(&self) -> f64 {
        match self {
            DepthMode::Half => 0.5,
            DepthMode::Full => 1.0,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DepthMode::Half => "50",
            DepthMode::Full => "100",
        }
    }

    /// Number of ranked items scored for a class with `relevant` images.
    pub fn cutoff(&self, relevant: usize) -> usize {
        ((self.ratio() * relevant as f64).round() as usize).max(1)
    }
}

/// Indices that sort `dists` ascending; equal distances keep index order.
pub fn rank_by_distance(dists: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dists.len()).collect();
    idx.sort_by(|&a, &b| {
        dists[a]
            .partial_cmp(&dists[b])
            .expect("distances are finite")
            .then(a.cmp(&b))
    });
    idx
}

/// Ranks images by distance between their fused embedding and an embedded
/// class vector, nearest first.
pub fn rank_images(
    model: &ZslModel,
    class_embedding: &Vector,
    images: &[&Matrix],
    kind: DistanceKind,
) -> Result<Vec<usize>> {
    let mut dists = Vec::with_capacity(images.len());
    for regions in images {
        let fused = model.embed_image(regions)?;
        dists.push(distance(kind, class_embedding, &fused)?);
    }
    Ok(rank_by_distance(&dists))
}

/// Average precision of one ranked list, scored to the depth cutoff.
///
/// `relevant` flags the ranked items in rank order; `total_relevant` is the
/// number of relevant images in the whole pool (it must be positive and at
/// least the number of set flags). The score sums precision at every
/// relevant hit within the cutoff and normalizes by the largest achievable
/// number of hits there.
pub fn average_precision(
    relevant: &[bool],
    total_relevant: usize,
    depth: DepthMode,
) -> Result<f64> {
    if total_relevant == 0 {
        return Err(Error::InvalidArgument(
            "average precision needs at least one relevant image".to_string(),
        ));
    }
    if relevant.iter().filter(|&&r| r).count() > total_relevant {
        return Err(Error::InvalidArgument(
            "more relevant flags than total_relevant".to_string(),
        ));
    }
    let cutoff = depth.cutoff(total_relevant).min(relevant.len());
    if cutoff == 0 {
        return Err(Error::InvalidArgument(
            "empty ranking cannot be scored".to_string(),
        ));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in relevant.iter().take(cutoff).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / total_relevant.min(cutoff) as f64)
}

/// Mean average precision over all classes of the query table.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub per_class: BTreeMap<u32, f64>,
    pub mean_ap: f64,
}

/// Scores retrieval for every class of `table` against the image pool.
///
/// Each class query ranks *all* images; relevance means the image's true
/// class equals the query class. Every query class must own at least one
/// image in the pool.
pub fn retrieval_map(
    model: &ZslModel,
    table: &ClassSemanticTable,
    examples: &[(&Matrix, u32)],
    kind: DistanceKind,
    depth: DepthMode,
) -> Result<RetrievalResult> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("empty retrieval pool".to_string()));
    }
    let embedded = embed_classes(model, table)?;
    let fused: Vec<Vector> = examples
        .iter()
        .map(|(regions, _)| model.embed_image(regions))
        .collect::<Result<Vec<_>>>()?;

    let mut per_class = BTreeMap::new();
    for (class_id, class_vec) in &embedded {
        let total_relevant = examples.iter().filter(|(_, c)| c == class_id).count();
        if total_relevant == 0 {
            return Err(Error::Validation(format!(
                "retrieval query class {class_id} has no images in the pool"
            )));
        }
        let dists: Vec<f64> = fused
            .iter()
            .map(|u| distance(kind, class_vec, u))
            .collect::<Result<Vec<_>>>()?;
        let order = rank_by_distance(&dists);
        let flags: Vec<bool> = order.iter().map(|&i| examples[i].1 == *class_id).collect();
        per_class.insert(*class_id, average_precision(&flags, total_relevant, depth)?);
    }
    let mean_ap = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(RetrievalResult { per_class, mean_ap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::MatcherParams;
    use crate::sga::SgaConfig;
    use proptest::prelude::*;

    #[test]
    fn euclidean_distance_hand_case() {
        let a = Vector::from_slice(&[0.0, 0.0]);
        let b = Vector::from_slice(&[3.0, 4.0]);
        assert_eq!(distance(DistanceKind::Euclidean, &a, &b).unwrap(), 5.0);
    }

    #[test]
    fn cosine_distance_cases() {
        let x = Vector::from_slice(&[1.0, 0.0]);
        let y = Vector::from_slice(&[0.0, 2.0]);
        let same = Vector::from_slice(&[3.0, 0.0]);
        let neg = Vector::from_slice(&[-1.0, 0.0]);
        let zero = Vector::zeros(2);
        let d = |a, b| distance(DistanceKind::Cosine, a, b).unwrap();
        assert!((d(&x, &same) - 0.0).abs() < 1e-15);
        assert!((d(&x, &y) - 1.0).abs() < 1e-15);
        assert!((d(&x, &neg) - 2.0).abs() < 1e-15);
        assert_eq!(d(&x, &zero), 1.0);
        assert_eq!(d(&zero, &zero), 1.0);
    }

    #[test]
    fn distance_kind_parsing() {
        assert_eq!(DistanceKind::parse("euclidean").unwrap(), DistanceKind::Euclidean);
        assert_eq!(DistanceKind::parse("cosine").unwrap(), DistanceKind::Cosine);
        assert!(DistanceKind::parse("manhattan").is_err());
        assert_eq!(DistanceKind::Euclidean.as_str(), "euclidean");
    }

    #[test]
    fn nearest_class_prefers_lowest_id_on_ties() {
        let embedded = vec![
            (3u32, Vector::from_slice(&[1.0, 0.0])),
            (8u32, Vector::from_slice(&[1.0, 0.0])),
            (9u32, Vector::from_slice(&[5.0, 5.0])),
        ];
        let u = Vector::from_slice(&[1.0, 0.0]);
        assert_eq!(nearest_class(&embedded, &u, DistanceKind::Euclidean).unwrap(), 3);
        assert!(nearest_class(&[], &u, DistanceKind::Euclidean).is_err());
    }

    /// A model whose class embedding is the identity: no attention layers,
    /// `w_e = I`, zero bias. With non-negative semantics the embedded class
    /// equals its semantic vector, so geometry is fully under the test's
    /// control.
    fn identity_model(p: usize, m: usize) -> ZslModel {
        let cfg = SgaConfig {
            p,
            m,
            q: p,
            d: 2,
            k_layers: 0,
        };
        ZslModel {
            cfg,
            layers: vec![],
            matcher: MatcherParams {
                w_e: Matrix::identity(p),
                b_e: Vector::zeros(p),
            },
        }
    }

    fn constant_regions(v: &[f64], m: usize) -> Matrix {
        let p = v.len();
        let mut regions = Matrix::zeros(p, m);
        for c in 0..m {
            regions.set_col(c, &Vector::from_slice(v));
        }
        regions
    }

    #[test]
    fn identity_model_classifies_by_geometry() {
        let model = identity_model(2, 3);
        let table = ClassSemanticTable::new(vec![
            (0, Vector::from_slice(&[1.0, 0.0])),
            (1, Vector::from_slice(&[0.0, 1.0])),
        ])
        .unwrap();
        let near_zero = constant_regions(&[0.9, 0.1], 3);
        let near_one = constant_regions(&[0.2, 0.8], 3);
        assert_eq!(
            classify_zero_shot(&model, &table, &near_zero, DistanceKind::Euclidean).unwrap(),
            0
        );
        assert_eq!(
            classify_zero_shot(&model, &table, &near_one, DistanceKind::Euclidean).unwrap(),
            1
        );
    }

    #[test]
    fn evaluate_accuracy_counts_per_class() {
        let model = identity_model(2, 2);
        let table = ClassSemanticTable::new(vec![
            (0, Vector::from_slice(&[1.0, 0.0])),
            (1, Vector::from_slice(&[0.0, 1.0])),
        ])
        .unwrap();
        let a = constant_regions(&[0.9, 0.0], 2);
        let b = constant_regions(&[0.0, 0.9], 2);
        let confused = constant_regions(&[0.9, 0.05], 2); // labeled 1, looks like 0
        let examples: Vec<(&Matrix, u32)> = vec![(&a, 0), (&b, 1), (&confused, 1)];
        let res = evaluate_accuracy(&model, &table, &examples, DistanceKind::Euclidean).unwrap();
        assert_eq!(res.total, 3);
        assert_eq!(res.correct, 2);
        assert!((res.accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(res.per_class[&0], (1, 1));
        assert_eq!(res.per_class[&1], (1, 2));

        // An example labeled with a class outside the table is a bug.
        let examples_bad: Vec<(&Matrix, u32)> = vec![(&a, 7)];
        assert!(
            evaluate_accuracy(&model, &table, &examples_bad, DistanceKind::Euclidean).is_err()
        );
    }

    #[test]
    fn rank_by_distance_breaks_ties_by_index() {
        let order = rank_by_distance(&[0.5, 0.2, 0.5, 0.1]);
        assert_eq!(order, vec![3, 1, 0, 2]);
    }

    #[test]
    fn depth_cutoffs() {
        assert_eq!(DepthMode::Full.cutoff(7), 7);
        assert_eq!(DepthMode::Half.cutoff(7), 4); // round(3.5) -> 4
        assert_eq!(DepthMode::Half.cutoff(1), 1);
        assert_eq!(DepthMode::Half.cutoff(4), 2);
    }

    #[test]
    fn average_precision_hand_cases() {
        // Both relevant items first.
        let ap = average_precision(&[true, true, false], 2, DepthMode::Full).unwrap();
        assert!((ap - 1.0).abs() < 1e-15);
        // Pattern R N R with R = 2, full depth: cutoff 2 -> only first hit.
        let ap = average_precision(&[true, false, true], 2, DepthMode::Full).unwrap();
        assert!((ap - 0.5).abs() < 1e-15);
        // Same pattern at half depth: cutoff 1, one hit at precision 1.
        let ap = average_precision(&[true, false, true], 2, DepthMode::Half).unwrap();
        assert!((ap - 1.0).abs() < 1e-15);
        // Nothing relevant found.
        let ap = average_precision(&[false, false], 5, DepthMode::Full).unwrap();
        assert_eq!(ap, 0.0);
        // Errors.
        assert!(average_precision(&[true], 0, DepthMode::Full).is_err());
        assert!(average_precision(&[true, true], 1, DepthMode::Full).is_err());
    }

    #[test]
    fn retrieval_on_identity_geometry_is_perfect() {
        let model = identity_model(2, 2);
        let table = ClassSemanticTable::new(vec![
            (0, Vector::from_slice(&[1.0, 0.0])),
            (1, Vector::from_slice(&[0.0, 1.0])),
        ])
        .unwrap();
        let imgs: Vec<Matrix> = vec![
            constant_regions(&[0.95, 0.0], 2),
            constant_regions(&[1.05, 0.1], 2),
            constant_regions(&[0.0, 0.9], 2),
            constant_regions(&[0.1, 1.1], 2),
        ];
        let examples: Vec<(&Matrix, u32)> =
            vec![(&imgs[0], 0), (&imgs[1], 0), (&imgs[2], 1), (&imgs[3], 1)];
        for depth in [DepthMode::Half, DepthMode::Full] {
            let res =
                retrieval_map(&model, &table, &examples, DistanceKind::Euclidean, depth).unwrap();
            assert!((res.mean_ap - 1.0).abs() < 1e-15, "{depth:?}: {res:?}");
            assert_eq!(res.per_class.len(), 2);
        }
        // A query class with no images in the pool is a usage error.
        let sparse: Vec<(&Matrix, u32)> = vec![(&imgs[0], 0)];
        assert!(retrieval_map(
            &model,
            &table,
            &sparse,
            DistanceKind::Euclidean,
            DepthMode::Full
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn average_precision_stays_in_unit_interval(
            flags in proptest::collection::vec(any::<bool>(), 1..40),
            extra in 0usize..5,
        ) {
            let set = flags.iter().filter(|&&f| f).count();
            let total = set + extra;
            prop_assume!(total > 0);
            for depth in [DepthMode::Half, DepthMode::Full] {
                let ap = average_precision(&flags, total, depth).unwrap();
                prop_assert!((0.0..=1.0).contains(&ap), "{ap}");
            }
        }

        #[test]
        fn perfect_ranking_scores_one(r in 1usize..20, tail in 0usize..20) {
            let mut flags = vec![true; r];
            flags.extend(std::iter::repeat(false).take(tail));
            for depth in [DepthMode::Half, DepthMode::Full] {
                let ap = average_precision(&flags, r, depth).unwrap();
                prop_assert!((ap - 1.0).abs() < 1e-12);
            }
        }
    }
}
