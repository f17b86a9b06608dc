//! Matching attended images against class semantics.
//!
//! Class semantic vectors live in a `q`-dimensional space; attended images
//! are summarized by a `p`-dimensional fused vector. A one-layer embedding
//! lifts each class semantic into the visual space, where three signals are
//! trained jointly:
//!
//! - a softmax over dot products with every (seen) class embedding, scored
//!   with cross entropy against the true label,
//! - an alignment pull that moves the true class embedding and the fused
//!   image vector toward each other,
//! - (computed elsewhere) the guide pull on the attention layers.
//!
//! At test time the same embedding maps *unseen* class semantics into the
//! visual space and images are assigned by nearest embedded class.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{outer, softmax, Matrix, Vector};

/// Cross-entropy probabilities are clamped here before the log so a
/// confidently wrong model yields a huge but finite loss.
pub const PROB_FLOOR: f64 = 1e-300;

/// Weights of the semantic embedding layer: `embed(s) = relu(w_e s + b_e)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatcherParams {
    /// `p x q`.
    pub w_e: Matrix,
    /// Length `p`.
    pub b_e: Vector,
}

impl MatcherParams {
    /// The bias starts positive rather than at zero: with a zero bias the
    /// freshly initialised class embeddings have near-zero norm, so the
    /// alignment term's cheapest early move is to shrink the fused image
    /// embedding by down-weighting exactly the regions that carry the class
    /// signal. Starting the two sides at comparable scale removes that
    /// incentive and leaves relu inputs active.
    pub fn init(p: usize, q: usize, rng: &mut ChaCha8Rng) -> Self {
        MatcherParams {
            w_e: rng::glorot_matrix(rng, p, q),
            b_e: Vector::from_vec(vec![0.5; p]),
        }
    }

    pub fn zeros(p: usize, q: usize) -> Self {
        MatcherParams {
            w_e: Matrix::zeros(p, q),
            b_e: Vector::zeros(p),
        }
    }

    pub fn p(&self) -> usize {
        self.w_e.rows()
    }

    pub fn q(&self) -> usize {
        self.w_e.cols()
    }

    pub fn validate(&self, p: usize, q: usize) -> Result<()> {
        if self.w_e.shape() != (p, q) {
            return Err(Error::shape(
                "matcher weight w_e",
                self.w_e.shape_string(),
                format!("{p}x{q}"),
            ));
        }
        if self.b_e.len() != p {
            return Err(Error::shape(
                "matcher bias b_e",
                format!("{}", self.b_e.len()),
                format!("{p}"),
            ));
        }
        Ok(())
    }

    pub fn flat_len(p: usize, q: usize) -> usize {
        p * q + p
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.w_e.data());
        out.extend_from_slice(self.b_e.data());
    }

    pub fn read_flat(p: usize, q: usize, src: &mut impl Iterator<Item = f64>) -> Result<Self> {
        let w: Vec<f64> = src.take(p * q).collect();
        let b: Vec<f64> = src.take(p).collect();
        if w.len() != p * q || b.len() != p {
            return Err(Error::InvalidArgument(
                "flat parameter buffer too short for matcher".to_string(),
            ));
        }
        Ok(MatcherParams {
            w_e: Matrix::from_vec(p, q, w)?,
            b_e: Vector::from_vec(b),
        })
    }
}

/// Class ids with their semantic vectors, kept sorted by id so that every
/// index-based computation downstream is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSemanticTable {
    ids: Vec<u32>,
    semantics: Vec<Vector>,
}

impl ClassSemanticTable {
    pub fn new(mut pairs: Vec<(u32, Vector)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Validation("class semantic table is empty".to_string()));
        }
        pairs.sort_by_key(|(id, _)| *id);
        let q = pairs[0].1.len();
        if q == 0 {
            return Err(Error::Validation(
                "class semantic vectors must be non-empty".to_string(),
            ));
        }
        let mut ids = Vec::with_capacity(pairs.len());
        let mut semantics = Vec::with_capacity(pairs.len());
        for (id, s) in pairs {
            if ids.last() == Some(&id) {
                return Err(Error::Validation(format!(
                    "duplicate class id {id} in semantic table"
                )));
            }
            if s.len() != q {
                return Err(Error::shape(
                    format!("semantic vector for class {id}"),
                    format!("{}", s.len()),
                    format!("{q}"),
                ));
            }
            ids.push(id);
            semantics.push(s);
        }
        Ok(ClassSemanticTable { ids, semantics })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn q(&self) -> usize {
        self.semantics[0].len()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn id_at(&self, index: usize) -> u32 {
        self.ids[index]
    }

    pub fn semantic_at(&self, index: usize) -> &Vector {
        &self.semantics[index]
    }

    pub fn index_of(&self, class_id: u32) -> Option<usize> {
        self.ids.binary_search(&class_id).ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &Vector)> {
        self.ids.iter().copied().zip(self.semantics.iter())
    }
}

/// Embeds one class semantic into the visual space.
pub fn embed_semantic(params: &MatcherParams, semantic: &Vector) -> Result<Vector> {
    let pre = params.w_e.mul_vec(semantic)?.add(&params.b_e)?;
    Ok(pre.relu())
}

/// Pre- and post-activation embeddings for every class in table order.
#[derive(Debug, Clone)]
pub struct EmbeddedClasses {
    pub pre: Vec<Vector>,
    pub out: Vec<Vector>,
}

pub fn embed_all(params: &MatcherParams, table: &ClassSemanticTable) -> Result<EmbeddedClasses> {
    let mut pre = Vec::with_capacity(table.len());
    let mut out = Vec::with_capacity(table.len());
    for (_, s) in table.iter() {
        let a = params.w_e.mul_vec(s)?.add(&params.b_e)?;
        out.push(a.relu());
        pre.push(a);
    }
    Ok(EmbeddedClasses { pre, out })
}

/// Squared distance between an embedded class and a fused image vector.
pub fn align_loss(embedded: &Vector, fused: &Vector) -> Result<f64> {
    Ok(embedded.sub(fused)?.norm_sq())
}

/// Softmax over dot products between the fused image vector and every
/// embedded class, in table order.
pub fn class_probs(embedded: &EmbeddedClasses, fused: &Vector) -> Result<Vector> {
    let mut scores = Vector::zeros(embedded.out.len());
    for (c, v) in embedded.out.iter().enumerate() {
        scores.set(c, v.dot(fused)?);
    }
    Ok(softmax(&scores))
}

/// Negative log probability of the true class, clamped to stay finite.
pub fn classify_loss(probs: &Vector, true_index: usize) -> f64 {
    assert!(true_index < probs.len(), "class index out of range");
    -probs.get(true_index).max(PROB_FLOOR).ln()
}

/// One training example as the matcher sees it.
#[derive(Debug, Clone)]
pub struct BatchExample {
    /// Fused image vector coming out of the attention stack.
    pub fused: Vector,
    /// Index of the true class in the semantic table.
    pub class_index: usize,
}

/// Forward results of a batch, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MatcherBatchTrace {
    pub embedded: EmbeddedClasses,
    /// Class probabilities per example.
    pub probs: Vec<Vector>,
    /// Mean cross-entropy over the batch.
    pub classify: f64,
    /// Mean squared alignment distance over the batch.
    pub align: f64,
}

pub fn matcher_forward_batch(
    params: &MatcherParams,
    table: &ClassSemanticTable,
    examples: &[BatchExample],
) -> Result<MatcherBatchTrace> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("empty matcher batch".to_string()));
    }
    if table.q() != params.q() {
        return Err(Error::shape(
            "matcher semantic dimension",
            format!("{}", params.q()),
            format!("{}", table.q()),
        ));
    }
    let embedded = embed_all(params, table)?;
    let mut probs = Vec::with_capacity(examples.len());
    let mut classify = 0.0;
    let mut align = 0.0;
    for ex in examples {
        if ex.class_index >= table.len() {
            return Err(Error::InvalidArgument(format!(
                "class index {} out of range for table of {}",
                ex.class_index,
                table.len()
            )));
        }
        let p = class_probs(&embedded, &ex.fused)?;
        classify += classify_loss(&p, ex.class_index);
        align += align_loss(&embedded.out[ex.class_index], &ex.fused)?;
        probs.push(p);
    }
    let inv_b = 1.0 / examples.len() as f64;
    Ok(MatcherBatchTrace {
        embedded,
        probs,
        classify: classify * inv_b,
        align: align * inv_b,
    })
}

/// Backward pass for `classify + lambda_align * align` over a batch.
///
/// Returns the matcher parameter gradients and, per example, the gradient
/// with respect to the fused image vector (which the attention stack then
/// propagates further down).
pub fn matcher_backward(
    params: &MatcherParams,
    table: &ClassSemanticTable,
    trace: &MatcherBatchTrace,
    examples: &[BatchExample],
    lambda_align: f64,
) -> Result<(MatcherParams, Vec<Vector>)> {
    if trace.probs.len() != examples.len() {
        return Err(Error::InvalidArgument(format!(
            "trace covers {} examples, batch has {}",
            trace.probs.len(),
            examples.len()
        )));
    }
    let p = params.p();
    let inv_b = 1.0 / examples.len() as f64;
    let mut d_embed = vec![Vector::zeros(p); table.len()];
    let mut d_fused = Vec::with_capacity(examples.len());

    for (ex, probs) in examples.iter().zip(&trace.probs) {
        // Softmax + cross entropy: dscore_c = (p_c - [c == y]) / B.
        let mut du = Vector::zeros(p);
        for c in 0..table.len() {
            let mut ds = probs.get(c);
            if c == ex.class_index {
                ds -= 1.0;
            }
            ds *= inv_b;
            if ds != 0.0 {
                let v = &trace.embedded.out[c];
                let dv = &mut d_embed[c];
                for r in 0..p {
                    du.set(r, du.get(r) + ds * v.get(r));
                    dv.set(r, dv.get(r) + ds * ex.fused.get(r));
                }
            }
        }
        // Alignment: d/du ||v_y - u||^2 = 2 (u - v_y), and the mirror image
        // for the embedded class.
        let v_y = &trace.embedded.out[ex.class_index];
        let coeff = 2.0 * lambda_align * inv_b;
        for r in 0..p {
            let diff = ex.fused.get(r) - v_y.get(r);
            du.set(r, du.get(r) + coeff * diff);
            let dy = &mut d_embed[ex.class_index];
            dy.set(r, dy.get(r) - coeff * diff);
        }
        d_fused.push(du);
    }

    // Through the relu and the linear embedding.
    let mut grads = MatcherParams::zeros(p, params.q());
    for (c, (_, s)) in table.iter().enumerate() {
        let mut d_pre = Vector::zeros(p);
        for r in 0..p {
            if trace.embedded.pre[c].get(r) > 0.0 {
                d_pre.set(r, d_embed[c].get(r));
            }
        }
        let dw = outer(&d_pre, s);
        grads.w_e = grads.w_e.add(&dw)?;
        grads.b_e.add_assign(&d_pre);
    }
    Ok((grads, d_fused))
}

/// The three loss components and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub classify: f64,
    pub align: f64,
    pub guide: f64,
    pub total: f64,
}

/// Combines loss components; `total` is exactly
/// `classify + lambda_align * align + lambda_guide * guide`.
pub fn total_loss(
    classify: f64,
    align: f64,
    guide: f64,
    lambda_align: f64,
    lambda_guide: f64,
) -> LossBreakdown {
    LossBreakdown {
        classify,
        align,
        guide,
        total: classify + lambda_align * align + lambda_guide * guide,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_grad;

    fn table(q: usize, n: usize, seed: u64) -> ClassSemanticTable {
        let mut rng = rng::stream(seed, 50);
        let pairs = (0..n as u32)
            .map(|id| (id, rng::uniform_vector(&mut rng, q, 1.0)))
            .collect();
        ClassSemanticTable::new(pairs).unwrap()
    }

    #[test]
    fn table_sorts_and_rejects_duplicates() {
        let t = ClassSemanticTable::new(vec![
            (7, Vector::from_slice(&[1.0])),
            (2, Vector::from_slice(&[2.0])),
        ])
        .unwrap();
        assert_eq!(t.ids(), &[2, 7]);
        assert_eq!(t.index_of(7), Some(1));
        assert_eq!(t.index_of(3), None);
        assert_eq!(t.id_at(0), 2);
        let dup = ClassSemanticTable::new(vec![
            (1, Vector::from_slice(&[1.0])),
            (1, Vector::from_slice(&[2.0])),
        ]);
        assert!(dup.is_err());
        let ragged = ClassSemanticTable::new(vec![
            (1, Vector::from_slice(&[1.0])),
            (2, Vector::from_slice(&[1.0, 2.0])),
        ]);
        assert!(ragged.is_err());
        assert!(ClassSemanticTable::new(vec![]).is_err());
    }

    #[test]
    fn embed_semantic_hand_case() {
        let params = MatcherParams {
            w_e: Matrix::from_rows(&[&[1.0, 0.0], &[0.0, -1.0]]).unwrap(),
            b_e: Vector::from_slice(&[0.5, 0.0]),
        };
        let s = Vector::from_slice(&[2.0, 3.0]);
        let v = embed_semantic(&params, &s).unwrap();
        // Row 0: 2 + 0.5 = 2.5; row 1: -3 clamps to 0.
        assert_eq!(v.data(), &[2.5, 0.0]);
    }

    #[test]
    fn align_loss_basics() {
        let a = Vector::from_slice(&[1.0, 2.0]);
        let b = Vector::from_slice(&[1.0, 2.0]);
        assert_eq!(align_loss(&a, &b).unwrap(), 0.0);
        let c = Vector::from_slice(&[2.0, 0.0]);
        assert_eq!(align_loss(&a, &c).unwrap(), 5.0);
        assert_eq!(
            align_loss(&a, &c).unwrap(),
            align_loss(&c, &a).unwrap()
        );
    }

    #[test]
    fn class_probs_prefer_aligned_class() {
        let embedded = EmbeddedClasses {
            pre: vec![],
            out: vec![
                Vector::from_slice(&[1.0, 0.0]),
                Vector::from_slice(&[0.0, 1.0]),
            ],
        };
        let u = Vector::from_slice(&[3.0, 0.1]);
        let p = class_probs(&embedded, &u).unwrap();
        assert!(p.get(0) > p.get(1));
        let sum: f64 = p.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn classify_loss_cases() {
        let certain = Vector::from_slice(&[1.0, 0.0]);
        assert_eq!(classify_loss(&certain, 0), 0.0);
        // Zero probability stays finite thanks to the floor.
        let wrong = classify_loss(&certain, 1);
        assert!(wrong.is_finite() && wrong > 600.0);
        let even = Vector::from_slice(&[0.5, 0.5]);
        assert!((classify_loss(&even, 0) - 0.5f64.recip().ln()).abs() < 1e-12);
    }

    #[test]
    fn total_loss_is_exact_combination() {
        let lb = total_loss(0.7, 0.3, 0.11, 2.0, 0.5);
        assert_eq!(lb.total, 0.7 + 2.0 * 0.3 + 0.5 * 0.11);
        assert_eq!(lb.classify, 0.7);
        assert_eq!(lb.align, 0.3);
        assert_eq!(lb.guide, 0.11);
    }

    #[test]
    fn forward_batch_validates() {
        let t = table(3, 4, 1);
        let mut rng = rng::stream(1, 51);
        let params = MatcherParams::init(5, 3, &mut rng);
        assert!(matcher_forward_batch(&params, &t, &[]).is_err());
        let bad = BatchExample {
            fused: Vector::zeros(5),
            class_index: 9,
        };
        assert!(matcher_forward_batch(&params, &t, &[bad]).is_err());
        // Semantic dimension mismatch.
        let wrong_q = MatcherParams::init(5, 2, &mut rng);
        let ok = BatchExample {
            fused: Vector::zeros(5),
            class_index: 0,
        };
        assert!(matcher_forward_batch(&wrong_q, &t, &[ok]).is_err());
    }

    fn random_batch(p: usize, n_classes: usize, b: usize, seed: u64) -> Vec<BatchExample> {
        let mut rng = rng::stream(seed, 52);
        (0..b)
            .map(|i| BatchExample {
                fused: rng::uniform_vector(&mut rng, p, 1.5),
                class_index: i % n_classes,
            })
            .collect()
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let (p, q, n_classes, b) = (5, 3, 4, 6);
        let t = table(q, n_classes, 2);
        let mut rng = rng::stream(2, 53);
        let params = MatcherParams::init(p, q, &mut rng);
        let examples = random_batch(p, n_classes, b, 2);
        let lambda_align = 0.7;

        let loss = |flat: &[f64]| {
            let mut it = flat.iter().copied();
            let params = MatcherParams::read_flat(p, q, &mut it).unwrap();
            let tr = matcher_forward_batch(&params, &t, &examples).unwrap();
            tr.classify + lambda_align * tr.align
        };
        let mut flat = Vec::new();
        params.write_flat(&mut flat);
        let numeric = finite_diff_grad(loss, &flat, 1e-6).unwrap();

        let tr = matcher_forward_batch(&params, &t, &examples).unwrap();
        let (grads, _) = matcher_backward(&params, &t, &tr, &examples, lambda_align).unwrap();
        let mut analytic = Vec::new();
        grads.write_flat(&mut analytic);

        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
            assert!(rel < 1e-5, "param {i}: analytic {a} numeric {n}");
        }
    }

    #[test]
    fn fused_gradients_match_finite_differences() {
        let (p, q, n_classes, b) = (4, 3, 3, 3);
        let t = table(q, n_classes, 5);
        let mut rng = rng::stream(5, 54);
        let params = MatcherParams::init(p, q, &mut rng);
        let examples = random_batch(p, n_classes, b, 5);
        let lambda_align = 1.3;

        let tr = matcher_forward_batch(&params, &t, &examples).unwrap();
        let (_, d_fused) = matcher_backward(&params, &t, &tr, &examples, lambda_align).unwrap();

        for target in 0..b {
            let loss = |x: &[f64]| {
                let mut ex = examples.clone();
                ex[target].fused = Vector::from_slice(x);
                let tr = matcher_forward_batch(&params, &t, &ex).unwrap();
                tr.classify + lambda_align * tr.align
            };
            let numeric = finite_diff_grad(loss, examples[target].fused.data(), 1e-6).unwrap();
            for (a, n) in d_fused[target].data().iter().zip(&numeric) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
                assert!(rel < 1e-5, "example {target}: analytic {a} numeric {n}");
            }
        }
    }

    #[test]
    fn flat_roundtrip() {
        let mut rng = rng::stream(8, 55);
        let params = MatcherParams::init(6, 4, &mut rng);
        let mut flat = Vec::new();
        params.write_flat(&mut flat);
        assert_eq!(flat.len(), MatcherParams::flat_len(6, 4));
        let mut it = flat.iter().copied();
        let back = MatcherParams::read_flat(6, 4, &mut it).unwrap();
        assert_eq!(params, back);
    }
}
