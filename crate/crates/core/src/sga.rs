//! Semantics-guided attention over image regions.
//!
//! An image arrives as a `p x m` matrix whose columns are fixed region
//! features. One attention layer fuses the regions into a global vector,
//! lifts that vector through a two-step guide network into a latent space,
//! lifts each region into the same space, combines the two with a gated
//! tanh, and softmaxes a learned projection into one weight per region.
//! Regions are then rescaled by `1 + weight` so that attention sharpens the
//! informative columns without ever zeroing anything out. Layers stack:
//! the refined matrix of layer `k` is the input of layer `k+1`.
//!
//! The guide network's middle activation is trained (elsewhere) to sit near
//! the class semantic vector, which is what makes the attention
//! "semantics-guided" while still requiring nothing but pixels at test time.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{col_broadcast_mul, matmul, outer, softmax, tanh_map, Matrix, Vector};

/// Shape parameters for the attention stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SgaConfig {
    /// Dimension of one region feature vector.
    pub p: usize,
    /// Number of regions per image.
    pub m: usize,
    /// Dimension of class semantic vectors.
    pub q: usize,
    /// Latent dimension the visual and guide paths are matched in.
    pub d: usize,
    /// Number of stacked attention layers. Zero is legal and means the
    /// regions pass through untouched.
    pub k_layers: usize,
}

impl SgaConfig {
    /// Config with the default latent size and a two-layer stack.
    pub fn new(p: usize, m: usize, q: usize) -> Self {
        SgaConfig {
            p,
            m,
            q,
            d: 128,
            k_layers: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("p", self.p), ("m", self.m), ("q", self.q), ("d", self.d)] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!(
                    "attention config: {name} must be positive"
                )));
            }
        }
        Ok(())
    }
}

/// Weights of a single attention layer.
///
/// The same struct doubles as the gradient accumulator since gradients have
/// exactly the shapes of the weights they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct SgaLayerParams {
    /// Region embedding, `d x p`.
    pub w_ia: Matrix,
    /// First guide step, `q x p`.
    pub w_gs: Matrix,
    /// Second guide step, `d x q`.
    pub w_ga: Matrix,
    /// Attention projection, one score weight per latent coordinate.
    pub w_p: Vector,
    /// Attention score bias, shared by all regions.
    pub b_p: f64,
}

impl SgaLayerParams {
    /// Weight matrices start Glorot-uniform; the score projection `w_p`
    /// starts at zero so a fresh layer applies exactly uniform attention.
    /// Training then turns attention on in whichever direction lowers the
    /// loss, instead of inheriting an arbitrary preference from the random
    /// draw (which can settle into amplifying the *least* informative
    /// regions and stay there).
    pub fn init(cfg: &SgaConfig, rng: &mut ChaCha8Rng) -> Self {
        SgaLayerParams {
            w_ia: rng::glorot_matrix(rng, cfg.d, cfg.p),
            w_gs: rng::glorot_matrix(rng, cfg.q, cfg.p),
            w_ga: rng::glorot_matrix(rng, cfg.d, cfg.q),
            w_p: Vector::zeros(cfg.d),
            b_p: 0.0,
        }
    }

    pub fn zeros(cfg: &SgaConfig) -> Self {
        SgaLayerParams {
            w_ia: Matrix::zeros(cfg.d, cfg.p),
            w_gs: Matrix::zeros(cfg.q, cfg.p),
            w_ga: Matrix::zeros(cfg.d, cfg.q),
            w_p: Vector::zeros(cfg.d),
            b_p: 0.0,
        }
    }

    pub fn validate(&self, cfg: &SgaConfig) -> Result<()> {
        let checks = [
            ("w_ia", self.w_ia.shape(), (cfg.d, cfg.p)),
            ("w_gs", self.w_gs.shape(), (cfg.q, cfg.p)),
            ("w_ga", self.w_ga.shape(), (cfg.d, cfg.q)),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::shape(
                    format!("attention layer weight {name}"),
                    format!("{}x{}", got.0, got.1),
                    format!("{}x{}", want.0, want.1),
                ));
            }
        }
        if self.w_p.len() != cfg.d {
            return Err(Error::shape(
                "attention layer weight w_p",
                format!("{}", self.w_p.len()),
                format!("{}", cfg.d),
            ));
        }
        Ok(())
    }

    /// Number of scalars in one layer.
    pub fn flat_len(cfg: &SgaConfig) -> usize {
        cfg.d * cfg.p + cfg.q * cfg.p + cfg.d * cfg.q + cfg.d + 1
    }

    /// Appends all scalars in canonical order (w_ia, w_gs, w_ga, w_p, b_p).
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.w_ia.data());
        out.extend_from_slice(self.w_gs.data());
        out.extend_from_slice(self.w_ga.data());
        out.extend_from_slice(self.w_p.data());
        out.push(self.b_p);
    }

    /// Reads scalars back in the `write_flat` order.
    pub fn read_flat(cfg: &SgaConfig, src: &mut impl Iterator<Item = f64>) -> Result<Self> {
        let take = |src: &mut dyn Iterator<Item = f64>, n: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = src.take(n).collect();
            if v.len() != n {
                return Err(Error::InvalidArgument(
                    "flat parameter buffer too short for attention layer".to_string(),
                ));
            }
            Ok(v)
        };
        Ok(SgaLayerParams {
            w_ia: Matrix::from_vec(cfg.d, cfg.p, take(src, cfg.d * cfg.p)?)?,
            w_gs: Matrix::from_vec(cfg.q, cfg.p, take(src, cfg.q * cfg.p)?)?,
            w_ga: Matrix::from_vec(cfg.d, cfg.q, take(src, cfg.d * cfg.q)?)?,
            w_p: Vector::from_vec(take(src, cfg.d)?),
            b_p: take(src, 1)?[0],
        })
    }
}

/// Everything one layer computed on the way forward, kept for backprop.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Layer input, `p x m`.
    pub input: Matrix,
    /// Column mean of the input.
    pub fused: Vector,
    /// Pre-activation of the first guide step, `q`.
    pub a1: Vector,
    /// relu(a1); the piece pulled toward the class semantic during training.
    pub mid: Vector,
    /// Pre-activation of the second guide step, `d`.
    pub a2: Vector,
    /// relu(a2); the guide vector in latent space.
    pub latent: Vector,
    /// Pre-activation of the region embedding, `d x m`.
    pub zf: Matrix,
    /// relu(zf); regions in latent space.
    pub femb: Matrix,
    /// tanh of the gated combination, `d x m`.
    pub h: Matrix,
    /// Attention weights, one per region, summing to one.
    pub probs: Vector,
    /// Refined regions, `p x m`.
    pub output: Matrix,
}

/// Forward pass of the whole stack.
#[derive(Debug, Clone)]
pub struct SgaTrace {
    pub layers: Vec<LayerTrace>,
    /// Output of the last layer (or the raw input for an empty stack).
    pub output: Matrix,
    /// Column mean of `output`; the image representation downstream code
    /// matches against embedded class semantics.
    pub fused: Vector,
}

impl SgaTrace {
    /// Attention weights of every layer, outermost first.
    pub fn attention(&self) -> Vec<&Vector> {
        self.layers.iter().map(|l| &l.probs).collect()
    }
}

/// Column mean of the region matrix: the unweighted global image vector.
pub fn fuse_regions(regions: &Matrix) -> Vector {
    assert!(regions.cols() > 0, "cannot fuse zero regions");
    let mut out = Vector::zeros(regions.rows());
    for r in 0..regions.rows() {
        let mut acc = 0.0;
        for c in 0..regions.cols() {
            acc += regions.get(r, c);
        }
        out.set(r, acc / regions.cols() as f64);
    }
    out
}

/// Region features lifted into the latent space: relu(w_ia * regions).
pub fn local_embed(params: &SgaLayerParams, regions: &Matrix) -> Result<Matrix> {
    Ok(matmul(&params.w_ia, regions)?.relu())
}

/// The two-step guide path evaluated on the fused visual vector.
pub struct GuidePath {
    pub a1: Vector,
    pub mid: Vector,
    pub a2: Vector,
    pub latent: Vector,
}

pub fn semantic_guide(params: &SgaLayerParams, fused: &Vector) -> Result<GuidePath> {
    let a1 = params.w_gs.mul_vec(fused)?;
    let mid = a1.relu();
    let a2 = params.w_ga.mul_vec(&mid)?;
    let latent = a2.relu();
    Ok(GuidePath {
        a1,
        mid,
        a2,
        latent,
    })
}

/// Attention weights over regions.
///
/// Gates each embedded region by the guide vector, squashes with tanh,
/// projects to one score per region and softmaxes. Returns the tanh
/// activations (needed for backprop) alongside the weights.
pub fn attention_probs(
    params: &SgaLayerParams,
    femb: &Matrix,
    latent: &Vector,
) -> Result<(Matrix, Vector)> {
    let gated = col_broadcast_mul(femb, latent)?;
    let h = tanh_map(&gated);
    let mut scores = h.tr_mul_vec(&params.w_p)?;
    for i in 0..scores.len() {
        scores.set(i, scores.get(i) + params.b_p);
    }
    Ok((h, softmax(&scores)))
}

/// Rescales region `i` by `1 + probs[i]`.
///
/// The additive one keeps every region alive; attention emphasizes rather
/// than selects, which stabilizes the stacked refinement.
pub fn refine_regions(regions: &Matrix, probs: &Vector) -> Matrix {
    assert_eq!(
        regions.cols(),
        probs.len(),
        "one attention weight per region"
    );
    let mut out = regions.clone();
    for c in 0..out.cols() {
        let s = 1.0 + probs.get(c);
        for r in 0..out.rows() {
            out.set(r, c, out.get(r, c) * s);
        }
    }
    out
}

/// Squared distance between the guide middle activation and a class
/// semantic vector.
pub fn guide_loss(mid: &Vector, semantic: &Vector) -> Result<f64> {
    Ok(mid.sub(semantic)?.norm_sq())
}

/// Gradient of [`guide_loss`] with respect to `mid`.
pub fn guide_loss_grad(mid: &Vector, semantic: &Vector) -> Result<Vector> {
    Ok(mid.sub(semantic)?.scale(2.0))
}

fn check_input(cfg: &SgaConfig, regions: &Matrix) -> Result<()> {
    if regions.shape() != (cfg.p, cfg.m) {
        return Err(Error::shape(
            "attention input regions",
            regions.shape_string(),
            format!("{}x{}", cfg.p, cfg.m),
        ));
    }
    Ok(())
}

fn layer_forward(params: &SgaLayerParams, input: &Matrix) -> Result<LayerTrace> {
    let fused = fuse_regions(input);
    let guide = semantic_guide(params, &fused)?;
    let zf = matmul(&params.w_ia, input)?;
    let femb = zf.relu();
    let (h, probs) = attention_probs(params, &femb, &guide.latent)?;
    let output = refine_regions(input, &probs);
    Ok(LayerTrace {
        input: input.clone(),
        fused,
        a1: guide.a1,
        mid: guide.mid,
        a2: guide.a2,
        latent: guide.latent,
        zf,
        femb,
        h,
        probs,
        output,
    })
}

/// Runs the full stack, keeping every intermediate for backprop.
pub fn sga_forward_trace(
    cfg: &SgaConfig,
    layers: &[SgaLayerParams],
    regions: &Matrix,
) -> Result<SgaTrace> {
    cfg.validate()?;
    check_input(cfg, regions)?;
    if layers.len() != cfg.k_layers {
        return Err(Error::InvalidArgument(format!(
            "attention stack has {} layers, config says {}",
            layers.len(),
            cfg.k_layers
        )));
    }
    for l in layers {
        l.validate(cfg)?;
    }
    let mut traces = Vec::with_capacity(layers.len());
    let mut current = regions.clone();
    for params in layers {
        let trace = layer_forward(params, &current)?;
        current = trace.output.clone();
        traces.push(trace);
    }
    let fused = fuse_regions(&current);
    Ok(SgaTrace {
        layers: traces,
        output: current,
        fused,
    })
}

/// Forward pass when only the outputs matter (evaluation, inference).
pub fn sga_forward(
    cfg: &SgaConfig,
    layers: &[SgaLayerParams],
    regions: &Matrix,
) -> Result<(Matrix, Vector, Vec<Vector>)> {
    let trace = sga_forward_trace(cfg, layers, regions)?;
    let probs = trace.layers.iter().map(|l| l.probs.clone()).collect();
    Ok((trace.output, trace.fused, probs))
}

/// Backward through one layer.
///
/// `grad_output` is dLoss/d(layer output); `grad_mid_extra` is the loss
/// gradient that attaches directly to the guide middle activation (the pull
/// toward the class semantic). Returns the parameter gradients and
/// dLoss/d(layer input).
fn layer_backward(
    params: &SgaLayerParams,
    trace: &LayerTrace,
    grad_output: &Matrix,
    grad_mid_extra: Option<&Vector>,
) -> Result<(SgaLayerParams, Matrix)> {
    let (p, m) = trace.input.shape();
    let d = trace.latent.len();
    let q = trace.mid.len();

    // refine: output[:,i] = (1 + probs[i]) * input[:,i]
    let mut dprobs = Vector::zeros(m);
    let mut dinput = Matrix::zeros(p, m);
    for i in 0..m {
        let scale = 1.0 + trace.probs.get(i);
        let mut acc = 0.0;
        for r in 0..p {
            let g = grad_output.get(r, i);
            acc += g * trace.input.get(r, i);
            dinput.set(r, i, scale * g);
        }
        dprobs.set(i, acc);
    }

    // softmax: dz_j = p_j (dp_j - sum_i dp_i p_i)
    let dot = dprobs.dot(&trace.probs)?;
    let mut dz = Vector::zeros(m);
    for j in 0..m {
        dz.set(j, trace.probs.get(j) * (dprobs.get(j) - dot));
    }

    // scores z_i = w_p . h[:,i] + b_p
    let dw_p = trace.h.mul_vec(&dz)?;
    let db_p: f64 = dz.data().iter().sum();

    // h = tanh(femb gated by latent); split the gradient between the
    // region embedding and the guide vector.
    let mut dlatent = Vector::zeros(d);
    let mut dzf = Matrix::zeros(d, m);
    for r in 0..d {
        let wr = params.w_p.get(r);
        let lr = trace.latent.get(r);
        for i in 0..m {
            let hv = trace.h.get(r, i);
            let dpre = wr * dz.get(i) * (1.0 - hv * hv);
            dlatent.set(r, dlatent.get(r) + dpre * trace.femb.get(r, i));
            if trace.zf.get(r, i) > 0.0 {
                dzf.set(r, i, dpre * lr);
            }
        }
    }

    // zf = w_ia * input
    let dw_ia = matmul(&dzf, &trace.input.transpose())?;
    let back_region = matmul(&params.w_ia.transpose(), &dzf)?;
    for r in 0..p {
        for i in 0..m {
            dinput.add_at(r, i, back_region.get(r, i));
        }
    }

    // guide path: latent = relu(a2), a2 = w_ga * mid
    let mut da2 = Vector::zeros(d);
    for r in 0..d {
        if trace.a2.get(r) > 0.0 {
            da2.set(r, dlatent.get(r));
        }
    }
    let dw_ga = outer(&da2, &trace.mid);
    let mut dmid = params.w_ga.tr_mul_vec(&da2)?;
    if let Some(extra) = grad_mid_extra {
        if extra.len() != q {
            return Err(Error::shape(
                "guide middle gradient",
                format!("{}", extra.len()),
                format!("{}", q),
            ));
        }
        dmid.add_assign(extra);
    }

    // mid = relu(a1), a1 = w_gs * fused
    let mut da1 = Vector::zeros(q);
    for r in 0..q {
        if trace.a1.get(r) > 0.0 {
            da1.set(r, dmid.get(r));
        }
    }
    let dw_gs = outer(&da1, &trace.fused);
    let dfused = params.w_gs.tr_mul_vec(&da1)?;

    // fused is the column mean of the input.
    let inv_m = 1.0 / m as f64;
    for i in 0..m {
        for r in 0..p {
            dinput.add_at(r, i, dfused.get(r) * inv_m);
        }
    }

    Ok((
        SgaLayerParams {
            w_ia: dw_ia,
            w_gs: dw_gs,
            w_ga: dw_ga,
            w_p: dw_p,
            b_p: db_p,
        },
        dinput,
    ))
}

/// Backward through the whole stack.
///
/// `grad_fused` is dLoss/d(final fused vector) — everything downstream of
/// the attention stack reaches it only through that vector. `grad_mids`
/// holds one dLoss/d(mid) per layer for the guide pull; pass zero vectors
/// for layers without one. Returns per-layer parameter gradients
/// (outermost first) and dLoss/d(raw region input).
pub fn sga_backward(
    cfg: &SgaConfig,
    layers: &[SgaLayerParams],
    trace: &SgaTrace,
    grad_fused: &Vector,
    grad_mids: &[Vector],
) -> Result<(Vec<SgaLayerParams>, Matrix)> {
    if grad_mids.len() != layers.len() {
        return Err(Error::InvalidArgument(format!(
            "got {} guide gradients for {} layers",
            grad_mids.len(),
            layers.len()
        )));
    }
    if grad_fused.len() != cfg.p {
        return Err(Error::shape(
            "fused-vector gradient",
            format!("{}", grad_fused.len()),
            format!("{}", cfg.p),
        ));
    }
    // Final fused vector is the column mean of the last output.
    let inv_m = 1.0 / cfg.m as f64;
    let mut grad_current = Matrix::zeros(cfg.p, cfg.m);
    for i in 0..cfg.m {
        for r in 0..cfg.p {
            grad_current.set(r, i, grad_fused.get(r) * inv_m);
        }
    }
    let mut grads = vec![SgaLayerParams::zeros(cfg); layers.len()];
    for k in (0..layers.len()).rev() {
        let (layer_grads, grad_input) = layer_backward(
            &layers[k],
            &trace.layers[k],
            &grad_current,
            Some(&grad_mids[k]),
        )?;
        grads[k] = layer_grads;
        grad_current = grad_input;
    }
    Ok((grads, grad_current))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_grad;
    use proptest::prelude::*;

    fn small_cfg(k: usize) -> SgaConfig {
        SgaConfig {
            p: 5,
            m: 3,
            q: 4,
            d: 4,
            k_layers: k,
        }
    }

    fn random_stack(cfg: &SgaConfig, seed: u64) -> Vec<SgaLayerParams> {
        let mut rng = rng::stream(seed, rng::streams::MODEL_INIT);
        (0..cfg.k_layers)
            .map(|_| SgaLayerParams::init(cfg, &mut rng))
            .collect()
    }

    #[test]
    fn fuse_regions_is_column_mean() {
        let m = Matrix::from_rows(&[&[1.0, 3.0], &[2.0, 4.0]]).unwrap();
        let f = fuse_regions(&m);
        assert_eq!(f.data(), &[2.0, 3.0]);
    }

    #[test]
    fn attention_is_a_distribution() {
        let cfg = small_cfg(1);
        for seed in 0..50 {
            let layers = random_stack(&cfg, seed);
            let mut rng = rng::stream(seed, 30);
            let x = rng::uniform_matrix(&mut rng, cfg.p, cfg.m, 2.0);
            let (_, _, probs) = sga_forward(&cfg, &layers, &x).unwrap();
            let sum: f64 = probs[0].data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-10, "sum {sum}");
            for &w in probs[0].data() {
                assert!(w > 0.0 && w < 1.0, "weight {w}");
            }
        }
    }

    #[test]
    fn zero_guide_weights_give_uniform_attention() {
        // With w_ga = 0 the guide vector is zero, the gate kills every
        // score, and softmax falls back to uniform.
        let cfg = small_cfg(1);
        let mut layers = random_stack(&cfg, 3);
        layers[0].w_ga = Matrix::zeros(cfg.d, cfg.q);
        let mut rng = rng::stream(3, 31);
        let x = rng::uniform_matrix(&mut rng, cfg.p, cfg.m, 2.0);
        let (_, _, probs) = sga_forward(&cfg, &layers, &x).unwrap();
        for &w in probs[0].data() {
            assert!((w - 1.0 / cfg.m as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn refine_scales_columns() {
        let x = Matrix::from_rows(&[&[1.0, 10.0], &[2.0, 20.0]]).unwrap();
        let probs = Vector::from_slice(&[0.25, 0.75]);
        let out = refine_regions(&x, &probs);
        assert_eq!(out.data(), &[1.25, 17.5, 2.5, 35.0]);
        // Every column only grows, by strictly less than a factor of two.
        for c in 0..2 {
            let before = x.col(c).norm();
            let after = out.col(c).norm();
            assert!(after >= before && after < 2.0 * before);
        }
    }

    #[test]
    fn empty_stack_passes_input_through() {
        let cfg = small_cfg(0);
        let mut rng = rng::stream(9, 32);
        let x = rng::uniform_matrix(&mut rng, cfg.p, cfg.m, 1.0);
        let trace = sga_forward_trace(&cfg, &[], &x).unwrap();
        assert_eq!(trace.output, x);
        assert_eq!(trace.fused, fuse_regions(&x));
        let (grads, grad_in) =
            sga_backward(&cfg, &[], &trace, &Vector::zeros(cfg.p), &[]).unwrap();
        assert!(grads.is_empty());
        assert_eq!(grad_in, Matrix::zeros(cfg.p, cfg.m));
    }

    #[test]
    fn guide_loss_basics() {
        let a = Vector::from_slice(&[1.0, 2.0]);
        let b = Vector::from_slice(&[1.0, 2.0]);
        assert_eq!(guide_loss(&a, &b).unwrap(), 0.0);
        let c = Vector::from_slice(&[0.0, 0.0]);
        assert_eq!(guide_loss(&a, &c).unwrap(), 5.0);
        let g = guide_loss_grad(&a, &c).unwrap();
        assert_eq!(g.data(), &[2.0, 4.0]);
        // Finite-difference check of the gradient.
        let s = Vector::from_slice(&[0.3, -0.7]);
        let fd = finite_diff_grad(
            |x| guide_loss(&Vector::from_slice(x), &s).unwrap(),
            a.data(),
            1e-6,
        )
        .unwrap();
        let an = guide_loss_grad(&a, &s).unwrap();
        for (f, g) in fd.iter().zip(an.data()) {
            assert!((f - g).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_validation_errors() {
        let cfg = small_cfg(1);
        let layers = random_stack(&cfg, 1);
        let bad = Matrix::zeros(cfg.p + 1, cfg.m);
        assert!(sga_forward(&cfg, &layers, &bad).is_err());
        let wrong_count = sga_forward_trace(&cfg, &[], &Matrix::zeros(cfg.p, cfg.m));
        assert!(wrong_count.is_err());
        let x = Matrix::zeros(cfg.p, cfg.m);
        let trace = sga_forward_trace(&cfg, &layers, &x).unwrap();
        // Wrong number of guide gradients.
        assert!(sga_backward(&cfg, &layers, &trace, &Vector::zeros(cfg.p), &[]).is_err());
    }

    /// Permuting the input regions permutes attention and outputs the same
    /// way and leaves the fused vector unchanged.
    fn check_permutation_equivariance(seed: u64) {
        let cfg = small_cfg(2);
        let layers = random_stack(&cfg, seed);
        let mut rng = rng::stream(seed, 33);
        let x = rng::uniform_matrix(&mut rng, cfg.p, cfg.m, 2.0);
        let perm = rng::shuffled_indices(&mut rng, cfg.m);
        let mut xp = Matrix::zeros(cfg.p, cfg.m);
        for (new_c, &old_c) in perm.iter().enumerate() {
            let col = x.col(old_c);
            xp.set_col(new_c, &col);
        }
        let a = sga_forward_trace(&cfg, &layers, &x).unwrap();
        let b = sga_forward_trace(&cfg, &layers, &xp).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            for (new_c, &old_c) in perm.iter().enumerate() {
                assert!((la.probs.get(old_c) - lb.probs.get(new_c)).abs() < 1e-12);
            }
        }
        for (new_c, &old_c) in perm.iter().enumerate() {
            for r in 0..cfg.p {
                assert!((a.output.get(r, old_c) - b.output.get(r, new_c)).abs() < 1e-12);
            }
        }
        for r in 0..cfg.p {
            assert!((a.fused.get(r) - b.fused.get(r)).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_equivariance() {
        for seed in 0..20 {
            check_permutation_equivariance(seed);
        }
    }

    /// Flattens a stack, runs a scalar loss through forward, and compares
    /// the analytic backward against central differences.
    fn grad_check_stack(k: usize, seed: u64) {
        let cfg = small_cfg(k);
        let layers = random_stack(&cfg, seed);
        let mut rng = rng::stream(seed, 34);
        let x = rng::uniform_matrix(&mut rng, cfg.p, cfg.m, 1.5);
        // Arbitrary fixed covectors make the loss sensitive to every output
        // coordinate; the guide targets exercise the mid-path gradient.
        let c = rng::uniform_vector(&mut rng, cfg.p, 1.0);
        let targets: Vec<Vector> = (0..k)
            .map(|_| rng::uniform_vector(&mut rng, cfg.q, 1.0))
            .collect();

        let loss = |flat: &[f64]| -> f64 {
            let mut it = flat.iter().copied();
            let layers: Vec<SgaLayerParams> = (0..k)
                .map(|_| SgaLayerParams::read_flat(&cfg, &mut it).unwrap())
                .collect();
            let trace = sga_forward_trace(&cfg, &layers, &x).unwrap();
            let mut total = trace.fused.dot(&c).unwrap();
            for (lt, t) in trace.layers.iter().zip(&targets) {
                total += guide_loss(&lt.mid, t).unwrap();
            }
            total
        };

        let mut flat = Vec::new();
        for l in &layers {
            l.write_flat(&mut flat);
        }

        let trace = sga_forward_trace(&cfg, &layers, &x).unwrap();
        let grad_mids: Vec<Vector> = trace
            .layers
            .iter()
            .zip(&targets)
            .map(|(lt, t)| guide_loss_grad(&lt.mid, t).unwrap())
            .collect();
        let (grads, _) = sga_backward(&cfg, &layers, &trace, &c, &grad_mids).unwrap();
        let mut analytic = Vec::new();
        for g in &grads {
            g.write_flat(&mut analytic);
        }

        let numeric = finite_diff_grad(loss, &flat, 1e-6).unwrap();
        assert_eq!(analytic.len(), numeric.len());
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
            assert!(rel < 1e-5, "param {i}: analytic {a} numeric {n} rel {rel}");
        }
    }

    #[test]
    fn gradients_match_finite_differences_one_layer() {
        grad_check_stack(1, 11);
    }

    #[test]
    fn gradients_match_finite_differences_two_layers() {
        grad_check_stack(2, 12);
    }

    #[test]
    fn gradients_match_finite_differences_three_layers() {
        grad_check_stack(3, 13);
    }

    #[test]
    fn dead_guide_path_gets_zero_gradient() {
        // Zero w_ga makes a2 = 0 everywhere; relu's subgradient at zero is
        // zero here, so nothing flows back into the first guide step from
        // the attention output.
        let cfg = small_cfg(1);
        let mut layers = random_stack(&cfg, 21);
        layers[0].w_ga = Matrix::zeros(cfg.d, cfg.q);
        let mut rng = rng::stream(21, 35);
        let x = rng::uniform_matrix(&mut rng, cfg.p, cfg.m, 1.0);
        let c = rng::uniform_vector(&mut rng, cfg.p, 1.0);
        let trace = sga_forward_trace(&cfg, &layers, &x).unwrap();
        let (grads, _) =
            sga_backward(&cfg, &layers, &trace, &c, &[Vector::zeros(cfg.q)]).unwrap();
        assert!(grads[0].w_gs.data().iter().all(|&g| g == 0.0));
        assert!(grads[0].w_ga.data().iter().all(|&g| g == 0.0));
        // The region-embedding path also dies because the gate is zero...
        assert!(grads[0].w_ia.data().iter().all(|&g| g == 0.0));
        // ...but attention still has a (flat) score path.
        assert!(grads[0].w_p.data().iter().all(|&g| g.abs() < 1e-12));
    }

    #[test]
    fn flat_roundtrip_preserves_params() {
        let cfg = small_cfg(2);
        let layers = random_stack(&cfg, 5);
        let mut flat = Vec::new();
        for l in &layers {
            l.write_flat(&mut flat);
        }
        assert_eq!(flat.len(), 2 * SgaLayerParams::flat_len(&cfg));
        let mut it = flat.iter().copied();
        let back: Vec<SgaLayerParams> = (0..2)
            .map(|_| SgaLayerParams::read_flat(&cfg, &mut it).unwrap())
            .collect();
        assert_eq!(layers, back);
        assert!(it.next().is_none());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn attention_distribution_property(seed in 0u64..10_000) {
            let cfg = small_cfg(2);
            let layers = random_stack(&cfg, seed);
            let mut rng = rng::stream(seed, 36);
            let x = rng::uniform_matrix(&mut rng, cfg.p, cfg.m, 3.0);
            let (_, _, probs) = sga_forward(&cfg, &layers, &x).unwrap();
            for layer_probs in probs {
                let sum: f64 = layer_probs.data().iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-10);
                for &w in layer_probs.data() {
                    prop_assert!(w > 0.0 && w < 1.0);
                }
            }
        }

        #[test]
        fn permutation_equivariance_property(seed in 0u64..10_000) {
            check_permutation_equivariance(seed);
        }
    }
}
