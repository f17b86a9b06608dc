//! Joint training of the attention stack and matcher.
//!
//! Plain RMSProp over mini-batches, a seeded validation holdout, and early
//! stopping on validation accuracy. Region features themselves are fixed
//! inputs — only the attention and matcher weights move.

use crate::error::{Error, Result};
use crate::matcher::{self, ClassSemanticTable, LossBreakdown};
use crate::model::{
    batch_backward, batch_forward, block_spans, LossWeights, TrainExample, ZslModel,
};
use crate::rng;
use crate::sga::SgaConfig;
use crate::tensor::finite_diff_grad;

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// RMSProp moving-average factor for squared gradients.
    pub decay: f64,
    /// RMSProp denominator fudge term.
    pub eps: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    /// Consecutive validation checks without improvement before stopping.
    pub patience: usize,
    /// Fraction of the training images held out for validation. Zero
    /// disables validation and early stopping.
    pub val_fraction: f64,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            decay: 0.9,
            eps: 1e-8,
            batch_size: 512,
            max_iterations: 3000,
            patience: 30,
            val_fraction: 0.1,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be a finite non-negative number, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.decay) {
            return Err(Error::InvalidArgument(format!(
                "decay must lie in [0, 1), got {}",
                self.decay
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument(
                "max iterations must be positive".into(),
            ));
        }
        if self.patience == 0 {
            return Err(Error::InvalidArgument("patience must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidArgument(format!(
                "validation fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

/// One RMSProp update over a named parameter block.
///
/// `state` carries the running mean of squared gradients and must persist
/// across calls. Non-finite gradients abort with an error that names the
/// offending block.
pub fn rmsprop_step(
    label: &str,
    params: &mut [f64],
    grads: &[f64],
    state: &mut [f64],
    learning_rate: f64,
    decay: f64,
    eps: f64,
) -> Result<()> {
    assert_eq!(params.len(), grads.len(), "gradient/parameter length");
    assert_eq!(params.len(), state.len(), "state/parameter length");
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(state.iter_mut()) {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient for {label}")));
        }
        *v = decay * *v + (1.0 - decay) * g * g;
        *p -= learning_rate * g / (v.sqrt() + eps);
    }
    Ok(())
}

/// Why training stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxIterations,
    EarlyStopping,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::MaxIterations => "max_iterations",
            StopReason::EarlyStopping => "early_stopping",
        }
    }
}

/// Losses and validation accuracy after one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    /// 1-based iteration counter.
    pub iteration: usize,
    pub loss: LossBreakdown,
    /// Absent when validation is disabled.
    pub val_accuracy: Option<f64>,
}

/// Everything a caller might want to know about a finished run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub best_val_accuracy: Option<f64>,
    pub final_loss: LossBreakdown,
    pub history: Vec<IterationRecord>,
    pub train_size: usize,
    pub val_size: usize,
}

/// Fraction of examples whose true class wins the seen-class softmax.
/// Ties resolve to the lowest table index, which cannot be the argmax
/// winner unless probabilities are exactly equal.
fn seen_accuracy(
    model: &ZslModel,
    table: &ClassSemanticTable,
    examples: &[&TrainExample],
) -> Result<f64> {
    let embedded = matcher::embed_all(&model.matcher, table)?;
    let mut correct = 0usize;
    for ex in examples {
        let fused = model.embed_image(&ex.regions)?;
        let probs = matcher::class_probs(&embedded, &fused)?;
        let mut best = 0usize;
        for c in 1..probs.len() {
            if probs.get(c) > probs.get(best) {
                best = c;
            }
        }
        if best == ex.class_index {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Trains a fresh model on the given examples.
///
/// A seeded `val_fraction` of the examples is held out; after every
/// optimizer step the holdout accuracy is measured and the best-scoring
/// model is kept. Training stops after `patience` consecutive checks
/// without a strict improvement, or at `max_iterations`. Returns the best
/// model seen (the final one when validation is disabled) and a report.
/// `on_iteration` fires once per step, in order.
pub fn train(
    model_cfg: SgaConfig,
    table: &ClassSemanticTable,
    examples: &[TrainExample],
    cfg: &TrainConfig,
    mut on_iteration: impl FnMut(&IterationRecord),
) -> Result<(ZslModel, TrainReport)> {
    cfg.validate()?;
    model_cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::InvalidArgument("no training examples".to_string()));
    }
    for ex in examples {
        if ex.class_index >= table.len() {
            return Err(Error::InvalidArgument(format!(
                "training example references class index {} outside table of {}",
                ex.class_index,
                table.len()
            )));
        }
    }

    // Seeded holdout split.
    let mut holdout_rng = rng::stream(cfg.seed, rng::streams::HOLDOUT);
    let order = rng::shuffled_indices(&mut holdout_rng, examples.len());
    let val_n = (cfg.val_fraction * examples.len() as f64).round() as usize;
    if val_n >= examples.len() {
        return Err(Error::InvalidArgument(format!(
            "validation fraction {} leaves no training examples",
            cfg.val_fraction
        )));
    }
    let val_set: Vec<&TrainExample> = order[..val_n].iter().map(|&i| &examples[i]).collect();
    let train_set: Vec<&TrainExample> = order[val_n..].iter().map(|&i| &examples[i]).collect();

    let mut model = ZslModel::init(model_cfg, cfg.seed)?;
    let spans = block_spans(&model_cfg);
    let mut opt_state = vec![0.0; ZslModel::flat_len(&model_cfg)];

    let effective_batch = cfg.batch_size.min(train_set.len());
    let mut shuffle_rng = rng::stream(cfg.seed, rng::streams::SHUFFLE);
    let mut epoch_order = rng::shuffled_indices(&mut shuffle_rng, train_set.len());
    let mut cursor = 0usize;

    let mut best: Option<(f64, ZslModel)> = None;
    let mut strikes = 0usize;
    let mut history = Vec::new();
    let mut stop_reason = StopReason::MaxIterations;

    for iteration in 1..=cfg.max_iterations {
        if cursor + effective_batch > epoch_order.len() {
            epoch_order = rng::shuffled_indices(&mut shuffle_rng, train_set.len());
            cursor = 0;
        }
        let batch: Vec<&TrainExample> = epoch_order[cursor..cursor + effective_batch]
            .iter()
            .map(|&i| train_set[i])
            .collect();
        cursor += effective_batch;

        let (loss, trace) = batch_forward(&model, table, &batch, &cfg.weights)?;
        let grads = batch_backward(&model, table, &batch, &trace, &cfg.weights)?;

        let mut flat = model.to_flat();
        let grads_flat = grads.to_flat();
        for (name, range) in &spans {
            rmsprop_step(
                name,
                &mut flat[range.clone()],
                &grads_flat[range.clone()],
                &mut opt_state[range.clone()],
                cfg.learning_rate,
                cfg.decay,
                cfg.eps,
            )?;
        }
        model = ZslModel::from_flat(model_cfg, &flat)?;

        let val_accuracy = if val_set.is_empty() {
            None
        } else {
            Some(seen_accuracy(&model, table, &val_set)?)
        };
        let record = IterationRecord {
            iteration,
            loss,
            val_accuracy,
        };
        on_iteration(&record);
        history.push(record);

        if let Some(acc) = val_accuracy {
            let improved = best.as_ref().map_or(true, |(b, _)| acc > *b);
            if improved {
                best = Some((acc, model.clone()));
                strikes = 0;
            } else {
                strikes += 1;
                if strikes >= cfg.patience {
                    stop_reason = StopReason::EarlyStopping;
                    break;
                }
            }
        }
    }

    let iterations = history.len();
    let final_loss = history.last().expect("at least one iteration ran").loss;
    let (best_val_accuracy, chosen) = match best {
        Some((acc, m)) => (Some(acc), m),
        None => (None, model),
    };
    Ok((
        chosen,
        TrainReport {
            iterations,
            stop_reason,
            best_val_accuracy,
            final_loss,
            history,
            train_size: train_set.len(),
            val_size: val_n,
        },
    ))
}

/// Settings for the analytic-vs-numeric gradient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub p: usize,
    pub m: usize,
    pub q: usize,
    pub d: usize,
    pub k_layers: usize,
    /// Classes in the random semantic table.
    pub classes: usize,
    /// Examples per random batch.
    pub batch: usize,
    pub trials: usize,
    /// Maximum allowed relative error per coordinate.
    pub tolerance: f64,
    /// Central-difference step.
    pub eps: f64,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            p: 8,
            m: 4,
            q: 5,
            d: 6,
            k_layers: 2,
            classes: 4,
            batch: 6,
            trials: 3,
            tolerance: 1e-5,
            eps: 1e-6,
            seed: 0,
            weights: LossWeights::default(),
        }
    }
}

/// Outcome of one random problem instance.
#[derive(Debug, Clone)]
pub struct GradCheckTrial {
    pub trial: usize,
    pub worst_rel: f64,
    /// Parameter block holding the worst coordinate.
    pub worst_block: String,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub trials: Vec<GradCheckTrial>,
    pub passed: bool,
    pub worst_rel: f64,
    pub worst_block: String,
    pub params_per_trial: usize,
}

/// Compares the analytic batch gradient against central differences on
/// random problems. Relative error per coordinate is
/// `|a - n| / max(|a|, |n|, 1e-3)`; a trial passes when every coordinate
/// stays under the tolerance.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.trials == 0 {
        return Err(Error::InvalidArgument("need at least one trial".into()));
    }
    if !(cfg.tolerance > 0.0) || !(cfg.eps > 0.0) {
        return Err(Error::InvalidArgument(
            "tolerance and eps must be positive".into(),
        ));
    }
    if cfg.classes == 0 || cfg.batch == 0 {
        return Err(Error::InvalidArgument(
            "gradient check needs classes and a batch".into(),
        ));
    }
    let model_cfg = SgaConfig {
        p: cfg.p,
        m: cfg.m,
        q: cfg.q,
        d: cfg.d,
        k_layers: cfg.k_layers,
    };
    model_cfg.validate()?;
    let spans = block_spans(&model_cfg);

    let mut trials = Vec::with_capacity(cfg.trials);
    let mut worst_rel = 0.0f64;
    let mut worst_block = String::from("none");
    for t in 0..cfg.trials {
        let trial_seed = cfg.seed.wrapping_add(t as u64);
        let mut rng = rng::stream(trial_seed, rng::streams::GRAD_CHECK);
        // Jitter every parameter away from its init so the comparison
        // happens at a generic point — fresh models hold structured values
        // (zero score projections, zero biases) where some terms vanish.
        let mut flat = ZslModel::init(model_cfg, trial_seed)?.to_flat();
        let jitter = rng::uniform_vector(&mut rng, flat.len(), 0.25);
        for (x, j) in flat.iter_mut().zip(jitter.data()) {
            *x += j;
        }
        let model = ZslModel::from_flat(model_cfg, &flat)?;
        let table = ClassSemanticTable::new(
            (0..cfg.classes as u32)
                .map(|id| (id, rng::uniform_vector(&mut rng, cfg.q, 1.0)))
                .collect(),
        )?;
        let examples: Vec<TrainExample> = (0..cfg.batch)
            .map(|i| TrainExample {
                regions: rng::uniform_matrix(&mut rng, cfg.p, cfg.m, 1.5),
                class_index: i % cfg.classes,
            })
            .collect();
        let refs: Vec<&TrainExample> = examples.iter().collect();

        let (_, trace) = batch_forward(&model, &table, &refs, &cfg.weights)?;
        let analytic = batch_backward(&model, &table, &refs, &trace, &cfg.weights)?.to_flat();

        let weights = cfg.weights;
        let numeric = finite_diff_grad(
            |flat| {
                let m = ZslModel::from_flat(model_cfg, flat).expect("flat length fixed");
                let (loss, _) =
                    batch_forward(&m, &table, &refs, &weights).expect("forward on valid model");
                loss.total
            },
            &model.to_flat(),
            cfg.eps,
        )?;

        let mut trial_worst = 0.0f64;
        let mut trial_block = String::from("none");
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
            if rel > trial_worst {
                trial_worst = rel;
                trial_block = spans
                    .iter()
                    .find(|(_, r)| r.contains(&i))
                    .map(|(n, _)| n.clone())
                    .unwrap_or_else(|| "unknown".to_string());
            }
        }
        let passed = trial_worst < cfg.tolerance;
        if trial_worst > worst_rel {
            worst_rel = trial_worst;
            worst_block = trial_block.clone();
        }
        trials.push(GradCheckTrial {
            trial: t,
            worst_rel: trial_worst,
            worst_block: trial_block,
            passed,
        });
    }
    Ok(GradCheckReport {
        passed: trials.iter().all(|t| t.passed),
        trials,
        worst_rel,
        worst_block,
        params_per_trial: ZslModel::flat_len(&model_cfg),
    })
}
