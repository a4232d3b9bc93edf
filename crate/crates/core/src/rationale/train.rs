use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::model::{argmax, Bound, Example, RefModel};
use crate::error::{Error, Result};
use crate::gates::on_tape;
use crate::numerics::{GradMap, Optimizer, Tape, Var};

/// How the sparsity multiplier reacts to the observed selection ratio.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MultiplierRule {
    /// `mu += eta * (observed - target)`: pressure only builds while the
    /// ratio is above target and relaxes below it.
    Signed,
    /// `mu += eta * |observed - target|`.
    Symmetric,
}

/// Lagrangian state for the selection-ratio constraint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparsityController {
    pub mu: f64,
    pub target: f64,
    pub step_size: f64,
    pub transition_weight: f64,
    pub rule: MultiplierRule,
}

impl SparsityController {
    pub fn new(target: f64) -> Self {
        Self {
            mu: 0.0,
            target,
            step_size: 0.5,
            transition_weight: 0.0,
            rule: MultiplierRule::Signed,
        }
    }

    /// Projected multiplier update; `mu` never goes negative.
    pub fn update_multiplier(&mut self, observed_ratio: f64) {
        let dev = observed_ratio - self.target;
        let delta = match self.rule {
            MultiplierRule::Signed => dev,
            MultiplierRule::Symmetric => dev.abs(),
        };
        self.mu = (self.mu + self.step_size * delta).max(0.0);
    }
}

/// A differentiable per-example objective on its own tape.
pub struct LossGraph {
    pub(crate) tape: Tape,
    pub(crate) bound: Bound,
    pub(crate) total: Var,
    pub(crate) p_zero: Var,
    pub(crate) p_select: Var,
    cross_entropy: f64,
    ratio: f64,
    correct: bool,
}

impl LossGraph {
    pub fn value(&self) -> f64 {
        self.tape.scalar(self.total)
    }

    pub fn cross_entropy(&self) -> f64 {
        self.cross_entropy
    }

    /// Expected selection ratio `expected_l0 / n` of the task gates.
    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    /// Whether the sampled forward pass put the most mass on the gold label.
    pub fn correct(&self) -> bool {
        self.correct
    }

    /// Per-token `P(z = 0)` of the model's gates.
    pub fn p_zero(&self) -> &[f64] {
        self.tape.value(self.p_zero)
    }

    pub fn p_select(&self) -> &[f64] {
        self.tape.value(self.p_select)
    }

    pub fn gradient(&self) -> Result<GradMap> {
        self.tape.check()?;
        self.bound.gradients(&self.tape, self.total)
    }

    pub(crate) fn tape_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }

    /// Adds `weight * term` to the objective.
    pub(crate) fn add_weighted(&mut self, term: Var, weight: f64) -> Result<()> {
        let w = self.tape.scale(term, weight);
        self.total = self.tape.add(self.total, w);
        self.tape.check()
    }
}

/// `n` uniform draws for the gate noise.
pub fn draw_noise<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen::<f64>()).collect()
}

/// Sparsity-regularized objective with one sampled gate vector:
/// `CE + mu * |expected_l0 / n - target| + lambda_trans * transitions / n`.
pub fn ref_loss<R: Rng>(
    model: &RefModel,
    ex: &Example,
    ctrl: &SparsityController,
    rng: &mut R,
) -> Result<LossGraph> {
    let noise = draw_noise(rng, ex.len());
    ref_loss_with_noise(model, ex, ctrl, &noise)
}

/// [`ref_loss`] with explicit per-token uniform noise.
pub fn ref_loss_with_noise(
    model: &RefModel,
    ex: &Example,
    ctrl: &SparsityController,
    noise: &[f64],
) -> Result<LossGraph> {
    gated_loss(model, ex, ex.task_label, ctrl, noise)
}

pub(crate) fn gated_loss(
    model: &RefModel,
    ex: &Example,
    label: usize,
    ctrl: &SparsityController,
    noise: &[f64],
) -> Result<LossGraph> {
    let n = ex.len();
    if label >= model.classes() {
        return Err(Error::Domain {
            op: "ref_loss",
            detail: format!("label {label} outside {} classes", model.classes()),
        });
    }
    if noise.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: noise.len(),
        });
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let xs = model.embed(&mut tape, &bound, ex)?;
    let (a, b) = model.gate_shapes(&mut tape, &bound, &xs);
    let stretch = model.config().stretch;
    let p_zero = on_tape::p_zero(&mut tape, a, b, stretch);
    let p_select = tape.rsub(1.0, p_zero);
    let z = on_tape::sample(&mut tape, a, b, noise, stretch);
    let log_probs = model.encode(&mut tape, &bound, &xs, z);
    let gold = tape.slice(log_probs, label, 1);
    let ce = tape.neg(gold);

    let selected = tape.sum(p_select);
    let ratio = tape.scale(selected, 1.0 / n as f64);
    let dev = tape.shift(ratio, -ctrl.target);
    let dev = tape.abs(dev);
    let sparsity = tape.scale(dev, ctrl.mu);
    let mut total = tape.add(ce, sparsity);
    if ctrl.transition_weight != 0.0 {
        let tr = on_tape::expected_transitions(&mut tape, p_select);
        let tr = tape.scale(tr, ctrl.transition_weight / n as f64);
        total = tape.add(total, tr);
    }
    tape.check()?;
    let correct = argmax(tape.value(log_probs)) == label;
    Ok(LossGraph {
        cross_entropy: tape.scalar(ce),
        ratio: tape.scalar(ratio),
        correct,
        tape,
        bound,
        total,
        p_zero,
        p_select,
    })
}

/// Minibatch training schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: 16,
            optimizer: Optimizer::default(),
            seed,
        }
    }
}

/// Metrics averaged over one pass through the training data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Accuracy of the sampled training forward passes.
    pub accuracy: f64,
    /// Mean expected selection ratio `expected_l0 / n`.
    pub selection_ratio: f64,
    /// Multiplier at the end of the epoch.
    pub mu: f64,
    /// Mean weighted constraint term `gamma * sum D(i)`; 0 without debiasing.
    pub penalty: f64,
    /// Mean task `p_select` on tokens whose bias energy exceeds the
    /// threshold; NaN when there is no oracle or no such token.
    pub bias_selection_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingReport {
    pub fn final_selection_ratio(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.selection_ratio)
    }

    pub fn final_accuracy(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.accuracy)
    }

    pub fn loss_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("epoch,loss,accuracy,selection_ratio,mu,penalty,bias_selection_rate\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                e.epoch,
                e.loss,
                e.accuracy,
                e.selection_ratio,
                e.mu,
                e.penalty,
                e.bias_selection_rate
            ));
        }
        out
    }
}

/// What one example contributes to an optimizer step.
pub(crate) struct StepOutcome {
    pub grads: GradMap,
    pub loss: f64,
    pub ratio: f64,
    pub correct: bool,
    pub penalty: f64,
    /// Sum of task `p_select` over flagged high-bias tokens, and their count.
    pub flagged: (f64, usize),
}

impl StepOutcome {
    pub(crate) fn plain(graph: &LossGraph) -> Result<Self> {
        Ok(Self {
            grads: graph.gradient()?,
            loss: graph.value(),
            ratio: graph.ratio(),
            correct: graph.correct(),
            penalty: 0.0,
            flagged: (0.0, 0),
        })
    }
}

/// Stateless 64-bit mixer used to derive independent stream seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

/// Noise for example `index` in `epoch`. Independent of batch layout and
/// worker scheduling.
pub(crate) fn example_noise(seed: u64, epoch: usize, index: usize, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch as u64, index as u64]));
    draw_noise(&mut rng, n)
}

/// Shared minibatch loop. Per-example gradients are computed in parallel on
/// a frozen snapshot and summed in batch order before each optimizer step;
/// the multiplier is updated from the batch's mean ratio afterwards.
pub(crate) fn fit<F>(
    model: &mut RefModel,
    data: &[Example],
    ctrl: &mut SparsityController,
    cfg: &TrainConfig,
    step: F,
) -> Result<TrainingReport>
where
    F: Fn(&RefModel, usize, &SparsityController, &[f64]) -> Result<StepOutcome> + Sync,
{
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    let mut report = TrainingReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut shuffle = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, epoch as u64, u64::MAX]));
        order.shuffle(&mut shuffle);
        let (mut loss, mut ratio, mut correct, mut penalty) = (0.0, 0.0, 0usize, 0.0);
        let (mut flagged_sum, mut flagged_count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let snapshot: &RefModel = model;
            let ctrl_now = *ctrl;
            let outcomes = batch
                .par_iter()
                .map(|&i| {
                    let ex = &data[i];
                    let noise = example_noise(cfg.seed, epoch, i, ex.len());
                    step(snapshot, i, &ctrl_now, &noise)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut total = model.params().zero_grads();
            let scale = 1.0 / batch.len() as f64;
            let mut batch_ratio = 0.0;
            for out in &outcomes {
                for (name, g) in &out.grads {
                    let acc = total.get_mut(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v * scale;
                    }
                }
                loss += out.loss;
                ratio += out.ratio;
                batch_ratio += out.ratio;
                correct += usize::from(out.correct);
                penalty += out.penalty;
                flagged_sum += out.flagged.0;
                flagged_count += out.flagged.1;
            }
            model.params_mut().apply(&total, &cfg.optimizer)?;
            ctrl.update_multiplier(batch_ratio * scale);
        }
        let m = data.len() as f64;
        report.epochs.push(EpochRecord {
            epoch: epoch + 1,
            loss: loss / m,
            accuracy: correct as f64 / m,
            selection_ratio: ratio / m,
            mu: ctrl.mu,
            penalty: penalty / m,
            bias_selection_rate: if flagged_count == 0 {
                f64::NAN
            } else {
                flagged_sum / flagged_count as f64
            },
        });
    }
    Ok(report)
}

/// Trains a REF on its examples' task labels under the sparsity controller.
pub fn train_ref(
    model: &mut RefModel,
    data: &[Example],
    ctrl: &mut SparsityController,
    cfg: &TrainConfig,
) -> Result<TrainingReport> {
    train_ref_on(model, data, ctrl, cfg, |ex| ex.task_label)
}

/// [`train_ref`] with the target label chosen per example, e.g. the bias
/// label when pretraining a bias REF.
pub fn train_ref_on<L>(
    model: &mut RefModel,
    data: &[Example],
    ctrl: &mut SparsityController,
    cfg: &TrainConfig,
    label: L,
) -> Result<TrainingReport>
where
    L: Fn(&Example) -> usize + Sync,
{
    fit(model, data, ctrl, cfg, |m, i, c, noise| {
        let ex = &data[i];
        let graph = gated_loss(m, ex, label(ex), c, noise)?;
        StepOutcome::plain(&graph)
    })
}

/// Cross-entropy of the encoder on inputs scaled by a fixed mask.
pub(crate) fn masked_loss(model: &RefModel, ex: &Example, label: usize, z: &[f64]) -> Result<StepOutcome> {
    if z.len() != ex.len() {
        return Err(Error::LengthMismatch {
            expected: ex.len(),
            actual: z.len(),
        });
    }
    if label >= model.classes() {
        return Err(Error::Domain {
            op: "masked_loss",
            detail: format!("label {label} outside {} classes", model.classes()),
        });
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let xs = model.embed(&mut tape, &bound, ex)?;
    let zv = tape.constant(z.to_vec());
    let log_probs = model.encode(&mut tape, &bound, &xs, zv);
    let gold = tape.slice(log_probs, label, 1);
    let ce = tape.neg(gold);
    tape.check()?;
    let ratio = z.iter().sum::<f64>() / z.len() as f64;
    Ok(StepOutcome {
        grads: bound.gradients(&tape, ce)?,
        loss: tape.scalar(ce),
        ratio,
        correct: argmax(tape.value(log_probs)) == label,
        penalty: 0.0,
        flagged: (0.0, 0),
    })
}

/// Trains only the encoder path on fixed per-example masks (no gates).
/// `masks[i]` scales the tokens of `data[i]`.
pub fn train_classifier(
    model: &mut RefModel,
    data: &[Example],
    masks: &[Vec<f64>],
    label: impl Fn(&Example) -> usize + Sync,
    cfg: &TrainConfig,
) -> Result<TrainingReport> {
    if masks.len() != data.len() {
        return Err(Error::LengthMismatch {
            expected: data.len(),
            actual: masks.len(),
        });
    }
    let mut ctrl = SparsityController::new(0.0);
    ctrl.step_size = 0.0;
    fit(model, data, &mut ctrl, cfg, |m, i, _, _| {
        let ex = &data[i];
        masked_loss(m, ex, label(ex), &masks[i])
    })
}
