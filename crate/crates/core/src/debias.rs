//! Token energies and the bias-energy constraint on the task rationale.
//!
//! A token's energy under a gate model is `-ln P(z = 0)`. The frozen bias
//! model supplies constant bias energies `e_b`; the task extractor's
//! energies `e_t` stay differentiable, and every token with `e_b > A` adds
//! `e_t + (e_b - A)` to the task objective, scaled by `gamma`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, RwLock};

use rand::Rng;

use crate::error::{Error, Result};
use crate::gates::GateVector;
use crate::numerics::Tape;
use crate::rationale::{
    draw_noise, fit, gated_loss, Example, LossGraph, RefModel, SparsityController, StepOutcome,
    TrainConfig, TrainingReport,
};

/// Smallest non-selection probability used when taking logs.
pub const P_ZERO_FLOOR: f64 = 1e-6;

/// Largest energy any token can carry, `-ln(1e-6)`.
pub fn energy_max() -> f64 {
    -P_ZERO_FLOOR.ln()
}

/// `-ln(1 - p_select)` with `p_select` clamped to `[0, 1 - 1e-6]`.
pub fn energy(p_select: f64) -> f64 {
    let p = p_select.clamp(0.0, 1.0 - P_ZERO_FLOOR);
    -(-p).ln_1p()
}

/// Energy threshold matching a selection probability: `-ln(1 - p)`.
pub fn threshold_from_probability(p: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidConfig(format!("threshold probability {p} outside [0, 1)")));
    }
    Ok(-(-p).ln_1p())
}

/// `e_t + (e_b - a)` when `e_b > a`, else 0.
pub fn constraint(e_t: f64, e_b: f64, a: f64) -> f64 {
    if e_b > a {
        e_t + (e_b - a)
    } else {
        0.0
    }
}

/// Probability-space analogue: `p_t + (p_b - a_p)` when `p_b > a_p`, else 0.
pub fn constraint_probability(p_t: f64, p_b: f64, a_p: f64) -> f64 {
    if p_b > a_p {
        p_t + (p_b - a_p)
    } else {
        0.0
    }
}

/// Task and bias energies of one example.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyProfile {
    task_energy: Vec<f64>,
    bias_energy: Vec<f64>,
}

impl EnergyProfile {
    pub fn new(task_energy: Vec<f64>, bias_energy: Vec<f64>) -> Result<Self> {
        if task_energy.len() != bias_energy.len() {
            return Err(Error::LengthMismatch {
                expected: task_energy.len(),
                actual: bias_energy.len(),
            });
        }
        let cap = energy_max() + 1e-12;
        if let Some(e) = task_energy
            .iter()
            .chain(&bias_energy)
            .find(|e| !(e.is_finite() && **e >= 0.0 && **e <= cap))
        {
            return Err(Error::Domain {
                op: "EnergyProfile",
                detail: format!("energy {e} outside [0, {cap}]"),
            });
        }
        Ok(Self {
            task_energy,
            bias_energy,
        })
    }

    /// Energies of a task model's gates against an oracle.
    pub fn of(task: &RefModel, oracle: &BiasOracle, ex: &Example) -> Result<Self> {
        let gates = task.extract_gates(ex)?;
        let e_t = gates.p_selects().into_iter().map(energy).collect();
        Self::new(e_t, oracle.bias_energies(ex)?)
    }

    pub fn task_energy(&self) -> &[f64] {
        &self.task_energy
    }

    pub fn bias_energy(&self) -> &[f64] {
        &self.bias_energy
    }

    pub fn len(&self) -> usize {
        self.task_energy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.task_energy.is_empty()
    }

    /// `sum_i D(i)` at threshold `a`.
    pub fn total_constraint(&self, a: f64) -> f64 {
        self.task_energy
            .iter()
            .zip(&self.bias_energy)
            .map(|(&t, &b)| constraint(t, b, a))
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Energy,
    Probability,
    /// Unconstrained training; bias-aware pruning of the rationale at
    /// inference time.
    Rerank,
    None,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Energy => "energy",
            Variant::Probability => "probability",
            Variant::Rerank => "rerank",
            Variant::None => "none",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "energy" => Ok(Variant::Energy),
            "probability" => Ok(Variant::Probability),
            "rerank" => Ok(Variant::Rerank),
            "none" => Ok(Variant::None),
            _ => Err(Error::InvalidConfig(format!("unknown variant `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DebiasConfig {
    /// Energy threshold `A`.
    pub threshold: f64,
    pub gamma: f64,
    pub variant: Variant,
    /// Threshold `A_p` of the probability variant.
    pub prob_threshold: f64,
    /// Divide the constraint sum by the sequence length.
    pub normalize: bool,
}

impl Default for DebiasConfig {
    fn default() -> Self {
        Self {
            threshold: std::f64::consts::LN_2,
            gamma: 1.0,
            variant: Variant::Energy,
            prob_threshold: 0.5,
            normalize: false,
        }
    }
}

impl DebiasConfig {
    /// Config with `A = -ln(1 - p_a)`.
    pub fn from_probability(p_a: f64, gamma: f64, variant: Variant) -> Result<Self> {
        let cfg = Self {
            threshold: threshold_from_probability(p_a)?,
            gamma,
            variant,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `p_A` such that `A = -ln(1 - p_A)`.
    pub fn threshold_probability(&self) -> f64 {
        -(-self.threshold).exp_m1()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold >= 0.0 && self.threshold.is_finite()) {
            return Err(Error::InvalidConfig(format!("threshold {} must be finite and >= 0", self.threshold)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!("gamma {} must be finite and >= 0", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.prob_threshold) {
            return Err(Error::InvalidConfig(format!(
                "probability threshold {} outside [0, 1]",
                self.prob_threshold
            )));
        }
        Ok(())
    }

    fn is_active(&self, e_b: f64, p_b: f64) -> bool {
        match self.variant {
            Variant::Probability => p_b > self.prob_threshold,
            _ => e_b > self.threshold,
        }
    }

    /// `key=value` run manifest.
    pub fn manifest(&self, seed: u64, oracle_digest: &str) -> String {
        format!(
            "variant={}\nA={}\np_A={}\ngamma={}\nprob_threshold={}\nnormalize={}\nseed={}\noracle_digest={}\n",
            self.variant,
            self.threshold,
            self.threshold_probability(),
            self.gamma,
            self.prob_threshold,
            self.normalize,
            seed,
            oracle_digest
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
struct BiasScores {
    p_select: Vec<f64>,
    energy: Vec<f64>,
}

/// A frozen bias model with a per-input cache of its gate scores.
#[derive(Debug)]
pub struct BiasOracle {
    model: RefModel,
    digest: String,
    cache: RwLock<HashMap<Vec<u32>, Arc<BiasScores>>>,
}

impl BiasOracle {
    pub fn new(model: RefModel) -> Self {
        Self {
            digest: model.params().digest(),
            model,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn model(&self) -> &RefModel {
        &self.model
    }

    /// Digest of the frozen parameters.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    fn scores(&self, ex: &Example) -> Result<Arc<BiasScores>> {
        if let Some(s) = self.cache.read().expect("oracle cache").get(&ex.tokens) {
            return Ok(Arc::clone(s));
        }
        let p_select = self.model.extract_gates(ex)?.p_selects();
        let energy = p_select.iter().copied().map(energy).collect();
        let fresh = Arc::new(BiasScores { p_select, energy });
        let mut cache = self.cache.write().expect("oracle cache");
        Ok(Arc::clone(cache.entry(ex.tokens.clone()).or_insert(fresh)))
    }

    /// Bias gate selection probabilities per token.
    pub fn bias_probabilities(&self, ex: &Example) -> Result<Vec<f64>> {
        Ok(self.scores(ex)?.p_select.clone())
    }

    /// `e_b` per token.
    pub fn bias_energies(&self, ex: &Example) -> Result<Vec<f64>> {
        Ok(self.scores(ex)?.energy.clone())
    }
}

/// Adds the weighted constraint to a task loss graph. Returns the added
/// value `gamma * sum D` (divided by `n` when normalizing).
fn add_constraint(graph: &mut LossGraph, scores: &BiasScores, cfg: &DebiasConfig) -> Result<f64> {
    let n = scores.energy.len();
    let mut mask = vec![0.0; n];
    let mut offset = vec![0.0; n];
    for i in 0..n {
        let (e_b, p_b) = (scores.energy[i], scores.p_select[i]);
        if cfg.is_active(e_b, p_b) {
            mask[i] = 1.0;
            offset[i] = match cfg.variant {
                Variant::Probability => p_b - cfg.prob_threshold,
                _ => e_b - cfg.threshold,
            };
        }
    }
    let (p_zero, p_select) = (graph.p_zero, graph.p_select);
    let tape: &mut Tape = graph.tape_mut();
    let task_term = match cfg.variant {
        Variant::Probability => p_select,
        _ => {
            let floor = tape.scalar_constant(P_ZERO_FLOOR);
            let q = tape.max(p_zero, floor);
            let log_q = tape.log(q);
            tape.neg(log_q)
        }
    };
    let mask = tape.constant(mask);
    let offset = tape.constant(offset);
    let active = tape.mul(mask, task_term);
    let d = tape.add(active, offset);
    let total = tape.sum(d);
    let weight = if cfg.normalize {
        cfg.gamma / n as f64
    } else {
        cfg.gamma
    };
    let value = tape.scalar(total) * weight;
    graph.add_weighted(total, weight)?;
    Ok(value)
}

/// The task objective plus `gamma * sum_i D(i)`, with bias energies held
/// constant. `Rerank` is an inference-time method and is rejected.
pub fn combined_loss<R: Rng>(
    task_model: &RefModel,
    oracle: &BiasOracle,
    ex: &Example,
    ctrl: &SparsityController,
    cfg: &DebiasConfig,
    rng: &mut R,
) -> Result<LossGraph> {
    let noise = draw_noise(rng, ex.len());
    combined_loss_with_noise(task_model, oracle, ex, ctrl, cfg, &noise)
}

/// [`combined_loss`] with explicit gate noise.
pub fn combined_loss_with_noise(
    task_model: &RefModel,
    oracle: &BiasOracle,
    ex: &Example,
    ctrl: &SparsityController,
    cfg: &DebiasConfig,
    noise: &[f64],
) -> Result<LossGraph> {
    Ok(debiased_step(task_model, oracle, ex, ctrl, cfg, noise)?.0)
}

fn debiased_step(
    task_model: &RefModel,
    oracle: &BiasOracle,
    ex: &Example,
    ctrl: &SparsityController,
    cfg: &DebiasConfig,
    noise: &[f64],
) -> Result<(LossGraph, f64, Arc<BiasScores>)> {
    if cfg.variant == Variant::Rerank {
        return Err(Error::VariantMismatch(cfg.variant.to_string()));
    }
    let scores = oracle.scores(ex)?;
    if scores.energy.len() != ex.len() {
        return Err(Error::LengthMismatch {
            expected: ex.len(),
            actual: scores.energy.len(),
        });
    }
    let mut graph = gated_loss(task_model, ex, ex.task_label, ctrl, noise)?;
    let penalty = if cfg.variant == Variant::None || cfg.gamma == 0.0 {
        0.0
    } else {
        add_constraint(&mut graph, &scores, cfg)?
    };
    Ok((graph, penalty, scores))
}

/// Test-time pruning: among tokens the deterministic task gate selects,
/// keeps the `ceil(budget_ratio * count)` with the lowest bias energy
/// (lower index first on ties).
pub fn rerank_select(task_gates: &GateVector, bias_e: &[f64], budget_ratio: f64) -> Result<Vec<bool>> {
    if !(budget_ratio > 0.0 && budget_ratio <= 1.0) {
        return Err(Error::InvalidConfig(format!("budget ratio {budget_ratio} outside (0, 1]")));
    }
    let mask = task_gates.deterministic_mask();
    if bias_e.len() != mask.len() {
        return Err(Error::LengthMismatch {
            expected: mask.len(),
            actual: bias_e.len(),
        });
    }
    let mut selected: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let keep = ((budget_ratio * selected.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    selected.sort_by(|&i, &j| bias_e[i].total_cmp(&bias_e[j]).then(i.cmp(&j)));
    let mut out = vec![false; mask.len()];
    for &i in selected.iter().take(keep) {
        out[i] = true;
    }
    Ok(out)
}

/// Trains the task model under the combined objective. The oracle is only
/// read. `Rerank` trains without the constraint.
pub fn train_debiased(
    task_model: &mut RefModel,
    oracle: &BiasOracle,
    data: &[Example],
    ctrl: &mut SparsityController,
    cfg: &DebiasConfig,
    train: &TrainConfig,
) -> Result<TrainingReport> {
    cfg.validate()?;
    let mut effective = *cfg;
    if effective.variant == Variant::Rerank {
        effective.variant = Variant::None;
    }
    fit(task_model, data, ctrl, train, |m, i, c, noise| {
        let ex = &data[i];
        let (graph, penalty, scores) = debiased_step(m, oracle, ex, c, &effective, noise)?;
        let mut out = StepOutcome::plain(&graph)?;
        out.penalty = penalty;
        let mut flagged = (0.0, 0);
        for (t, &p) in graph.p_select().iter().enumerate() {
            if cfg.is_active(scores.energy[t], scores.p_select[t]) {
                flagged.0 += p;
                flagged.1 += 1;
            }
        }
        out.flagged = flagged;
        Ok(out)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::KumaGate;
    use crate::rationale::ModelConfig;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn energy_values() {
        assert_eq!(energy(0.0), 0.0);
        assert!((energy(0.5) - 0.6931).abs() < 1e-4);
        assert!((energy(0.7) - 1.2040).abs() < 1e-4);
        assert!((energy(1.0) - energy_max()).abs() < 1e-9);
        assert!((threshold_from_probability(0.5).unwrap() - LN2).abs() < 1e-15);
    }

    #[test]
    fn constraint_values() {
        assert_eq!(constraint(5.0, 0.3, LN2), 0.0);
        assert!((constraint(0.9, 1.2040, 0.6931) - 1.4109).abs() < 1e-12);
        assert_eq!(constraint(0.9, LN2, LN2), 0.0);
    }

    fn gates_with(p_selects: &[f64]) -> GateVector {
        // b = 1 makes p_zero = t0^a; solve for a.
        let t0: f64 = 0.1 / 1.2;
        GateVector::new(
            p_selects
                .iter()
                .map(|&p| KumaGate::new((1.0 - p).ln() / t0.ln(), 1.0))
                .collect(),
        )
    }

    #[test]
    fn rerank_examples() {
        let g = gates_with(&[0.9; 5]);
        let keep = rerank_select(&g, &[2.0, 0.1, 0.5, 3.0, 0.2], 0.6).unwrap();
        assert_eq!(keep, vec![false, true, true, false, true]);
        let keep = rerank_select(&g, &[1.0; 5], 0.6).unwrap();
        assert_eq!(keep, vec![true, true, true, false, false]);
        let mixed = gates_with(&[0.9, 0.1, 0.8, 0.3]);
        assert_eq!(
            rerank_select(&mixed, &[0.0; 4], 1.0).unwrap(),
            mixed.deterministic_mask()
        );
        assert!(rerank_select(&g, &[0.0; 5], 0.0).is_err());
    }

    fn uniform_oracle() -> BiasOracle {
        let mut m = RefModel::new(ModelConfig::new(10, 2), 3).unwrap();
        let inv_softplus_one = (std::f64::consts::E - 1.0).ln();
        let p = m.params_mut();
        for w in ["extractor.head.wa", "extractor.head.wb"] {
            let len = p.data(w).unwrap().len();
            p.set(w, vec![0.0; len]).unwrap();
        }
        p.set("extractor.head.ba", vec![inv_softplus_one]).unwrap();
        p.set("extractor.head.bb", vec![inv_softplus_one]).unwrap();
        BiasOracle::new(m)
    }

    fn example(tokens: Vec<u32>) -> Example {
        Example {
            id: 0,
            tokens,
            task_label: 1,
            bias_label: 0,
        }
    }

    #[test]
    fn uniform_gates_give_constant_bias_energy() {
        let oracle = uniform_oracle();
        let ex = example(vec![2, 3, 4, 5]);
        let e = oracle.bias_energies(&ex).unwrap();
        for v in &e {
            assert!((v - 2.4849).abs() < 1e-4, "{v}");
        }
        assert_eq!(e, oracle.bias_energies(&ex).unwrap());
    }

    #[test]
    fn inactive_constraint_is_the_plain_loss() {
        let oracle = uniform_oracle();
        let task = RefModel::new(ModelConfig::new(10, 2), 5).unwrap();
        let ex = example(vec![2, 7, 4, 9, 3]);
        let ctrl = SparsityController {
            mu: 0.7,
            ..SparsityController::new(0.5)
        };
        let noise = [0.2, 0.9, 0.5, 0.4, 0.7];
        let plain = gated_loss(&task, &ex, 1, &ctrl, &noise).unwrap();
        for cfg in [
            DebiasConfig {
                gamma: 0.0,
                ..DebiasConfig::default()
            },
            DebiasConfig {
                threshold: 3.0,
                ..DebiasConfig::default()
            },
            DebiasConfig {
                variant: Variant::None,
                ..DebiasConfig::default()
            },
        ] {
            let g = combined_loss_with_noise(&task, &oracle, &ex, &ctrl, &cfg, &noise).unwrap();
            assert_eq!(g.value().to_bits(), plain.value().to_bits());
            assert_eq!(g.gradient().unwrap(), plain.gradient().unwrap());
        }
        let rerank = DebiasConfig {
            variant: Variant::Rerank,
            ..DebiasConfig::default()
        };
        assert!(matches!(
            combined_loss_with_noise(&task, &oracle, &ex, &ctrl, &rerank, &noise),
            Err(Error::VariantMismatch(_))
        ));
    }

    #[test]
    fn active_constraint_adds_task_energy_and_excess() {
        let oracle = uniform_oracle();
        let task = RefModel::new(ModelConfig::new(10, 2), 5).unwrap();
        let ex = example(vec![2, 7, 4]);
        let ctrl = SparsityController::new(0.5);
        let noise = [0.3, 0.6, 0.9];
        let cfg = DebiasConfig {
            gamma: 0.5,
            ..DebiasConfig::default()
        };
        let plain = gated_loss(&task, &ex, 1, &ctrl, &noise).unwrap();
        let g = combined_loss_with_noise(&task, &oracle, &ex, &ctrl, &cfg, &noise).unwrap();
        let profile = EnergyProfile::of(&task, &oracle, &ex).unwrap();
        let want = plain.value() + 0.5 * profile.total_constraint(LN2);
        assert!((g.value() - want).abs() < 1e-9);
    }

    #[test]
    fn combined_gradient_matches_finite_differences() {
        let oracle = BiasOracle::new(RefModel::new(ModelConfig::new(10, 2), 13).unwrap());
        let cfg_model = ModelConfig {
            emb_dim: 3,
            hidden: 2,
            ..ModelConfig::new(10, 2)
        };
        let mut task = RefModel::new(cfg_model, 14).unwrap();
        task.params_mut().set("encoder.out.w", (0..8).map(|i| 0.3 * i as f64 - 1.0).collect()).unwrap();
        let ex = example(vec![2, 7, 4, 9, 3, 5]);
        let noise = [0.3, 0.5, 0.7, 0.9, 0.2, 0.6];
        let ctrl = SparsityController {
            mu: 0.4,
            ..SparsityController::new(0.2)
        };
        let mut e = oracle.bias_energies(&ex).unwrap();
        e.sort_by(f64::total_cmp);
        let mut p = oracle.bias_probabilities(&ex).unwrap();
        p.sort_by(f64::total_cmp);
        for cfg in [
            DebiasConfig {
                threshold: (e[2] + e[3]) / 2.0,
                gamma: 1.3,
                ..DebiasConfig::default()
            },
            DebiasConfig {
                prob_threshold: (p[2] + p[3]) / 2.0,
                variant: Variant::Probability,
                ..DebiasConfig::default()
            },
        ] {
            let graph = combined_loss_with_noise(&task, &oracle, &ex, &ctrl, &cfg, &noise).unwrap();
            let plain = gated_loss(&task, &ex, 1, &ctrl, &noise).unwrap();
            assert!(graph.value() > plain.value());
            let grads = graph.gradient().unwrap();
            let h = 1e-5;
            for name in task.params().names().filter(|n| n.starts_with("extractor")) {
                let base = task.params().data(name).unwrap().to_vec();
                for i in 0..base.len() {
                    let eval = |delta: f64| {
                        let mut m = task.clone();
                        let mut v = base.clone();
                        v[i] += delta;
                        m.params_mut().set(name, v).unwrap();
                        combined_loss_with_noise(&m, &oracle, &ex, &ctrl, &cfg, &noise).unwrap().value()
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let g = grads[name][i];
                    assert!((g - fd).abs() <= 1e-3 * g.abs().max(fd.abs()) + 1e-7, "{name}[{i}]: {g} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn energy_and_probability_rank_differently() {
        let (a, a_p) = (LN2, 0.5);
        let (ti, bi) = (0.99, 0.51);
        let (tj, bj) = (0.8, 0.8);
        let d_i = constraint(energy(ti), energy(bi), a);
        let d_j = constraint(energy(tj), energy(bj), a);
        let dp_i = constraint_probability(ti, bi, a_p);
        let dp_j = constraint_probability(tj, bj, a_p);
        assert!(d_i > d_j);
        assert!(dp_j > dp_i);
    }

    #[test]
    fn manifest_lists_threshold_forms() {
        let cfg = DebiasConfig::from_probability(0.5, 1.0, Variant::Energy).unwrap();
        let m = cfg.manifest(7, "abc");
        assert!(m.contains("variant=energy\n"));
        assert!(m.contains("p_A=0.5\n"));
        assert!(m.contains("oracle_digest=abc\n"));
    }
}
