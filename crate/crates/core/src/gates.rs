//! Stretched-and-rectified Kumaraswamy ("HardKuma") token gates.
//!
//! A base variable `t ~ Kuma(a, b)` on `[0, 1]` is stretched to `(l, r)` with
//! `l < 0 < 1 < r` and clamped back into `[0, 1]`. The clamp puts exact point
//! masses on 0 and 1 while samples in between stay differentiable in `(a, b)`
//! through the inverse-CDF path.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

pub const STRETCH_LOW: f64 = -0.1;
pub const STRETCH_HIGH: f64 = 1.1;
pub const SHAPE_MIN: f64 = 1e-3;
pub const SHAPE_MAX: f64 = 10.0;
/// Uniform noise is kept inside `[NOISE_EPS, 1 - NOISE_EPS]`.
pub const NOISE_EPS: f64 = 1e-6;

/// `F(t; a, b) = 1 - (1 - t^a)^b`.
pub fn kuma_cdf(t: f64, a: f64, b: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain {
            op: "kuma_cdf",
            detail: format!("t = {t} outside [0, 1]"),
        });
    }
    Ok(cdf(t, a, b))
}

fn cdf(t: f64, a: f64, b: f64) -> f64 {
    -(b * (-t.powf(a)).ln_1p()).exp_m1()
}

/// Stretch interval `(l, r)` shared by every gate of a model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stretch {
    pub low: f64,
    pub high: f64,
}

impl Default for Stretch {
    fn default() -> Self {
        Self {
            low: STRETCH_LOW,
            high: STRETCH_HIGH,
        }
    }
}

impl Stretch {
    pub fn new(low: f64, high: f64) -> Result<Self> {
        if !(low < 0.0 && high > 1.0) {
            return Err(Error::Domain {
                op: "stretch",
                detail: format!("need l < 0 < 1 < r, got ({low}, {high})"),
            });
        }
        Ok(Self { low, high })
    }

    /// Base-variable value that stretches onto 0.
    fn zero_point(&self) -> f64 {
        -self.low / (self.high - self.low)
    }

    /// Base-variable value that stretches onto 1.
    fn one_point(&self) -> f64 {
        (1.0 - self.low) / (self.high - self.low)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KumaGate {
    a: f64,
    b: f64,
    stretch: Stretch,
}

impl KumaGate {
    /// Gate with the default stretch; shapes are clamped to `[1e-3, 10]`.
    pub fn new(a: f64, b: f64) -> Self {
        Self::with_stretch(a, b, Stretch::default())
    }

    pub fn with_stretch(a: f64, b: f64, stretch: Stretch) -> Self {
        Self {
            a: a.clamp(SHAPE_MIN, SHAPE_MAX),
            b: b.clamp(SHAPE_MIN, SHAPE_MAX),
            stretch,
        }
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    /// `P(z = 0)`.
    pub fn p_zero(&self) -> f64 {
        cdf(self.stretch.zero_point(), self.a, self.b)
    }

    /// `P(z = 1)`.
    pub fn p_one(&self) -> f64 {
        1.0 - cdf(self.stretch.one_point(), self.a, self.b)
    }

    /// `P(z != 0)`, the probability that the token is selected at all.
    pub fn p_select(&self) -> f64 {
        1.0 - self.p_zero()
    }

    /// `P(0 < z < 1)`.
    pub fn p_continuous(&self) -> f64 {
        (1.0 - self.p_zero() - self.p_one()).max(0.0)
    }

    /// `E[z]`, integrating the survival function of the rectified variable.
    pub fn expected_value(&self) -> f64 {
        let Stretch { low, high } = self.stretch;
        let survival = |y: f64| 1.0 - cdf((y - low) / (high - low), self.a, self.b);
        adaptive_simpson(&survival, 0.0, 1.0, 1e-13, 48)
    }

    /// Inverse-CDF sample for uniform noise `u`, before rectification.
    fn stretched(&self, u: f64) -> (f64, f64, f64, f64) {
        let u = u.clamp(NOISE_EPS, 1.0 - NOISE_EPS);
        let lg = (-u).ln_1p();
        let w = (lg / self.b).exp();
        let inner = -(lg / self.b).exp_m1();
        let t = (inner.ln() / self.a).exp();
        let s = self.stretch.low + (self.stretch.high - self.stretch.low) * t;
        (s, t, inner, w * lg)
    }

    /// Rectified sample `z` in `[0, 1]`.
    pub fn sample(&self, u: f64) -> f64 {
        self.stretched(u).0.clamp(0.0, 1.0)
    }

    /// Sample together with its pathwise derivatives `(dz/da, dz/db)`.
    /// Both derivatives are zero where the sample is clamped.
    pub fn sample_with_grad(&self, u: f64) -> (f64, f64, f64) {
        let (s, t, inner, w_lg) = self.stretched(u);
        if s <= 0.0 || s >= 1.0 {
            return (s.clamp(0.0, 1.0), 0.0, 0.0);
        }
        let (a, b) = (self.a, self.b);
        let width = self.stretch.high - self.stretch.low;
        let dinner_db = w_lg / (b * b);
        let dt_da = -t * inner.ln() / (a * a);
        let dt_db = t / (a * inner) * dinner_db;
        (s, width * dt_da, width * dt_db)
    }

    /// Test-time hard gate: selected iff `p_select >= 0.5`.
    pub fn deterministic(&self) -> bool {
        self.p_select() >= 0.5
    }
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        m: f64,
        fm: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let (lm, flm, left) = simpson(f, a, fa, m, fm);
        let (rm, frm, right) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, fa, m, fm, lm, flm, left, tol / 2.0, depth - 1)
            + recurse(f, m, fm, b, fb, rm, frm, right, tol / 2.0, depth - 1)
    }
    let (fa, fb) = (f(a), f(b));
    let (m, fm, whole) = simpson(f, a, fa, b, fb);
    recurse(f, a, fa, b, fb, m, fm, whole, tol, depth)
}

/// One gate per token of an example.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct GateVector {
    gates: Vec<KumaGate>,
}

impl GateVector {
    pub fn new(gates: Vec<KumaGate>) -> Self {
        Self { gates }
    }

    pub fn len(&self) -> usize {
        self.gates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gates.is_empty()
    }

    pub fn gates(&self) -> &[KumaGate] {
        &self.gates
    }

    pub fn p_selects(&self) -> Vec<f64> {
        self.gates.iter().map(KumaGate::p_select).collect()
    }

    /// Expected number of selected tokens, `sum_i P(z_i != 0)`.
    pub fn expected_l0(&self) -> f64 {
        self.gates.iter().map(KumaGate::p_select).sum()
    }

    /// Expected count of selected/unselected switches between neighbours,
    /// treating gates as independent.
    pub fn expected_transitions(&self) -> f64 {
        expected_transitions(&self.p_selects())
    }

    pub fn deterministic_mask(&self) -> Vec<bool> {
        self.gates.iter().map(KumaGate::deterministic).collect()
    }
}

/// `sum_i p_i (1 - p_{i+1}) + (1 - p_i) p_{i+1}` over adjacent pairs.
pub fn expected_transitions(p: &[f64]) -> f64 {
    p.windows(2)
        .map(|w| w[0] * (1.0 - w[1]) + (1.0 - w[0]) * w[1])
        .sum()
}

/// Differentiable gate quantities over per-token shape vectors on a tape.
pub mod on_tape {
    use super::*;

    /// Maps raw extractor outputs to shapes: `clamp(softplus(raw), 1e-3, 10)`.
    pub fn shapes(tape: &mut Tape, raw: Var) -> Var {
        let sp = tape.softplus(raw);
        tape.clamp(sp, SHAPE_MIN, SHAPE_MAX)
    }

    /// `P(z_i = 0)` per token.
    pub fn p_zero(tape: &mut Tape, a: Var, b: Var, stretch: Stretch) -> Var {
        let t0 = stretch.zero_point();
        let ln_pow = tape.scale(a, t0.ln());
        let pow = tape.exp(ln_pow);
        let rest = tape.rsub(1.0, pow);
        let ln_rest = tape.log(rest);
        let scaled = tape.mul(b, ln_rest);
        let survive = tape.exp(scaled);
        tape.rsub(1.0, survive)
    }

    /// `P(z_i != 0)` per token.
    pub fn p_select(tape: &mut Tape, a: Var, b: Var, stretch: Stretch) -> Var {
        let pz = p_zero(tape, a, b, stretch);
        tape.rsub(1.0, pz)
    }

    /// Rectified reparameterized samples for fixed uniform noise.
    pub fn sample(tape: &mut Tape, a: Var, b: Var, noise: &[f64], stretch: Stretch) -> Var {
        let lg: Vec<f64> = noise
            .iter()
            .map(|u| (-u.clamp(NOISE_EPS, 1.0 - NOISE_EPS)).ln_1p())
            .collect();
        let lg = tape.constant(lg);
        let inv_b = tape.powf(b, -1.0);
        let e = tape.mul(lg, inv_b);
        let w = tape.exp(e);
        let inner = tape.rsub(1.0, w);
        let ln_inner = tape.log(inner);
        let inv_a = tape.powf(a, -1.0);
        let e = tape.mul(ln_inner, inv_a);
        let t = tape.exp(e);
        let width = stretch.high - stretch.low;
        let scaled = tape.scale(t, width);
        let s = tape.shift(scaled, stretch.low);
        tape.clamp(s, 0.0, 1.0)
    }

    /// Expected transitions for a vector of selection probabilities.
    pub fn expected_transitions(tape: &mut Tape, p: Var) -> Var {
        let n = tape.width(p);
        if n < 2 {
            return tape.scalar_constant(0.0);
        }
        let left = tape.slice(p, 0, n - 1);
        let right = tape.slice(p, 1, n - 1);
        let both = tape.mul(left, right);
        let twice = tape.scale(both, -2.0);
        let s = tape.add(left, right);
        let per_pair = tape.add(s, twice);
        tape.sum(per_pair)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const T0: f64 = 0.1 / 1.2;

    #[test]
    fn cdf_endpoints_and_uniform_case() {
        for (a, b) in [(0.5, 2.0), (3.0, 0.2), (1.0, 1.0)] {
            assert_eq!(kuma_cdf(0.0, a, b).unwrap(), 0.0);
            assert_eq!(kuma_cdf(1.0, a, b).unwrap(), 1.0);
        }
        assert!((kuma_cdf(0.3, 1.0, 1.0).unwrap() - 0.3).abs() < 1e-15);
        assert!(kuma_cdf(1.2, 1.0, 1.0).is_err());
        assert!(kuma_cdf(-0.1, 1.0, 1.0).is_err());
    }

    #[test]
    fn uniform_gate_masses() {
        let g = KumaGate::new(1.0, 1.0);
        assert!((g.p_zero() - T0).abs() < 1e-12);
        assert!((g.p_one() - T0).abs() < 1e-12);
        assert!((g.p_select() - (1.0 - T0)).abs() < 1e-12);
        assert!(g.deterministic());
        // E[z] for the uniform case: P(z=1) + integral of y over (0, 1) / 1.2
        let expected = T0 + 0.5 / 1.2;
        assert!((g.expected_value() - expected).abs() < 1e-10);
    }

    #[test]
    fn degenerate_stretch_limits() {
        let g = KumaGate::with_stretch(1.0, 1.0, Stretch::new(-1e-12, 1.1).unwrap());
        assert!(g.p_zero() < 1e-11);
        let g = KumaGate::with_stretch(1.0, 1.0, Stretch::new(-0.1, 1.0 + 1e-12).unwrap());
        assert!(g.p_one() < 1e-11);
        assert!(Stretch::new(0.1, 1.1).is_err());
        assert!(Stretch::new(-0.1, 0.9).is_err());
    }

    #[test]
    fn shapes_are_clamped() {
        let g = KumaGate::new(0.0, 100.0);
        assert_eq!((g.a(), g.b()), (SHAPE_MIN, SHAPE_MAX));
    }

    #[test]
    fn sample_examples() {
        let g = KumaGate::new(1.0, 1.0);
        assert!((g.sample(0.5) - 0.5).abs() < 1e-12);
        assert_eq!(g.sample(0.01), 0.0);
        assert_eq!(g.sample(0.99), 1.0);
    }

    #[test]
    fn deterministic_gate_rules() {
        // with b = 1, p_zero = t0^a
        let g = KumaGate::new(0.9f64.ln() / T0.ln(), 1.0);
        assert!((g.p_zero() - 0.9).abs() < 1e-12);
        assert!(!g.deterministic());
        // tie: p_select = 0.5 exactly selects
        let g = KumaGate::new(0.5f64.ln() / T0.ln(), 1.0);
        assert!((g.p_select() - 0.5).abs() < 1e-12);
        let tie = GateVector::new(vec![g]);
        let p = tie.p_selects()[0];
        assert_eq!(tie.deterministic_mask()[0], p >= 0.5);
    }

    #[test]
    fn expected_l0_examples() {
        let closed = GateVector::new(vec![KumaGate::new(SHAPE_MIN, SHAPE_MAX); 3]);
        assert!(closed.expected_l0() < 1e-12);
        let uniform = GateVector::new(vec![KumaGate::new(1.0, 1.0); 4]);
        assert!((uniform.expected_l0() - 4.0 * (1.0 - T0)).abs() < 1e-12);
        assert!((uniform.expected_l0() - 3.6667).abs() < 1e-4);
    }

    #[test]
    fn transitions_examples() {
        assert_eq!(expected_transitions(&[1.0, 1.0, 1.0]), 0.0);
        assert_eq!(expected_transitions(&[1.0, 0.0]), 1.0);
        assert!((expected_transitions(&[0.9, 0.1, 0.9]) - 1.64).abs() < 1e-12);
        assert_eq!(expected_transitions(&[0.4]), 0.0);
    }

    #[test]
    fn pathwise_derivatives_match_finite_differences() {
        let h = 1e-6;
        for &(a, b) in &[(0.5, 2.0), (1.3, 0.7), (2.0, 3.0)] {
            for &u in &[0.2, 0.45, 0.7] {
                let g = KumaGate::new(a, b);
                let (s, da, db) = g.sample_with_grad(u);
                if s <= 0.0 || s >= 1.0 {
                    continue;
                }
                let fa = (KumaGate::new(a + h, b).sample(u) - KumaGate::new(a - h, b).sample(u))
                    / (2.0 * h);
                let fb = (KumaGate::new(a, b + h).sample(u) - KumaGate::new(a, b - h).sample(u))
                    / (2.0 * h);
                assert!((da - fa).abs() <= 1e-3 * fa.abs().max(1e-6), "{a} {b} {u}");
                assert!((db - fb).abs() <= 1e-3 * fb.abs().max(1e-6), "{a} {b} {u}");
            }
        }
    }

    #[test]
    fn tape_quantities_agree_with_closed_forms() {
        let shapes = [(0.4, 1.7), (1.0, 1.0), (2.5, 0.3)];
        let noise = [0.3, 0.6, 0.85];
        let mut tape = Tape::new();
        let a = tape.input(shapes.iter().map(|s| s.0).collect());
        let b = tape.input(shapes.iter().map(|s| s.1).collect());
        let pz = on_tape::p_zero(&mut tape, a, b, Stretch::default());
        let z = on_tape::sample(&mut tape, a, b, &noise, Stretch::default());
        for (k, &(sa, sb)) in shapes.iter().enumerate() {
            let g = KumaGate::new(sa, sb);
            assert!((tape.value(pz)[k] - g.p_zero()).abs() < 1e-12);
            assert!((tape.value(z)[k] - g.sample(noise[k])).abs() < 1e-12);
        }
        let p = tape.constant(vec![0.9, 0.1, 0.9]);
        let tr = on_tape::expected_transitions(&mut tape, p);
        assert!((tape.scalar(tr) - 1.64).abs() < 1e-12);
    }
}
