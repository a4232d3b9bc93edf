//! Vector-valued reverse-mode tape.
//!
//! Every node holds a flat `Vec<f64>`; scalars are length-one vectors.
//! Binary elementwise operations broadcast a length-one operand against a
//! longer one. Nodes are appended in evaluation order, so the node list is
//! always topologically sorted and one reverse sweep yields every gradient.
//!
//! Operations never panic on bad numbers. The first non-finite value (or
//! out-of-domain argument) is recorded as a fault; [`Tape::check`] and
//! [`Tape::backward`] report it.

use crate::error::{Error, Result};

/// Smallest argument accepted by [`Tape::log`].
pub const LOG_MIN_ARG: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Min(usize, usize),
    Max(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Powf(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Scale(usize, f64),
    Shift(usize),
    Sum(usize),
    AddN(Vec<usize>),
    MatVec { w: usize, x: usize, rows: usize },
    Slice { src: usize, start: usize },
    Concat(Vec<usize>),
    LogSoftmax(usize),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Vec<f64>,
    requires_grad: bool,
}

/// Append-only computation record.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<(&'static str, Option<String>)>,
}

/// Gradients of one scalar root with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when the root does not depend on it.
    pub fn wrt(&self, var: Var) -> Vec<f64> {
        let g = &self.grads[var.0];
        if g.is_empty() {
            vec![0.0; self.lens[var.0]]
        } else {
            g.clone()
        }
    }

    /// Moves the gradient for `var` out, leaving nothing behind.
    pub fn take(&mut self, var: Var) -> Vec<f64> {
        let g = std::mem::take(&mut self.grads[var.0]);
        if g.is_empty() {
            vec![0.0; self.lens[var.0]]
        } else {
            g
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn bcast(v: &[f64], k: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[k]
    }
}

fn accumulate(slot: &mut Vec<f64>, len: usize, k: usize, amount: f64) {
    if slot.is_empty() {
        *slot = vec![0.0; len];
    }
    if len == 1 {
        slot[0] += amount;
    } else {
        slot[k] += amount;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Vec<f64>, requires_grad: bool, name: &'static str) -> Var {
        if self.fault.is_none() && value.iter().any(|v| !v.is_finite()) {
            self.fault = Some((name, None));
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn domain_fault(&mut self, name: &'static str, detail: String) {
        if self.fault.is_none() {
            self.fault = Some((name, Some(detail)));
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf (a parameter or an input we want gradients for).
    pub fn input(&mut self, value: Vec<f64>) -> Var {
        self.push(Op::Leaf, value, true, "input")
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(Op::Leaf, value, false, "constant")
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(vec![value])
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// First element of a node; intended for scalar nodes.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn width(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    /// Reports the first fault recorded on this tape, if any.
    pub fn check(&self) -> Result<()> {
        match &self.fault {
            None => Ok(()),
            Some((op, None)) => Err(Error::NonFinite { op }),
            Some((op, Some(detail))) => Err(Error::Domain {
                op,
                detail: detail.clone(),
            }),
        }
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let n = va.len().max(vb.len());
        assert!(
            va.len() == vb.len() || va.len() == 1 || vb.len() == 1,
            "{name}: incompatible widths {} and {}",
            va.len(),
            vb.len()
        );
        let value = (0..n).map(|k| f(bcast(va, k), bcast(vb, k))).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(op, value, rg, name)
    }

    fn unary(&mut self, a: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(op, value, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a.0, b.0), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a.0, b.0), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a.0, b.0), "mul", |x, y| x * y)
    }

    /// Elementwise quotient. A zero denominator is a domain fault.
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        if self.nodes[b.0].value.contains(&0.0) {
            self.domain_fault("div", "division by zero".into());
        }
        self.binary(a, b, Op::Div(a.0, b.0), "div", |x, y| x / y)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Min(a.0, b.0), "min", f64::min)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Max(a.0, b.0), "max", f64::max)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a.0), "neg", |x| -x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.0), "exp", f64::exp)
    }

    /// Natural log. Arguments below [`LOG_MIN_ARG`] are a domain fault;
    /// callers clamp beforehand.
    pub fn log(&mut self, a: Var) -> Var {
        if let Some(bad) = self.nodes[a.0].value.iter().find(|&&x| !(x >= LOG_MIN_ARG)) {
            let detail = format!("argument {bad:e} below {LOG_MIN_ARG:e}");
            self.domain_fault("log", detail);
        }
        self.unary(a, Op::Log(a.0), "log", f64::ln)
    }

    pub fn powf(&mut self, a: Var, exponent: f64) -> Var {
        self.unary(a, Op::Powf(a.0, exponent), "pow", |x| x.powf(exponent))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a.0), "tanh", f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a.0), "sigmoid", sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a.0), "softplus", softplus)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a.0, c), "scale", |x| x * c)
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Shift(a.0), "shift", |x| x + c)
    }

    /// `c - a`, elementwise.
    pub fn rsub(&mut self, c: f64, a: Var) -> Var {
        let n = self.neg(a);
        self.shift(n, c)
    }

    /// Clamps elementwise into `[lo, hi]`; the gradient is zero where clamped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let lo = self.scalar_constant(lo);
        let hi = self.scalar_constant(hi);
        let m = self.max(a, lo);
        self.min(m, hi)
    }

    /// `|a|` as `max(a, -a)`.
    pub fn abs(&mut self, a: Var) -> Var {
        let n = self.neg(a);
        self.max(a, n)
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        let rg = self.rg(a);
        self.push(Op::Sum(a.0), vec![s], rg, "sum")
    }

    /// Elementwise sum of equal-width nodes.
    pub fn add_n(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "add_n of nothing");
        let n = self.width(parts[0]);
        let mut value = vec![0.0; n];
        for p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(v.len(), n, "add_n: width mismatch");
            for (acc, x) in value.iter_mut().zip(v) {
                *acc += x;
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::AddN(parts.iter().map(|p| p.0).collect()), value, rg, "add_n")
    }

    /// Row-major matrix-vector contraction: `w` has `rows * width(x)` entries.
    pub fn matvec(&mut self, w: Var, x: Var, rows: usize) -> Var {
        let (vw, vx) = (&self.nodes[w.0].value, &self.nodes[x.0].value);
        let cols = vx.len();
        assert_eq!(vw.len(), rows * cols, "matvec: {} != {rows}x{cols}", vw.len());
        let value = vw
            .chunks_exact(cols)
            .map(|row| row.iter().zip(vx).map(|(a, b)| a * b).sum())
            .collect();
        let rg = self.rg(w) || self.rg(x);
        self.push(Op::MatVec { w: w.0, x: x.0, rows }, value, rg, "matvec")
    }

    /// Inner product of two equal-width nodes.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        self.matvec(a, b, 1)
    }

    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Var {
        let value = self.nodes[src.0].value[start..start + len].to_vec();
        let rg = self.rg(src);
        self.push(Op::Slice { src: src.0, start }, value, rg, "slice")
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut value = Vec::new();
        for p in parts {
            value.extend_from_slice(&self.nodes[p.0].value);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::Concat(parts.iter().map(|p| p.0).collect()), value, rg, "concat")
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        let value = v.iter().map(|x| x - lse).collect();
        let rg = self.rg(a);
        self.push(Op::LogSoftmax(a.0), value, rg, "log_softmax")
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.check()?;
        assert_eq!(self.width(root), 1, "backward root must be scalar");
        let lens: Vec<usize> = self.nodes.iter().map(|n| n.value.len()).collect();
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        grads[root.0] = vec![1.0];

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || grads[idx].is_empty() {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = std::mem::take(&mut grads[idx]);
            let out = &node.value;
            self.propagate(&node.op, &g, out, &lens, &mut grads);
            grads[idx] = g;
        }
        for g in &grads {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients { grads, lens })
    }

    fn propagate(&self, op: &Op, g: &[f64], out: &[f64], lens: &[usize], grads: &mut [Vec<f64>]) {
        let val = |i: usize| &self.nodes[i].value;
        let rg = |i: usize| self.nodes[i].requires_grad;
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (k, &gk) in g.iter().enumerate() {
                    if rg(a) {
                        accumulate(&mut grads[a], lens[a], k, gk);
                    }
                    if rg(b) {
                        accumulate(&mut grads[b], lens[b], k, sign * gk);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                for (k, &gk) in g.iter().enumerate() {
                    if rg(a) {
                        accumulate(&mut grads[a], lens[a], k, gk * bcast(vb, k));
                    }
                    if rg(b) {
                        accumulate(&mut grads[b], lens[b], k, gk * bcast(va, k));
                    }
                }
            }
            Op::Div(a, b) => {
                let vb = val(b);
                for (k, &gk) in g.iter().enumerate() {
                    let d = bcast(vb, k);
                    if rg(a) {
                        accumulate(&mut grads[a], lens[a], k, gk / d);
                    }
                    if rg(b) {
                        accumulate(&mut grads[b], lens[b], k, -gk * out[k] / d);
                    }
                }
            }
            Op::Min(a, b) | Op::Max(a, b) => {
                let is_min = matches!(op, Op::Min(..));
                let (va, vb) = (val(a), val(b));
                for (k, &gk) in g.iter().enumerate() {
                    let (xa, xb) = (bcast(va, k), bcast(vb, k));
                    let pick_a = if is_min { xa <= xb } else { xa >= xb };
                    if pick_a {
                        if rg(a) {
                            accumulate(&mut grads[a], lens[a], k, gk);
                        }
                    } else if rg(b) {
                        accumulate(&mut grads[b], lens[b], k, gk);
                    }
                }
            }
            Op::Neg(a) => self.elementwise(a, g, grads, lens, |_, _, gk| -gk),
            Op::Exp(a) => self.elementwise(a, g, grads, lens, |k, _, gk| gk * out[k]),
            Op::Log(a) => self.elementwise(a, g, grads, lens, |_, x, gk| gk / x),
            Op::Powf(a, c) => {
                self.elementwise(a, g, grads, lens, |_, x, gk| gk * c * x.powf(c - 1.0))
            }
            Op::Tanh(a) => {
                self.elementwise(a, g, grads, lens, |k, _, gk| gk * (1.0 - out[k] * out[k]))
            }
            Op::Sigmoid(a) => {
                self.elementwise(a, g, grads, lens, |k, _, gk| gk * out[k] * (1.0 - out[k]))
            }
            Op::Softplus(a) => self.elementwise(a, g, grads, lens, |_, x, gk| gk * sigmoid(x)),
            Op::Scale(a, c) => self.elementwise(a, g, grads, lens, |_, _, gk| gk * c),
            Op::Shift(a) => self.elementwise(a, g, grads, lens, |_, _, gk| gk),
            Op::Sum(a) => {
                if rg(a) {
                    let slot = &mut grads[a];
                    if slot.is_empty() {
                        *slot = vec![0.0; lens[a]];
                    }
                    slot.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::AddN(ref parts) => {
                for &p in parts {
                    if rg(p) {
                        let slot = &mut grads[p];
                        if slot.is_empty() {
                            *slot = vec![0.0; lens[p]];
                        }
                        slot.iter_mut().zip(g).for_each(|(s, gk)| *s += gk);
                    }
                }
            }
            Op::MatVec { w, x, rows } => {
                let cols = lens[x];
                if rg(w) {
                    let vx = val(x);
                    let slot = &mut grads[w];
                    if slot.is_empty() {
                        *slot = vec![0.0; rows * cols];
                    }
                    for (row, &gr) in slot.chunks_exact_mut(cols).zip(g) {
                        if gr != 0.0 {
                            row.iter_mut().zip(vx).for_each(|(s, xc)| *s += gr * xc);
                        }
                    }
                }
                if rg(x) {
                    let vw = val(w);
                    let slot = &mut grads[x];
                    if slot.is_empty() {
                        *slot = vec![0.0; cols];
                    }
                    for (row, &gr) in vw.chunks_exact(cols).zip(g) {
                        if gr != 0.0 {
                            slot.iter_mut().zip(row).for_each(|(s, wc)| *s += gr * wc);
                        }
                    }
                }
            }
            Op::Slice { src, start } => {
                if rg(src) {
                    let slot = &mut grads[src];
                    if slot.is_empty() {
                        *slot = vec![0.0; lens[src]];
                    }
                    slot[start..start + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(s, gk)| *s += gk);
                }
            }
            Op::Concat(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = lens[p];
                    if rg(p) {
                        let slot = &mut grads[p];
                        if slot.is_empty() {
                            *slot = vec![0.0; n];
                        }
                        slot.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(s, gk)| *s += gk);
                    }
                    offset += n;
                }
            }
            Op::LogSoftmax(a) => {
                if rg(a) {
                    let total: f64 = g.iter().sum();
                    let slot = &mut grads[a];
                    if slot.is_empty() {
                        *slot = vec![0.0; lens[a]];
                    }
                    for (k, s) in slot.iter_mut().enumerate() {
                        *s += g[k] - out[k].exp() * total;
                    }
                }
            }
        }
    }

    fn elementwise(
        &self,
        a: usize,
        g: &[f64],
        grads: &mut [Vec<f64>],
        lens: &[usize],
        f: impl Fn(usize, f64, f64) -> f64,
    ) {
        if !self.nodes[a].requires_grad {
            return;
        }
        let va = &self.nodes[a].value;
        let slot = &mut grads[a];
        if slot.is_empty() {
            *slot = vec![0.0; lens[a]];
        }
        for (k, (s, &gk)) in slot.iter_mut().zip(g).enumerate() {
            *s += f(k, va[k], gk);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.input(vec![3.0]);
        let y = t.mul(x, x);
        let g = t.backward(y).unwrap();
        assert_eq!(t.scalar(y), 9.0);
        assert_eq!(g.wrt(x), vec![6.0]);
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let mut t = Tape::new();
        let x = t.input(vec![0.0]);
        let y = t.sigmoid(x);
        let g = t.backward(y).unwrap();
        assert!((g.wrt(x)[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn log_below_floor_is_a_domain_fault() {
        let mut t = Tape::new();
        let x = t.input(vec![1e-13]);
        let y = t.log(x);
        assert!(matches!(t.check(), Err(Error::Domain { op: "log", .. })));
        assert!(t.backward(y).is_err());
    }

    #[test]
    fn overflow_is_reported() {
        let mut t = Tape::new();
        let x = t.input(vec![1000.0]);
        t.exp(x);
        assert!(matches!(t.check(), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn division_by_zero_is_rejected() {
        let mut t = Tape::new();
        let x = t.input(vec![1.0]);
        let z = t.constant(vec![0.0]);
        t.div(x, z);
        assert!(t.check().is_err());
    }

    #[test]
    fn broadcast_gradient_sums() {
        let mut t = Tape::new();
        let v = t.input(vec![1.0, 2.0, 3.0]);
        let s = t.input(vec![2.0]);
        let p = t.mul(v, s);
        let y = t.sum(p);
        let g = t.backward(y).unwrap();
        assert_eq!(t.scalar(y), 12.0);
        assert_eq!(g.wrt(s), vec![6.0]);
        assert_eq!(g.wrt(v), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn matvec_gradients() {
        let mut t = Tape::new();
        let w = t.input(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = t.input(vec![1.0, -1.0, 2.0]);
        let y = t.matvec(w, x, 2);
        assert_eq!(t.value(y), &[5.0, 11.0]);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x), vec![5.0, 7.0, 9.0]);
        assert_eq!(g.wrt(w), vec![1.0, -1.0, 2.0, 1.0, -1.0, 2.0]);
    }

    #[test]
    fn log_softmax_normalizes() {
        let mut t = Tape::new();
        let x = t.input(vec![0.3, -1.2, 2.0]);
        let y = t.log_softmax(x);
        let total: f64 = t.value(y).iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(vec![4.0]);
        let x = t.input(vec![2.0]);
        let y = t.mul(c, x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(c), vec![0.0]);
        assert_eq!(g.wrt(x), vec![4.0]);
    }
}
