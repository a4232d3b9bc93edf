//! Symbolic scalar expressions over named parameters.
//!
//! An [`Expr`] is compiled onto a [`Tape`] by [`evaluate`]; each parameter
//! group it references is bound once as a differentiable leaf, so
//! [`Evaluation::gradient`] returns a full array per referenced group.

use std::collections::BTreeMap;
use std::ops;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Const(f64),
    /// Element `index` of parameter group `name`.
    Param { name: String, index: usize },
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    Exp(Box<Expr>),
    Log(Box<Expr>),
    Pow(Box<Expr>, f64),
    Tanh(Box<Expr>),
    Sigmoid(Box<Expr>),
    Softplus(Box<Expr>),
    Min(Box<Expr>, Box<Expr>),
    Max(Box<Expr>, Box<Expr>),
    Sum(Vec<Expr>),
    /// Contraction `sum_i lhs[i] * rhs[i]`.
    Dot(Vec<Expr>, Vec<Expr>),
}

impl Expr {
    pub fn param(name: &str, index: usize) -> Self {
        Expr::Param {
            name: name.to_string(),
            index,
        }
    }

    pub fn exp(self) -> Self {
        Expr::Exp(Box::new(self))
    }

    pub fn log(self) -> Self {
        Expr::Log(Box::new(self))
    }

    pub fn pow(self, e: f64) -> Self {
        Expr::Pow(Box::new(self), e)
    }

    pub fn tanh(self) -> Self {
        Expr::Tanh(Box::new(self))
    }

    pub fn sigmoid(self) -> Self {
        Expr::Sigmoid(Box::new(self))
    }

    pub fn softplus(self) -> Self {
        Expr::Softplus(Box::new(self))
    }

    pub fn min(self, other: Expr) -> Self {
        Expr::Min(Box::new(self), Box::new(other))
    }

    pub fn max(self, other: Expr) -> Self {
        Expr::Max(Box::new(self), Box::new(other))
    }

    /// Number of nodes in the tree.
    pub fn size(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Param { .. } => 1,
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Min(a, b)
            | Expr::Max(a, b) => 1 + a.size() + b.size(),
            Expr::Neg(a)
            | Expr::Exp(a)
            | Expr::Log(a)
            | Expr::Pow(a, _)
            | Expr::Tanh(a)
            | Expr::Sigmoid(a)
            | Expr::Softplus(a) => 1 + a.size(),
            Expr::Sum(xs) => 1 + xs.iter().map(Expr::size).sum::<usize>(),
            Expr::Dot(xs, ys) => 1 + xs.iter().chain(ys).map(Expr::size).sum::<usize>(),
        }
    }
}

macro_rules! binop {
    ($tr:ident, $method:ident, $variant:ident) => {
        impl ops::$tr for Expr {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                Expr::$variant(Box::new(self), Box::new(rhs))
            }
        }
    };
}
binop!(Add, add, Add);
binop!(Sub, sub, Sub);
binop!(Mul, mul, Mul);
binop!(Div, div, Div);

impl ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::Neg(Box::new(self))
    }
}

/// A compiled, evaluated expression ready for a reverse sweep.
#[derive(Debug)]
pub struct Evaluation {
    tape: Tape,
    root: Var,
    bindings: Vec<(String, Var)>,
}

impl Evaluation {
    pub fn value(&self) -> f64 {
        self.tape.scalar(self.root)
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// `d root / d p` for every parameter group the expression references.
    pub fn gradient(&self) -> Result<BTreeMap<String, Vec<f64>>> {
        let mut grads = self.tape.backward(self.root)?;
        Ok(self
            .bindings
            .iter()
            .map(|(name, var)| (name.clone(), grads.take(*var)))
            .collect())
    }
}

struct Compiler<'a> {
    tape: Tape,
    params: &'a ParamStore,
    bound: BTreeMap<String, Var>,
}

impl Compiler<'_> {
    fn group(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let data = self
            .params
            .data(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?
            .to_vec();
        let v = self.tape.input(data);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    fn compile(&mut self, e: &Expr) -> Result<Var> {
        let t = |c: &mut Self, x: &Expr| c.compile(x);
        Ok(match e {
            Expr::Const(c) => self.tape.scalar_constant(*c),
            Expr::Param { name, index } => {
                let g = self.group(name)?;
                if *index >= self.tape.width(g) {
                    return Err(Error::UnknownParam(format!("{name}[{index}]")));
                }
                self.tape.slice(g, *index, 1)
            }
            Expr::Add(a, b) => {
                let (a, b) = (t(self, a)?, t(self, b)?);
                self.tape.add(a, b)
            }
            Expr::Sub(a, b) => {
                let (a, b) = (t(self, a)?, t(self, b)?);
                self.tape.sub(a, b)
            }
            Expr::Mul(a, b) => {
                let (a, b) = (t(self, a)?, t(self, b)?);
                self.tape.mul(a, b)
            }
            Expr::Div(a, b) => {
                let (a, b) = (t(self, a)?, t(self, b)?);
                self.tape.div(a, b)
            }
            Expr::Min(a, b) => {
                let (a, b) = (t(self, a)?, t(self, b)?);
                self.tape.min(a, b)
            }
            Expr::Max(a, b) => {
                let (a, b) = (t(self, a)?, t(self, b)?);
                self.tape.max(a, b)
            }
            Expr::Neg(a) => {
                let a = t(self, a)?;
                self.tape.neg(a)
            }
            Expr::Exp(a) => {
                let a = t(self, a)?;
                self.tape.exp(a)
            }
            Expr::Log(a) => {
                let a = t(self, a)?;
                self.tape.log(a)
            }
            Expr::Pow(a, p) => {
                let a = t(self, a)?;
                self.tape.powf(a, *p)
            }
            Expr::Tanh(a) => {
                let a = t(self, a)?;
                self.tape.tanh(a)
            }
            Expr::Sigmoid(a) => {
                let a = t(self, a)?;
                self.tape.sigmoid(a)
            }
            Expr::Softplus(a) => {
                let a = t(self, a)?;
                self.tape.softplus(a)
            }
            Expr::Sum(xs) => {
                if xs.is_empty() {
                    self.tape.scalar_constant(0.0)
                } else {
                    let parts = xs.iter().map(|x| t(self, x)).collect::<Result<Vec<_>>>()?;
                    let v = self.tape.concat(&parts);
                    self.tape.sum(v)
                }
            }
            Expr::Dot(xs, ys) => {
                if xs.len() != ys.len() {
                    return Err(Error::LengthMismatch {
                        expected: xs.len(),
                        actual: ys.len(),
                    });
                }
                if xs.is_empty() {
                    self.tape.scalar_constant(0.0)
                } else {
                    let a = xs.iter().map(|x| t(self, x)).collect::<Result<Vec<_>>>()?;
                    let b = ys.iter().map(|x| t(self, x)).collect::<Result<Vec<_>>>()?;
                    let (a, b) = (self.tape.concat(&a), self.tape.concat(&b));
                    self.tape.dot(a, b)
                }
            }
        })
    }
}

/// Forward evaluation. Fails with `UnknownParam` for unresolved references
/// and `NonFinite`/`Domain` when any intermediate leaves the finite range.
pub fn evaluate(expr: &Expr, params: &ParamStore) -> Result<Evaluation> {
    let mut c = Compiler {
        tape: Tape::new(),
        params,
        bound: BTreeMap::new(),
    };
    let root = c.compile(expr)?;
    c.tape.check()?;
    Ok(Evaluation {
        tape: c.tape,
        root,
        bindings: c.bound.into_iter().collect(),
    })
}

/// Gradient of `expr` with respect to every parameter group in `params`.
/// Groups the expression never touches get all-zero arrays.
pub fn gradient(expr: &Expr, params: &ParamStore) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out = evaluate(expr, params)?.gradient()?;
    for name in params.names() {
        out.entry(name.to_string())
            .or_insert_with(|| vec![0.0; params.data(name).map_or(0, <[f64]>::len)]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(x: f64) -> ParamStore {
        let mut p = ParamStore::new(0);
        p.insert("x", vec![1], vec![x]).unwrap();
        p
    }

    #[test]
    fn log_exp_inverse() {
        let e = Expr::Const(1.0).exp().log();
        let v = evaluate(&e, &ParamStore::new(0)).unwrap().value();
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softplus_zero_is_ln2() {
        let v = evaluate(&Expr::Const(0.0).softplus(), &ParamStore::new(0))
            .unwrap()
            .value();
        assert!((v - 0.6931).abs() < 1e-4);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn square_derivative() {
        let x = Expr::param("x", 0);
        let g = gradient(&(x.clone() * x), &store(3.0)).unwrap();
        assert_eq!(g["x"], vec![6.0]);
    }

    #[test]
    fn sigmoid_derivative() {
        let g = gradient(&Expr::param("x", 0).sigmoid(), &store(0.0)).unwrap();
        assert_eq!(g["x"], vec![0.25]);
    }

    #[test]
    fn unknown_param_is_reported() {
        let err = evaluate(&Expr::param("w", 0), &store(1.0)).unwrap_err();
        assert!(matches!(err, Error::UnknownParam(name) if name == "w"));
        let err = evaluate(&Expr::param("x", 4), &store(1.0)).unwrap_err();
        assert!(matches!(err, Error::UnknownParam(_)));
    }

    #[test]
    fn non_finite_is_reported() {
        let e = Expr::Const(800.0).exp();
        assert!(matches!(
            evaluate(&e, &ParamStore::new(0)),
            Err(Error::NonFinite { .. })
        ));
        let e = Expr::Const(-1.0).log();
        assert!(matches!(
            evaluate(&e, &ParamStore::new(0)),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn dot_contraction() {
        let mut p = ParamStore::new(0);
        p.insert("w", vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let e = Expr::Dot(
            (0..3).map(|i| Expr::param("w", i)).collect(),
            vec![Expr::Const(4.0), Expr::Const(5.0), Expr::Const(6.0)],
        );
        let ev = evaluate(&e, &p).unwrap();
        assert_eq!(ev.value(), 32.0);
        assert_eq!(ev.gradient().unwrap()["w"], vec![4.0, 5.0, 6.0]);
    }
}
