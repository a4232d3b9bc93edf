use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FRCK";
const VERSION: u32 = 1;

/// Gradients keyed by parameter group name.
pub type GradMap = BTreeMap<String, Vec<f64>>;

#[derive(Clone, Debug, PartialEq)]
struct Group {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Named parameter arrays plus their adaptive-moment state.
///
/// Groups keep insertion order, which fixes the iteration order used by
/// gradient reduction and checkpoint serialization.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    groups: Vec<Group>,
    index: BTreeMap<String, usize>,
    step: u64,
    seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    Sgd {
        lr: f64,
    },
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::adam(1e-3)
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            groups: Vec::new(),
            index: BTreeMap::new(),
            step: 0,
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "`{name}`: shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        self.index.insert(name.to_string(), self.groups.len());
        self.groups.push(Group {
            name: name.to_string(),
            shape,
            m: vec![0.0; n],
            v: vec![0.0; n],
            data,
        });
        Ok(())
    }

    /// Inserts a group drawn uniformly from `[-scale, scale]`.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        scale: f64,
        rng: &mut R,
    ) -> Result<()> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-scale..=scale)).collect();
        self.insert(name, shape, data)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.groups.iter().map(|g| g.name.as_str())
    }

    pub fn data(&self, name: &str) -> Option<&[f64]> {
        self.index.get(name).map(|&i| self.groups[i].data.as_slice())
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.index.get(name).map(|&i| self.groups[i].shape.as_slice())
    }

    /// Overwrites the values of an existing group; the shape is fixed.
    pub fn set(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let g = &mut self.groups[i];
        if g.data.len() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "`{name}`: expected {} values, got {}",
                g.data.len(),
                data.len()
            )));
        }
        g.data = data;
        Ok(())
    }

    /// Zero-filled gradient map with this store's keys and sizes.
    pub fn zero_grads(&self) -> GradMap {
        self.groups
            .iter()
            .map(|g| (g.name.clone(), vec![0.0; g.data.len()]))
            .collect()
    }

    fn check_grads(&self, grads: &GradMap) -> Result<()> {
        if grads.len() != self.groups.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} gradient groups for {} parameter groups",
                grads.len(),
                self.groups.len()
            )));
        }
        for g in &self.groups {
            match grads.get(&g.name) {
                None => return Err(Error::ShapeMismatch(format!("no gradient for `{}`", g.name))),
                Some(v) if v.len() != g.data.len() => {
                    return Err(Error::ShapeMismatch(format!(
                        "`{}`: gradient has {} values, parameter has {}",
                        g.name,
                        v.len(),
                        g.data.len()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// One optimizer step. Increments the step counter.
    pub fn apply(&mut self, grads: &GradMap, opt: &Optimizer) -> Result<()> {
        self.check_grads(grads)?;
        self.step += 1;
        match *opt {
            Optimizer::Sgd { lr } => {
                for g in &mut self.groups {
                    for (p, d) in g.data.iter_mut().zip(&grads[&g.name]) {
                        *p -= lr * d;
                    }
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for g in &mut self.groups {
                    let grad = &grads[&g.name];
                    for k in 0..g.data.len() {
                        let d = grad[k];
                        g.m[k] = beta1 * g.m[k] + (1.0 - beta1) * d;
                        g.v[k] = beta2 * g.v[k] + (1.0 - beta2) * d * d;
                        let mhat = g.m[k] / c1;
                        let vhat = g.v[k] / c2;
                        g.data[k] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for g in &self.groups {
            w.write_all(&(g.name.len() as u64).to_le_bytes())?;
            w.write_all(g.name.as_bytes())?;
            w.write_all(&(g.shape.len() as u64).to_le_bytes())?;
            for &d in &g.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in &g.data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    /// Reads a checkpoint. Optimizer moments start at zero.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_checkpoint_bytes(&bytes)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut store = ParamStore::new(0);
        while cur.pos < bytes.len() {
            let name_len = cur.u64()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|e| Error::Checkpoint(format!("group name: {e}")))?
                .to_string();
            let rank = cur.u64()? as usize;
            let shape = (0..rank)
                .map(|_| cur.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| cur.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())))
                .collect::<Result<Vec<_>>>()?;
            store
                .insert(&name, shape, data)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(store)
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.checkpoint_bytes()))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Adaptive-moment update with explicit hyperparameters.
pub fn sgd_adam_step(
    params: &mut ParamStore,
    grads: &GradMap,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    params.apply(
        grads,
        &Optimizer::Adam {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps,
        },
    )
}
