use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gates::{on_tape, GateVector, KumaGate, Stretch};
use crate::numerics::{GradMap, ParamStore, Tape, Var};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;

/// Token vocabulary with reserved `<pad>` and `<unk>` entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        v.insert("<pad>");
        v.insert("<unk>");
        v
    }
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a token if absent and returns its id.
    pub fn insert(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.ids.insert(token.to_string(), id);
        id
    }

    /// Id of `token`, or `UNK`.
    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &str)> {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (i as u32, t.as_str()))
    }
}

/// A tokenized input with its task and bias labels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub id: u64,
    pub tokens: Vec<u32>,
    pub task_label: usize,
    pub bias_label: usize,
}

impl Example {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub emb_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub stretch: Stretch,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, classes: usize) -> Self {
        Self {
            vocab_size,
            emb_dim: 16,
            hidden: 32,
            classes,
            stretch: Stretch::default(),
        }
    }
}

/// Extractor raw-output bias for the first shape parameter. Together with
/// `B_INIT_BIAS` it starts every gate at `P(z != 0) = 0.5` (b = 1, t0^a = 0.5).
fn initial_head_bias(stretch: Stretch) -> (f64, f64) {
    let t0 = -stretch.low / (stretch.high - stretch.low);
    let a = 0.5f64.ln() / t0.ln();
    let inv_softplus = |y: f64| y.exp_m1().ln();
    (inv_softplus(a), inv_softplus(1.0))
}

struct LstmVars {
    wx: Var,
    wh: Var,
    b: Var,
}

/// Parameter groups of one model bound onto a tape.
pub(crate) struct Bound {
    emb: Var,
    ext_fwd: LstmVars,
    ext_bwd: LstmVars,
    head_wa: Var,
    head_ba: Var,
    head_wb: Var,
    head_bb: Var,
    enc_fwd: LstmVars,
    enc_bwd: LstmVars,
    out_w: Var,
    out_b: Var,
    names: Vec<(String, Var)>,
}

impl Bound {
    /// Collects parameter gradients after a reverse sweep from `root`.
    pub(crate) fn gradients(&self, tape: &Tape, root: Var) -> Result<GradMap> {
        let mut g = tape.backward(root)?;
        Ok(self
            .names
            .iter()
            .map(|(name, v)| (name.clone(), g.take(*v)))
            .collect())
    }
}

/// One rationale extraction framework: an extractor that turns tokens into
/// gate distributions and an encoder that classifies the gated input. Both
/// read the same embedding table.
#[derive(Clone, Debug, PartialEq)]
pub struct RefModel {
    config: ModelConfig,
    params: ParamStore,
}

const LSTM_PREFIXES: [&str; 4] = ["extractor.fwd", "extractor.bwd", "encoder.fwd", "encoder.bwd"];

impl RefModel {
    /// Randomly initialized model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.vocab_size < 2 || config.classes < 1 || config.emb_dim == 0 || config.hidden == 0
        {
            return Err(Error::InvalidConfig(format!("bad model dimensions {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new(seed);
        let (d, h) = (config.emb_dim, config.hidden);
        p.insert_uniform("embedding", vec![config.vocab_size, d], 1.0, &mut rng)?;
        let scale = 1.0 / (h as f64).sqrt();
        for (k, prefix) in LSTM_PREFIXES.iter().enumerate() {
            if k == 2 {
                let s = 1.0 / (2.0 * h as f64).sqrt();
                let (ba, bb) = initial_head_bias(config.stretch);
                p.insert_uniform("extractor.head.wa", vec![2 * h], s, &mut rng)?;
                p.insert("extractor.head.ba", vec![1], vec![ba])?;
                p.insert_uniform("extractor.head.wb", vec![2 * h], s, &mut rng)?;
                p.insert("extractor.head.bb", vec![1], vec![bb])?;
            }
            p.insert_uniform(&format!("{prefix}.wx"), vec![4 * h, d], scale, &mut rng)?;
            p.insert_uniform(&format!("{prefix}.wh"), vec![4 * h, h], scale, &mut rng)?;
            // forget-gate bias starts at 1
            let bias = (0..4 * h).map(|i| if (h..2 * h).contains(&i) { 1.0 } else { 0.0 });
            p.insert(&format!("{prefix}.b"), vec![4 * h], bias.collect())?;
        }
        p.insert("encoder.out.w", vec![config.classes, 2 * h], vec![0.0; config.classes * 2 * h])?;
        p.insert("encoder.out.b", vec![config.classes], vec![0.0; config.classes])?;
        Ok(Self { config, params: p })
    }

    /// Rebuilds a model from checkpointed parameters, inferring dimensions
    /// from the stored shapes.
    pub fn from_params(params: ParamStore) -> Result<Self> {
        let shape = |name: &str| {
            params
                .shape(name)
                .map(<[usize]>::to_vec)
                .ok_or_else(|| Error::Checkpoint(format!("missing group `{name}`")))
        };
        let emb = shape("embedding")?;
        let out = shape("encoder.out.w")?;
        let wh = shape("encoder.fwd.wh")?;
        if emb.len() != 2 || out.len() != 2 || wh.len() != 2 {
            return Err(Error::Checkpoint("unexpected parameter ranks".into()));
        }
        let config = ModelConfig {
            vocab_size: emb[0],
            emb_dim: emb[1],
            hidden: wh[1],
            classes: out[0],
            stretch: Stretch::default(),
        };
        let reference = RefModel::new(config, 0)?;
        for name in reference.params.names() {
            if params.shape(name) != reference.params.shape(name) {
                return Err(Error::Checkpoint(format!("group `{name}` has the wrong shape")));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Checkpoint("unexpected extra parameter groups".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    /// Overwrites embedding rows from a text file of `token v1 ... vd` lines.
    /// Tokens missing from `vocab` are skipped. Returns the number of rows set.
    pub fn load_embeddings(&mut self, path: &Path, vocab: &Vocab) -> Result<usize> {
        let text = std::fs::read_to_string(path)?;
        let d = self.config.emb_dim;
        let mut table = self.params.data("embedding").unwrap().to_vec();
        let mut hits = 0;
        for (line_no, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let values = parts
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    line: line_no + 1,
                    detail: e.to_string(),
                })?;
            if values.len() != d {
                return Err(Error::Parse {
                    line: line_no + 1,
                    detail: format!("expected {d} values, found {}", values.len()),
                });
            }
            let id = vocab.id(token);
            if id == UNK && token != "<unk>" {
                continue;
            }
            let row = id as usize * d;
            table[row..row + d].copy_from_slice(&values);
            hits += 1;
        }
        self.params.set("embedding", table)?;
        Ok(hits)
    }

    pub(crate) fn bind(&self, tape: &mut Tape, differentiable: bool) -> Bound {
        let mut names = Vec::with_capacity(self.params.len());
        let mut get = |tape: &mut Tape, name: &str| {
            let data = self.params.data(name).expect("model parameter").to_vec();
            let v = if differentiable {
                tape.input(data)
            } else {
                tape.constant(data)
            };
            names.push((name.to_string(), v));
            v
        };
        let mut lstm = |tape: &mut Tape, prefix: &str| LstmVars {
            wx: get(tape, &format!("{prefix}.wx")),
            wh: get(tape, &format!("{prefix}.wh")),
            b: get(tape, &format!("{prefix}.b")),
        };
        let ext_fwd = lstm(tape, "extractor.fwd");
        let ext_bwd = lstm(tape, "extractor.bwd");
        let enc_fwd = lstm(tape, "encoder.fwd");
        let enc_bwd = lstm(tape, "encoder.bwd");
        drop(lstm);
        let emb = get(tape, "embedding");
        let head_wa = get(tape, "extractor.head.wa");
        let head_ba = get(tape, "extractor.head.ba");
        let head_wb = get(tape, "extractor.head.wb");
        let head_bb = get(tape, "extractor.head.bb");
        let out_w = get(tape, "encoder.out.w");
        let out_b = get(tape, "encoder.out.b");
        Bound {
            emb,
            ext_fwd,
            ext_bwd,
            head_wa,
            head_ba,
            head_wb,
            head_bb,
            enc_fwd,
            enc_bwd,
            out_w,
            out_b,
            names,
        }
    }

    pub(crate) fn embed(&self, tape: &mut Tape, bound: &Bound, ex: &Example) -> Result<Vec<Var>> {
        if ex.tokens.is_empty() {
            return Err(Error::EmptyInput);
        }
        let d = self.config.emb_dim;
        ex.tokens
            .iter()
            .map(|&tok| {
                if tok as usize >= self.config.vocab_size {
                    return Err(Error::Domain {
                        op: "embed",
                        detail: format!("token id {tok} outside vocabulary"),
                    });
                }
                Ok(tape.slice(bound.emb, tok as usize * d, d))
            })
            .collect()
    }

    fn lstm(&self, tape: &mut Tape, p: &LstmVars, xs: &[Var], reverse: bool) -> Vec<Var> {
        let h = self.config.hidden;
        let mut out = vec![None; xs.len()];
        let mut state: Option<(Var, Var)> = None;
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..xs.len()).rev())
        } else {
            Box::new(0..xs.len())
        };
        for t in order {
            let gx = tape.matvec(p.wx, xs[t], 4 * h);
            let pre = match state {
                Some((hp, _)) => {
                    let gh = tape.matvec(p.wh, hp, 4 * h);
                    tape.add_n(&[gx, gh, p.b])
                }
                None => tape.add(gx, p.b),
            };
            let i = tape.slice(pre, 0, h);
            let i = tape.sigmoid(i);
            let g = tape.slice(pre, 2 * h, h);
            let g = tape.tanh(g);
            let o = tape.slice(pre, 3 * h, h);
            let o = tape.sigmoid(o);
            let ig = tape.mul(i, g);
            let c = match state {
                Some((_, cp)) => {
                    let f = tape.slice(pre, h, h);
                    let f = tape.sigmoid(f);
                    let fc = tape.mul(f, cp);
                    tape.add(fc, ig)
                }
                None => ig,
            };
            let tc = tape.tanh(c);
            let hn = tape.mul(o, tc);
            state = Some((hn, c));
            out[t] = Some(hn);
        }
        out.into_iter().map(|v| v.expect("every step visited")).collect()
    }

    fn bilstm(&self, tape: &mut Tape, fwd: &LstmVars, bwd: &LstmVars, xs: &[Var]) -> Vec<Var> {
        let f = self.lstm(tape, fwd, xs, false);
        let b = self.lstm(tape, bwd, xs, true);
        f.into_iter()
            .zip(b)
            .map(|(f, b)| tape.concat(&[f, b]))
            .collect()
    }

    /// Per-token shape vectors `(a, b)`, each of width `n`.
    pub(crate) fn gate_shapes(&self, tape: &mut Tape, bound: &Bound, xs: &[Var]) -> (Var, Var) {
        let states = self.bilstm(tape, &bound.ext_fwd, &bound.ext_bwd, xs);
        let stacked = tape.concat(&states);
        let n = xs.len();
        let ra = tape.matvec(stacked, bound.head_wa, n);
        let ra = tape.add(ra, bound.head_ba);
        let rb = tape.matvec(stacked, bound.head_wb, n);
        let rb = tape.add(rb, bound.head_bb);
        (on_tape::shapes(tape, ra), on_tape::shapes(tape, rb))
    }

    /// Log class probabilities for the input scaled tokenwise by `z`.
    pub(crate) fn encode(&self, tape: &mut Tape, bound: &Bound, xs: &[Var], z: Var) -> Var {
        let gated: Vec<Var> = xs
            .iter()
            .enumerate()
            .map(|(t, &x)| {
                let zt = tape.slice(z, t, 1);
                tape.mul(x, zt)
            })
            .collect();
        let states = self.bilstm(tape, &bound.enc_fwd, &bound.enc_bwd, &gated);
        let total = tape.add_n(&states);
        let pooled = tape.scale(total, 1.0 / xs.len() as f64);
        let logits = tape.matvec(bound.out_w, pooled, self.config.classes);
        let logits = tape.add(logits, bound.out_b);
        tape.log_softmax(logits)
    }

    /// Gate distributions for every token of `ex`.
    pub fn extract_gates(&self, ex: &Example) -> Result<GateVector> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xs = self.embed(&mut tape, &bound, ex)?;
        let (a, b) = self.gate_shapes(&mut tape, &bound, &xs);
        tape.check()?;
        let gates = tape
            .value(a)
            .iter()
            .zip(tape.value(b))
            .map(|(&a, &b)| KumaGate::with_stretch(a, b, self.config.stretch))
            .collect();
        Ok(GateVector::new(gates))
    }

    /// Class probabilities for `ex` with token embeddings scaled by `z`.
    pub fn classify(&self, ex: &Example, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != ex.len() {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} entries for {} tokens",
                z.len(),
                ex.len()
            )));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xs = self.embed(&mut tape, &bound, ex)?;
        let z = tape.constant(z.to_vec());
        let lp = self.encode(&mut tape, &bound, &xs, z);
        tape.check()?;
        Ok(tape.value(lp).iter().map(|v| v.exp()).collect())
    }

    /// Test-time prediction: deterministic gates, then classification of
    /// the masked input.
    pub fn predict(&self, ex: &Example) -> Result<Prediction> {
        let gates = self.extract_gates(ex)?;
        let mask = gates.deterministic_mask();
        let z: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let probs = self.classify(ex, &z)?;
        Ok(Prediction {
            label: argmax(&probs),
            probs,
            mask,
            gates,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub label: usize,
    pub probs: Vec<f64>,
    pub mask: Vec<bool>,
    pub gates: GateVector,
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
