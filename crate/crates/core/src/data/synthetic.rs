use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};
use crate::rationale::{Example, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Regime {
    /// Every class has clean TASK carriers and entangled carriers.
    Redundant,
    /// Designated classes are signalled only by entangled tokens.
    Necessary,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Redundant => "redundant",
            Regime::Necessary => "necessary",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "redundant" => Ok(Regime::Redundant),
            "necessary" => Ok(Regime::Necessary),
            _ => Err(Error::InvalidConfig(format!("unknown regime `{s}`"))),
        }
    }
}

/// Ground-truth role of a vocabulary entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TokenRole {
    Task(usize),
    Bias(usize),
    Ent(usize, usize),
    Neut,
}

impl TokenRole {
    pub fn name(self) -> &'static str {
        match self {
            TokenRole::Task(_) => "TASK",
            TokenRole::Bias(_) => "BIAS",
            TokenRole::Ent(..) => "ENT",
            TokenRole::Neut => "NEUT",
        }
    }

    pub fn task_class(self) -> Option<usize> {
        match self {
            TokenRole::Task(k) | TokenRole::Ent(k, _) => Some(k),
            _ => None,
        }
    }

    pub fn bias_group(self) -> Option<usize> {
        match self {
            TokenRole::Bias(g) | TokenRole::Ent(_, g) => Some(g),
            _ => None,
        }
    }
}

impl fmt::Display for TokenRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Role of every token id; special ids map to `None`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenRoleTable {
    roles: Vec<Option<TokenRole>>,
}

impl TokenRoleTable {
    pub fn role(&self, id: u32) -> Option<TokenRole> {
        self.roles.get(id as usize).copied().flatten()
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub(crate) fn push(&mut self, role: Option<TokenRole>) {
        self.roles.push(role);
    }

    /// CSV with header `token,role,task_class,bias_group`; empty cells for
    /// absent components.
    pub fn to_csv(&self, vocab: &Vocab) -> String {
        let mut out = String::from("token,role,task_class,bias_group\n");
        for (id, tok) in vocab.iter() {
            let Some(role) = self.role(id) else { continue };
            let opt = |v: Option<usize>| v.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{tok},{},{},{}\n",
                role.name(),
                opt(role.task_class()),
                opt(role.bias_group())
            ));
        }
        out
    }

    pub fn from_csv(text: &str, vocab: &Vocab) -> Result<Self> {
        let mut table = Self {
            roles: vec![None; vocab.len()],
        };
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            let bad = |detail: String| Error::Parse { line: i + 1, detail };
            if cols.len() != 4 {
                return Err(bad(format!("expected 4 columns, found {}", cols.len())));
            }
            let num = |s: &str| -> Result<usize> {
                s.parse().map_err(|_| bad(format!("bad number `{s}`")))
            };
            let role = match cols[1] {
                "TASK" => TokenRole::Task(num(cols[2])?),
                "BIAS" => TokenRole::Bias(num(cols[3])?),
                "ENT" => TokenRole::Ent(num(cols[2])?, num(cols[3])?),
                "NEUT" => TokenRole::Neut,
                other => return Err(bad(format!("unknown role `{other}`"))),
            };
            let id = vocab.id(cols[0]);
            if vocab.token(id) != Some(cols[0]) {
                return Err(bad(format!("token `{}` not in vocabulary", cols[0])));
            }
            table.roles[id as usize] = Some(role);
        }
        Ok(table)
    }
}

/// Parameters of a planted-signal corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub n_examples: usize,
    pub seq_len: (usize, usize),
    pub task_classes: usize,
    pub bias_groups: usize,
    /// Distinct TASK tokens per task class.
    pub task_vocab: usize,
    /// Distinct BIAS tokens per bias group.
    pub bias_vocab: usize,
    /// Distinct ENT tokens per (task class, bias group) pair.
    pub ent_vocab: usize,
    pub neut_vocab: usize,
    /// TASK tokens inserted per example.
    pub task_carriers: usize,
    /// ENT tokens inserted per example.
    pub ent_carriers: usize,
    /// BIAS tokens inserted per example.
    pub bias_carriers: usize,
    pub regime: Regime,
    /// Classes carried only by ENT tokens in the necessary regime.
    pub designated: Vec<usize>,
    /// Mean probability that a TASK or ENT carrier's class is replaced by a
    /// different one. ENT tokens keep their bias group.
    pub noise_rate: f64,
    /// Probability that a BIAS carrier's group is replaced.
    pub bias_noise_rate: f64,
    /// Spread of per-token corruption rates among the TASK tokens of a
    /// class, in `[0, 1]`. TASK token `j` of `V` is corrupted at rate
    /// `noise_rate * (1 + spread * (2j / (V - 1) - 1))`, so lower indices
    /// are more reliable and the mean stays `noise_rate`.
    pub reliability_spread: f64,
    /// Replace bias labels by independent draws after generation.
    pub shuffle_bias_labels: bool,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_examples: 1429,
            seq_len: (19, 21),
            task_classes: 2,
            bias_groups: 2,
            task_vocab: 4,
            bias_vocab: 4,
            ent_vocab: 2,
            neut_vocab: 8,
            task_carriers: 9,
            ent_carriers: 1,
            bias_carriers: 9,
            regime: Regime::Redundant,
            designated: vec![0],
            noise_rate: 0.35,
            bias_noise_rate: 0.25,
            reliability_spread: 0.3,
            shuffle_bias_labels: false,
            seed: 7,
        }
    }
}

impl CorpusSpec {
    /// Four task classes carried only by ENT tokens.
    pub fn necessary() -> Self {
        Self {
            task_classes: 4,
            regime: Regime::Necessary,
            designated: vec![0, 1, 2, 3],
            ent_carriers: 3,
            noise_rate: 0.2,
            ..Self::default()
        }
    }

    /// Signal-bearing tokens every example must hold.
    pub fn required_carriers(&self) -> usize {
        let all_designated = (0..self.task_classes).all(|k| self.is_designated(k));
        let task = if all_designated { 0 } else { self.task_carriers };
        task + self.ent_carriers + self.bias_carriers
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InfeasibleSpec(m));
        if self.n_examples < 3 {
            return bad("need at least 3 examples for a three-way split".into());
        }
        if self.task_classes < 2 || self.bias_groups < 2 {
            return bad("need at least two task classes and two bias groups".into());
        }
        let (lo, hi) = self.seq_len;
        if lo == 0 || lo > hi {
            return bad(format!("invalid length range [{lo}, {hi}]"));
        }
        let need = self.required_carriers();
        if need > lo {
            return bad(format!("{need} carriers do not fit in sequences of length {lo}"));
        }
        if self.bias_carriers == 0 && self.ent_carriers == 0 {
            return bad("bias groups need at least one carrier".into());
        }
        if self.task_vocab == 0 && self.task_carriers > 0 {
            return bad("TASK carriers require TASK tokens".into());
        }
        if self.bias_vocab == 0 && self.bias_carriers > 0 {
            return bad("BIAS carriers require BIAS tokens".into());
        }
        if self.ent_vocab == 0 && self.ent_carriers > 0 {
            return bad("ENT carriers require ENT tokens".into());
        }
        if self.neut_vocab == 0 && hi > need {
            return bad("NEUT fill requires NEUT tokens".into());
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return bad(format!("noise rate {} outside [0, 1)", self.noise_rate));
        }
        if !(0.0..1.0).contains(&self.bias_noise_rate) {
            return bad(format!("bias noise rate {} outside [0, 1)", self.bias_noise_rate));
        }
        if !(0.0..=1.0).contains(&self.reliability_spread) {
            return bad(format!("reliability spread {} outside [0, 1]", self.reliability_spread));
        }
        if self.noise_rate * (1.0 + self.reliability_spread) >= 1.0 {
            return bad("least reliable TASK token would always be corrupted".into());
        }
        match self.regime {
            Regime::Redundant => {
                if self.task_carriers == 0 || self.ent_carriers == 0 {
                    return bad("redundant regime needs TASK and ENT carriers".into());
                }
            }
            Regime::Necessary => {
                if self.ent_carriers == 0 {
                    return bad("necessary regime needs ENT carriers".into());
                }
                if self.designated.is_empty() {
                    return bad("necessary regime needs designated classes".into());
                }
                if let Some(&k) = self.designated.iter().find(|&&k| k >= self.task_classes) {
                    return bad(format!("designated class {k} out of range"));
                }
                let all = self.designated.iter().collect::<BTreeSet<_>>().len();
                if all < self.task_classes && self.task_carriers == 0 {
                    return bad("non-designated classes need TASK carriers".into());
                }
            }
        }
        Ok(())
    }

    /// Corruption rate of TASK token `j`.
    pub fn task_noise(&self, j: usize) -> f64 {
        if self.task_vocab < 2 {
            return self.noise_rate;
        }
        let pos = 2.0 * j as f64 / (self.task_vocab - 1) as f64 - 1.0;
        self.noise_rate * (1.0 + self.reliability_spread * pos)
    }

    fn is_designated(&self, k: usize) -> bool {
        self.regime == Regime::Necessary && self.designated.contains(&k)
    }
}

/// A generated corpus with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
    pub vocab: Vocab,
    pub roles: TokenRoleTable,
    pub task_labels: Vec<String>,
    pub bias_labels: Vec<String>,
}

impl Corpus {
    pub fn split(&self, name: &str) -> Option<&[Example]> {
        match name {
            "train" => Some(&self.train),
            "dev" => Some(&self.dev),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    /// The split as a self-describing dataset sharing this corpus's maps.
    pub fn dataset(&self, split: &[Example]) -> Dataset {
        Dataset {
            examples: split.to_vec(),
            vocab: self.vocab.clone(),
            task_labels: self.task_labels.clone(),
            bias_labels: self.bias_labels.clone(),
        }
    }
}

struct Lexicon {
    task: Vec<Vec<u32>>,
    bias: Vec<Vec<u32>>,
    ent: Vec<Vec<Vec<u32>>>,
    neut: Vec<u32>,
}

fn build_lexicon(spec: &CorpusSpec) -> (Vocab, TokenRoleTable, Lexicon) {
    let mut vocab = Vocab::new();
    let mut roles = TokenRoleTable::default();
    roles.push(None);
    roles.push(None);
    let mut add = |name: String, role: TokenRole| {
        let id = vocab.insert(&name);
        roles.push(Some(role));
        id
    };
    let task = (0..spec.task_classes)
        .map(|k| {
            (0..spec.task_vocab)
                .map(|j| add(format!("task{k}_{j}"), TokenRole::Task(k)))
                .collect()
        })
        .collect();
    let bias = (0..spec.bias_groups)
        .map(|g| {
            (0..spec.bias_vocab)
                .map(|j| add(format!("bias{g}_{j}"), TokenRole::Bias(g)))
                .collect()
        })
        .collect();
    let ent = (0..spec.task_classes)
        .map(|k| {
            (0..spec.bias_groups)
                .map(|g| {
                    (0..spec.ent_vocab)
                        .map(|j| add(format!("ent{k}_{g}_{j}"), TokenRole::Ent(k, g)))
                        .collect()
                })
                .collect()
        })
        .collect();
    let neut = (0..spec.neut_vocab)
        .map(|j| add(format!("neut{j}"), TokenRole::Neut))
        .collect();
    (vocab, roles, Lexicon { task, bias, ent, neut })
}

/// With probability `rate`, a uniformly drawn value other than `k`.
fn corrupt<R: Rng>(rng: &mut R, k: usize, count: usize, rate: f64) -> usize {
    if rng.gen::<f64>() < rate {
        let other = rng.gen_range(0..count - 1);
        if other >= k {
            other + 1
        } else {
            other
        }
    } else {
        k
    }
}

/// Draws a corpus and splits it 70/10/20 (train and dev sizes rounded).
pub fn generate(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let (vocab, roles, lex) = build_lexicon(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut examples = Vec::with_capacity(spec.n_examples);
    for id in 0..spec.n_examples {
        let y_t = rng.gen_range(0..spec.task_classes);
        let y_b = rng.gen_range(0..spec.bias_groups);
        let n = rng.gen_range(spec.seq_len.0..=spec.seq_len.1);
        let mut tokens = Vec::with_capacity(n);
        if !spec.is_designated(y_t) {
            for _ in 0..spec.task_carriers {
                let j = rng.gen_range(0..spec.task_vocab);
                let k = corrupt(&mut rng, y_t, spec.task_classes, spec.task_noise(j));
                tokens.push(lex.task[k][j]);
            }
        }
        for _ in 0..spec.ent_carriers {
            let k = corrupt(&mut rng, y_t, spec.task_classes, spec.noise_rate);
            tokens.push(*lex.ent[k][y_b].choose(&mut rng).expect("ENT tokens"));
        }
        for _ in 0..spec.bias_carriers {
            let g = corrupt(&mut rng, y_b, spec.bias_groups, spec.bias_noise_rate);
            tokens.push(*lex.bias[g].choose(&mut rng).expect("BIAS tokens"));
        }
        while tokens.len() < n {
            tokens.push(*lex.neut.choose(&mut rng).expect("NEUT tokens"));
        }
        tokens.shuffle(&mut rng);
        examples.push(Example {
            id: id as u64,
            tokens,
            task_label: y_t,
            bias_label: y_b,
        });
    }
    if spec.shuffle_bias_labels {
        for ex in &mut examples {
            ex.bias_label = rng.gen_range(0..spec.bias_groups);
        }
    }
    let n = examples.len();
    let n_train = (0.7 * n as f64).round() as usize;
    let n_dev = (0.1 * n as f64).round() as usize;
    let test = examples.split_off(n_train + n_dev);
    let dev = examples.split_off(n_train);
    Ok(Corpus {
        train: examples,
        dev,
        test,
        vocab,
        roles,
        task_labels: (0..spec.task_classes).map(|k| format!("t{k}")).collect(),
        bias_labels: (0..spec.bias_groups).map(|g| format!("b{g}")).collect(),
    })
}
