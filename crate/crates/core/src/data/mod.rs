//! Datasets on disk and the planted-signal corpus generator.
//!
//! Dataset files are JSONL with `text`, `task_label` and `bias_label`
//! string fields (an optional integer `id` is kept when present). Text is
//! lowercased and split on whitespace.

mod synthetic;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use synthetic::{generate, Corpus, CorpusSpec, Regime, TokenRole, TokenRoleTable};

use crate::error::{Error, Result};
use crate::rationale::{Example, Vocab};

/// Examples together with the maps that give their ids meaning.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub vocab: Vocab,
    pub task_labels: Vec<String>,
    pub bias_labels: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<u64>,
    text: Option<String>,
    task_label: Option<String>,
    bias_label: Option<String>,
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn label_id(labels: &mut Vec<String>, name: &str, grow: bool) -> Option<usize> {
    if let Some(i) = labels.iter().position(|l| l == name) {
        return Some(i);
    }
    if !grow {
        return None;
    }
    labels.push(name.to_string());
    Some(labels.len() - 1)
}

fn parse_lines(
    text: &str,
    vocab: &mut Vocab,
    task_labels: &mut Vec<String>,
    bias_labels: &mut Vec<String>,
    grow: bool,
) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            detail: e.to_string(),
        })?;
        let field = |v: Option<String>, name: &str| {
            v.ok_or_else(|| Error::MissingField {
                line: line_no,
                field: name.to_string(),
            })
        };
        let body = field(rec.text, "text")?;
        let task = field(rec.task_label, "task_label")?;
        let bias = field(rec.bias_label, "bias_label")?;
        let words = tokenize(&body);
        if words.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                detail: "text has no tokens".into(),
            });
        }
        let tokens = words
            .iter()
            .map(|w| if grow { vocab.insert(w) } else { vocab.id(w) })
            .collect();
        let unknown = |kind: &str, name: &str| Error::Parse {
            line: line_no,
            detail: format!("unknown {kind} label `{name}`"),
        };
        let task_label = label_id(task_labels, &task, grow).ok_or_else(|| unknown("task", &task))?;
        let bias_label = label_id(bias_labels, &bias, grow).ok_or_else(|| unknown("bias", &bias))?;
        out.push(Example {
            id: rec.id.unwrap_or(out.len() as u64),
            tokens,
            task_label,
            bias_label,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}

/// Loads a dataset, building the vocabulary and label maps in
/// first-appearance order.
pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    parse_jsonl(&fs::read_to_string(path)?)
}

pub fn parse_jsonl(text: &str) -> Result<Dataset> {
    let mut vocab = Vocab::new();
    let (mut task_labels, mut bias_labels) = (Vec::new(), Vec::new());
    let examples = parse_lines(text, &mut vocab, &mut task_labels, &mut bias_labels, true)?;
    Ok(Dataset {
        examples,
        vocab,
        task_labels,
        bias_labels,
    })
}

/// Loads a dataset against fixed maps. Unknown tokens become `UNK`;
/// unknown labels are parse errors.
pub fn load_jsonl_with(
    path: &Path,
    vocab: &Vocab,
    task_labels: &[String],
    bias_labels: &[String],
) -> Result<Vec<Example>> {
    let text = fs::read_to_string(path)?;
    let mut vocab = vocab.clone();
    parse_lines(
        &text,
        &mut vocab,
        &mut task_labels.to_vec(),
        &mut bias_labels.to_vec(),
        false,
    )
}

pub fn to_jsonl(
    examples: &[Example],
    vocab: &Vocab,
    task_labels: &[String],
    bias_labels: &[String],
) -> Result<String> {
    let mut out = String::new();
    for ex in examples {
        let words = ex
            .tokens
            .iter()
            .map(|&t| {
                vocab.token(t).ok_or_else(|| Error::Domain {
                    op: "to_jsonl",
                    detail: format!("token id {t} outside vocabulary"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let label = |labels: &[String], k: usize| {
            labels.get(k).cloned().ok_or_else(|| Error::Domain {
                op: "to_jsonl",
                detail: format!("label id {k} has no name"),
            })
        };
        let rec = Record {
            id: Some(ex.id),
            text: Some(words.join(" ")),
            task_label: Some(label(task_labels, ex.task_label)?),
            bias_label: Some(label(bias_labels, ex.bias_label)?),
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    Ok(out)
}

/// `token<TAB>id` lines in id order.
pub fn vocab_to_string(vocab: &Vocab) -> String {
    vocab.iter().map(|(id, t)| format!("{t}\t{id}\n")).collect()
}

pub fn vocab_from_str(text: &str) -> Result<Vocab> {
    let mut vocab = Vocab::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = |detail: String| Error::Parse { line: i + 1, detail };
        let (tok, id) = line.rsplit_once('\t').ok_or_else(|| bad("missing tab".into()))?;
        let id: u32 = id.parse().map_err(|_| bad(format!("bad id `{id}`")))?;
        let got = vocab.insert(tok);
        if got != id {
            return Err(bad(format!("id {id} for `{tok}` is out of sequence")));
        }
    }
    Ok(vocab)
}

/// `task<TAB>name` and `bias<TAB>name` lines in id order.
pub fn labels_to_string(task_labels: &[String], bias_labels: &[String]) -> String {
    let mut out = String::new();
    for l in task_labels {
        out.push_str(&format!("task\t{l}\n"));
    }
    for l in bias_labels {
        out.push_str(&format!("bias\t{l}\n"));
    }
    out
}

pub fn labels_from_str(text: &str) -> Result<(Vec<String>, Vec<String>)> {
    let (mut task, mut bias) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        match line.split_once('\t') {
            Some(("task", name)) => task.push(name.to_string()),
            Some(("bias", name)) => bias.push(name.to_string()),
            _ => {
                return Err(Error::Parse {
                    line: i + 1,
                    detail: format!("unrecognized label line `{line}`"),
                })
            }
        }
    }
    Ok((task, bias))
}

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

/// Writes `{train,dev,test}.jsonl`, `roles.csv`, `vocab.txt` and
/// `labels.txt` into `dir`.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for name in SPLITS {
        let split = corpus.split(name).expect("known split");
        let text = to_jsonl(split, &corpus.vocab, &corpus.task_labels, &corpus.bias_labels)?;
        fs::write(dir.join(format!("{name}.jsonl")), text)?;
    }
    fs::write(dir.join("roles.csv"), corpus.roles.to_csv(&corpus.vocab))?;
    fs::write(dir.join("vocab.txt"), vocab_to_string(&corpus.vocab))?;
    fs::write(
        dir.join("labels.txt"),
        labels_to_string(&corpus.task_labels, &corpus.bias_labels),
    )?;
    Ok(())
}

/// Reads a directory written by [`save_corpus`]. A missing role table
/// yields an empty one.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let vocab = vocab_from_str(&fs::read_to_string(dir.join("vocab.txt"))?)?;
    let (task_labels, bias_labels) = labels_from_str(&fs::read_to_string(dir.join("labels.txt"))?)?;
    let roles_path = dir.join("roles.csv");
    let roles = if roles_path.exists() {
        TokenRoleTable::from_csv(&fs::read_to_string(roles_path)?, &vocab)?
    } else {
        TokenRoleTable::default()
    };
    let mut splits: HashMap<&str, Vec<Example>> = HashMap::new();
    for name in SPLITS {
        let path = dir.join(format!("{name}.jsonl"));
        splits.insert(name, load_jsonl_with(&path, &vocab, &task_labels, &bias_labels)?);
    }
    Ok(Corpus {
        train: splits.remove("train").unwrap_or_default(),
        dev: splits.remove("dev").unwrap_or_default(),
        test: splits.remove("test").unwrap_or_default(),
        vocab,
        roles,
        task_labels,
        bias_labels,
    })
}
