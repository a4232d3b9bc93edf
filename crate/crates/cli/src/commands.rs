//! Subcommands. Each writes into `<root>/<digest>/`, where the digest
//! covers the command name and the resolved config with input paths
//! replaced by hashes of their contents.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fair_rationale::data;
use fair_rationale::debias::BiasOracle;
use fair_rationale::eval::{PredictionRecord, TradeoffRow};
use fair_rationale::rationale::RefModel;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, PATH_KEYS};
use crate::error::CliError;
use crate::pipeline;

pub const RESOLVED_CONFIG: &str = "resolved-config.txt";
pub const OUTPUT_HASHES: &str = "outputs.sha256";
pub const FRONTIER_HEADER: &str = "p_A,target,gamma,task_metric,bias_f1,status,pareto";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Gen,
    PretrainBias,
    TrainTask,
    Eval,
    Sweep,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::PretrainBias => "pretrain-bias",
            Command::TrainTask => "train-task",
            Command::Eval => "eval",
            Command::Sweep => "sweep",
        }
    }
}

impl FromStr for Command {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self, CliError> {
        [Command::Gen, Command::PretrainBias, Command::TrainTask, Command::Eval, Command::Sweep]
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown command `{s}`")))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn is_bookkeeping(name: &str) -> bool {
    name == RESOLVED_CONFIG || name == OUTPUT_HASHES
}

/// Hash of a file, or of a directory's regular files by sorted name. The
/// resolved config and output manifest of a run directory are skipped.
pub fn content_hash(path: &Path) -> Result<String, CliError> {
    if !path.is_dir() {
        return Ok(sha256_hex(&read(path)?));
    }
    let mut names: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| CliError::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .filter(|p| !is_bookkeeping(&p.file_name().unwrap_or_default().to_string_lossy()))
        .collect();
    names.sort();
    let mut h = Sha256::new();
    for p in names {
        let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
        h.update(name.as_bytes());
        h.update([0]);
        h.update(sha256_hex(&read(&p)?).as_bytes());
        h.update([b'\n']);
    }
    Ok(hex::encode(h.finalize()))
}

/// Digest naming the output directory of `command` under `cfg`.
pub fn run_digest(command: &str, cfg: &RunConfig) -> Result<String, CliError> {
    let mut text = format!("command={command}\n");
    for (k, v) in cfg.iter() {
        if PATH_KEYS.contains(&k) && !v.is_empty() {
            writeln!(text, "{k}=@{}", content_hash(Path::new(v))?).expect("string write");
        } else {
            writeln!(text, "{k}={v}").expect("string write");
        }
    }
    Ok(sha256_hex(text.as_bytes())[..16].to_string())
}

/// Root for outputs: `FR_OUTPUT_DIR`, else `fr-output`.
pub fn output_root() -> PathBuf {
    std::env::var_os("FR_OUTPUT_DIR").map_or_else(|| PathBuf::from("fr-output"), PathBuf::from)
}

fn prepare_dir(root: &Path, command: &str, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = root.join(run_digest(command, cfg)?);
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    write(&dir.join(RESOLVED_CONFIG), cfg.to_text())?;
    Ok(dir)
}

/// Writes `outputs.sha256` over the artifacts in `dir`.
fn seal(dir: &Path) -> Result<(), CliError> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| !is_bookkeeping(n))
        .collect();
    names.sort();
    let mut out = String::new();
    for n in names {
        writeln!(out, "{}  {n}", sha256_hex(&read(&dir.join(&n))?)).expect("string write");
    }
    write(&dir.join(OUTPUT_HASHES), out)
}

fn load_oracle(cfg: &RunConfig) -> Result<BiasOracle, CliError> {
    Ok(BiasOracle::new(pipeline::load_model(&cfg.path("oracle")?)?))
}

fn save_model(path: &Path, model: &RefModel) -> Result<(), CliError> {
    write(path, model.params().checkpoint_bytes())
}

/// Runs `command` and returns its output directory.
pub fn run(command: Command, cfg: &RunConfig, root: &Path) -> Result<PathBuf, CliError> {
    match command {
        Command::Gen => gen(cfg, root),
        Command::PretrainBias => pretrain_bias(cfg, root),
        Command::TrainTask => train_task(cfg, root),
        Command::Eval => eval(cfg, root),
        Command::Sweep => sweep(cfg, root),
    }
}

pub fn gen(cfg: &RunConfig, root: &Path) -> Result<PathBuf, CliError> {
    let corpus = data::generate(&pipeline::corpus_spec(cfg)?)?;
    let dir = prepare_dir(root, Command::Gen.name(), cfg)?;
    data::save_corpus(&corpus, &dir)?;
    seal(&dir)?;
    Ok(dir)
}

fn label_accuracy(model: &RefModel, split: &[fair_rationale::rationale::Example]) -> Result<(f64, f64), CliError> {
    let preds = split
        .par_iter()
        .map(|ex| model.predict(ex))
        .collect::<Result<Vec<_>, _>>()?;
    let correct = preds.iter().zip(split).filter(|(p, ex)| p.label == ex.bias_label).count();
    let masks: Vec<Vec<bool>> = preds.into_iter().map(|p| p.mask).collect();
    Ok((
        correct as f64 / split.len().max(1) as f64,
        fair_rationale::eval::selection_ratio(&masks),
    ))
}

pub fn pretrain_bias(cfg: &RunConfig, root: &Path) -> Result<PathBuf, CliError> {
    let corpus = pipeline::corpus(cfg)?;
    let (model, report) = pipeline::pretrain_bias(cfg, &corpus)?;
    let (dev_accuracy, dev_ratio) = label_accuracy(&model, &corpus.dev)?;
    let dir = prepare_dir(root, Command::PretrainBias.name(), cfg)?;
    save_model(&dir.join("oracle.ckpt"), &model)?;
    write(&dir.join("report.csv"), report.to_csv())?;
    write(
        &dir.join("summary.txt"),
        format!(
            "dev_bias_accuracy={dev_accuracy}\ndev_selection_ratio={dev_ratio}\ndigest={}\n",
            model.params().digest()
        ),
    )?;
    seal(&dir)?;
    Ok(dir)
}

pub fn train_task(cfg: &RunConfig, root: &Path) -> Result<PathBuf, CliError> {
    let corpus = pipeline::corpus(cfg)?;
    let oracle = load_oracle(cfg)?;
    let dc = pipeline::debias_config(cfg)?;
    let (model, report) = pipeline::train_task(cfg, &corpus, &oracle)?;
    let dir = prepare_dir(root, Command::TrainTask.name(), cfg)?;
    save_model(&dir.join("task.ckpt"), &model)?;
    write(&dir.join("report.csv"), report.to_csv())?;
    write(&dir.join("manifest.txt"), dc.manifest(cfg.get("seed")?, oracle.digest()))?;
    seal(&dir)?;
    Ok(dir)
}

fn write_eval(dir: &Path, records: &[PredictionRecord], row: &TradeoffRow) -> Result<(), CliError> {
    write(&dir.join("predictions.jsonl"), PredictionRecord::to_jsonl(records))?;
    write(&dir.join("tradeoff.csv"), TradeoffRow::to_csv(std::slice::from_ref(row)))
}

pub fn eval(cfg: &RunConfig, root: &Path) -> Result<PathBuf, CliError> {
    let corpus = pipeline::corpus(cfg)?;
    let oracle = load_oracle(cfg)?;
    let task = pipeline::load_model(&cfg.path("task")?)?;
    let (records, row) = pipeline::evaluate(cfg, &corpus, &task, &oracle)?;
    let dir = prepare_dir(root, Command::Eval.name(), cfg)?;
    write_eval(&dir, &records, &row)?;
    seal(&dir)?;
    Ok(dir)
}

/// One grid point of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub p_a: f64,
    pub target: f64,
    pub gamma: f64,
    /// `None` when the run failed.
    pub row: Option<TradeoffRow>,
}

impl SweepPoint {
    fn metrics(&self) -> Option<(f64, f64)> {
        self.row
            .as_ref()
            .map(|r| (r.task_metric, r.bias_f1))
            .filter(|(t, b)| t.is_finite() && b.is_finite())
    }
}

/// Marks rows no other row beats on both task metric (higher) and bias
/// F1 (lower). Failed rows are never on the frontier.
pub fn pareto_flags(points: &[SweepPoint]) -> Vec<bool> {
    points
        .iter()
        .map(|p| {
            let Some((t, b)) = p.metrics() else { return false };
            !points.iter().filter_map(SweepPoint::metrics).any(|(t2, b2)| {
                t2 >= t && b2 <= b && (t2 > t || b2 < b)
            })
        })
        .collect()
}

pub fn frontier_csv(points: &[SweepPoint]) -> String {
    let flags = pareto_flags(points);
    let mut out = format!("{FRONTIER_HEADER}\n");
    for (p, on) in points.iter().zip(flags) {
        let (t, b, status) = match &p.row {
            Some(r) => (r.task_metric, r.bias_f1, "ok"),
            None => (f64::NAN, f64::NAN, "failed"),
        };
        writeln!(out, "{},{},{},{t},{b},{status},{on}", p.p_a, p.target, p.gamma).expect("string write");
    }
    out
}

fn sweep_run(cfg: &RunConfig, root: &Path, corpus: &data::Corpus, oracle: &BiasOracle) -> Result<TradeoffRow, CliError> {
    let (model, report) = pipeline::train_task(cfg, corpus, oracle)?;
    let (records, row) = pipeline::evaluate(cfg, corpus, &model, oracle)?;
    let dir = prepare_dir(root, "sweep-run", cfg)?;
    save_model(&dir.join("task.ckpt"), &model)?;
    write(&dir.join("report.csv"), report.to_csv())?;
    write_eval(&dir, &records, &row)?;
    seal(&dir)?;
    Ok(row)
}

/// Trains and evaluates every (p_A, target, gamma) combination. Runs are
/// independent and execute in parallel; a failed run yields a NaN row.
pub fn sweep(cfg: &RunConfig, root: &Path) -> Result<PathBuf, CliError> {
    let corpus = pipeline::corpus(cfg)?;
    let oracle = load_oracle(cfg)?;
    let p_as: Vec<f64> = cfg.list("sweep_p_a")?;
    let targets: Vec<f64> = cfg.list("sweep_targets")?;
    let gammas: Vec<f64> = cfg.list("sweep_gammas")?;
    if p_as.is_empty() || targets.is_empty() || gammas.is_empty() {
        return Err(CliError::Config("sweep grid is empty".into()));
    }
    let mut grid = Vec::new();
    for &p_a in &p_as {
        for &target in &targets {
            for &gamma in &gammas {
                let mut point = cfg.clone();
                point.set("p_A", &p_a.to_string())?;
                point.set("target", &target.to_string())?;
                point.set("gamma", &gamma.to_string())?;
                grid.push((p_a, target, gamma, point));
            }
        }
    }
    let results: Vec<(SweepPoint, Option<String>)> = grid
        .par_iter()
        .map(|(p_a, target, gamma, point)| {
            let outcome = sweep_run(point, root, &corpus, &oracle);
            let failure = outcome.as_ref().err().map(|e| format!("p_A={p_a} target={target} gamma={gamma}: {e}"));
            let sp = SweepPoint {
                p_a: *p_a,
                target: *target,
                gamma: *gamma,
                row: outcome.ok(),
            };
            (sp, failure)
        })
        .collect();
    let variant = cfg.raw("variant");
    let rows: Vec<TradeoffRow> = results
        .iter()
        .map(|(p, _)| {
            p.row.clone().unwrap_or_else(|| TradeoffRow {
                variant: variant.to_string(),
                a: -(-p.p_a).ln_1p(),
                gamma: p.gamma,
                task_metric: f64::NAN,
                bias_f1: f64::NAN,
                tpr_gap_rms: f64::NAN,
                comprehensiveness: f64::NAN,
                sufficiency: f64::NAN,
                selection_ratio: f64::NAN,
            })
        })
        .collect();
    let points: Vec<SweepPoint> = results.iter().map(|(p, _)| p.clone()).collect();
    let failures: Vec<&str> = results.iter().filter_map(|(_, f)| f.as_deref()).collect();
    let dir = prepare_dir(root, Command::Sweep.name(), cfg)?;
    write(&dir.join("tradeoff.csv"), TradeoffRow::to_csv(&rows))?;
    write(&dir.join("frontier.csv"), frontier_csv(&points))?;
    if !failures.is_empty() {
        write(&dir.join("failures.txt"), failures.join("\n") + "\n")?;
    }
    seal(&dir)?;
    Ok(dir)
}
