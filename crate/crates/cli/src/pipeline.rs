//! In-memory stages shared by the subcommands and the test suites.

use fair_rationale::data::{self, Corpus, CorpusSpec, Regime};
use fair_rationale::debias::{train_debiased, BiasOracle, DebiasConfig, Variant};
use fair_rationale::eval::{
    bias_probe, collect_records, rationale_mask, MaskSource, PredictionRecord, TaskMetric, TradeoffRow,
};
use fair_rationale::numerics::{Optimizer, ParamStore};
use fair_rationale::rationale::{
    mix_seed, train_ref_on, Example, ModelConfig, MultiplierRule, RefModel, SparsityController, TrainConfig,
    TrainingReport,
};

use crate::config::RunConfig;
use crate::error::CliError;

// Stream tags mixed with the run seed.
const BIAS_INIT: u64 = 1;
const BIAS_TRAIN: u64 = 2;
const TASK_INIT: u64 = 3;
const TASK_TRAIN: u64 = 4;
const PROBE: u64 = 5;

pub fn corpus_spec(cfg: &RunConfig) -> Result<CorpusSpec, CliError> {
    let seq_len = match cfg.raw("seq_len").split_once('-') {
        Some((lo, hi)) => (parse_usize(lo, "seq_len")?, parse_usize(hi, "seq_len")?),
        None => {
            let n = cfg.get("seq_len")?;
            (n, n)
        }
    };
    let regime: Regime = cfg.raw("regime").parse()?;
    Ok(CorpusSpec {
        n_examples: cfg.get("n_examples")?,
        seq_len,
        task_classes: cfg.get("task_classes")?,
        bias_groups: cfg.get("bias_groups")?,
        task_vocab: cfg.get("task_vocab")?,
        bias_vocab: cfg.get("bias_vocab")?,
        ent_vocab: cfg.get("ent_vocab")?,
        neut_vocab: cfg.get("neut_vocab")?,
        task_carriers: cfg.get("task_carriers")?,
        ent_carriers: cfg.get("ent_carriers")?,
        bias_carriers: cfg.get("bias_carriers")?,
        regime,
        designated: cfg.list("designated")?,
        noise_rate: cfg.get("noise_rate")?,
        bias_noise_rate: cfg.get("bias_noise_rate")?,
        reliability_spread: cfg.get("reliability_spread")?,
        shuffle_bias_labels: cfg.get("shuffle_bias_labels")?,
        seed: cfg.get("seed")?,
    })
}

fn parse_usize(s: &str, key: &str) -> Result<usize, CliError> {
    s.trim()
        .parse()
        .map_err(|e| CliError::Config(format!("bad value `{s}` for {key}: {e}")))
}

/// The corpus in `data_dir`, or one generated from the corpus keys.
pub fn corpus(cfg: &RunConfig) -> Result<Corpus, CliError> {
    match cfg.optional_path("data_dir") {
        Some(dir) => Ok(data::load_corpus(&dir)?),
        None => Ok(data::generate(&corpus_spec(cfg)?)?),
    }
}

pub fn model_config(cfg: &RunConfig, vocab_size: usize, classes: usize) -> Result<ModelConfig, CliError> {
    let mut mc = ModelConfig::new(vocab_size, classes);
    mc.emb_dim = cfg.get("emb_dim")?;
    mc.hidden = cfg.get("hidden")?;
    Ok(mc)
}

pub fn train_config(cfg: &RunConfig, epochs_key: &str, stream: u64) -> Result<TrainConfig, CliError> {
    let lr: f64 = cfg.get("lr")?;
    let optimizer = match cfg.raw("optimizer") {
        "adam" => Optimizer::adam(lr),
        "sgd" => Optimizer::Sgd { lr },
        other => return Err(CliError::Config(format!("unknown optimizer `{other}`"))),
    };
    Ok(TrainConfig {
        epochs: cfg.get(epochs_key)?,
        batch_size: cfg.get("batch_size")?,
        optimizer,
        seed: mix_seed(&[cfg.get("seed")?, stream]),
    })
}

pub fn controller(cfg: &RunConfig, target_key: &str) -> Result<SparsityController, CliError> {
    let mut ctrl = SparsityController::new(cfg.get(target_key)?);
    ctrl.step_size = cfg.get("multiplier_step")?;
    ctrl.transition_weight = cfg.get("transition_weight")?;
    ctrl.rule = match cfg.raw("multiplier_rule") {
        "signed" => MultiplierRule::Signed,
        "symmetric" => MultiplierRule::Symmetric,
        other => return Err(CliError::Config(format!("unknown multiplier rule `{other}`"))),
    };
    Ok(ctrl)
}

pub fn debias_config(cfg: &RunConfig) -> Result<DebiasConfig, CliError> {
    let variant: Variant = cfg.raw("variant").parse()?;
    let mut dc = DebiasConfig::from_probability(cfg.get("p_A")?, cfg.get("gamma")?, variant)?;
    dc.prob_threshold = cfg.get("prob_threshold")?;
    dc.normalize = cfg.get("normalize")?;
    dc.validate()?;
    Ok(dc)
}

fn fresh_model(cfg: &RunConfig, corpus: &Corpus, classes: usize, stream: u64) -> Result<RefModel, CliError> {
    let mc = model_config(cfg, corpus.vocab.len(), classes)?;
    let mut model = RefModel::new(mc, mix_seed(&[cfg.get("seed")?, stream]))?;
    if let Some(path) = cfg.optional_path("embeddings") {
        model.load_embeddings(&path, &corpus.vocab)?;
    }
    Ok(model)
}

/// Trains the bias rationale model on bias labels.
pub fn pretrain_bias(cfg: &RunConfig, corpus: &Corpus) -> Result<(RefModel, TrainingReport), CliError> {
    let mut model = fresh_model(cfg, corpus, corpus.bias_labels.len(), BIAS_INIT)?;
    let mut ctrl = controller(cfg, "bias_target")?;
    let schedule = train_config(cfg, "bias_epochs", BIAS_TRAIN)?;
    let report = train_ref_on(&mut model, &corpus.train, &mut ctrl, &schedule, |ex| ex.bias_label)?;
    Ok((model, report))
}

/// Trains the task model against a frozen oracle.
pub fn train_task(
    cfg: &RunConfig,
    corpus: &Corpus,
    oracle: &BiasOracle,
) -> Result<(RefModel, TrainingReport), CliError> {
    let mut model = fresh_model(cfg, corpus, corpus.task_labels.len(), TASK_INIT)?;
    let mut ctrl = controller(cfg, "target")?;
    let dc = debias_config(cfg)?;
    let schedule = train_config(cfg, "epochs", TASK_TRAIN)?;
    let report = train_debiased(&mut model, oracle, &corpus.train, &mut ctrl, &dc, &schedule)?;
    Ok((model, report))
}

/// Budget used by the rerank variant: `rerank_budget`, else the target.
pub fn rerank_budget(cfg: &RunConfig) -> Result<f64, CliError> {
    match cfg.raw("rerank_budget") {
        "" => cfg.get("target"),
        _ => cfg.get("rerank_budget"),
    }
}

pub fn mask_source<'a>(cfg: &RunConfig, oracle: &'a BiasOracle) -> Result<MaskSource<'a>, CliError> {
    Ok(match cfg.raw("variant").parse()? {
        Variant::Rerank => MaskSource::Rerank {
            oracle,
            budget: rerank_budget(cfg)?,
        },
        _ => MaskSource::Gates,
    })
}

pub fn eval_split<'c>(cfg: &RunConfig, corpus: &'c Corpus) -> Result<&'c [Example], CliError> {
    match corpus.split(cfg.raw("split")) {
        Some(s) if cfg.raw("split") != "train" => Ok(s),
        _ => Err(CliError::Config(format!("split must be dev or test, got `{}`", cfg.raw("split")))),
    }
}

/// Scores `task` on the evaluation split with rationales from `source`,
/// including a bias probe trained on train-split rationales.
pub fn evaluate_with(
    cfg: &RunConfig,
    corpus: &Corpus,
    task: &RefModel,
    source: MaskSource<'_>,
) -> Result<(Vec<PredictionRecord>, TradeoffRow), CliError> {
    let split = eval_split(cfg, corpus)?;
    let mut records = collect_records(task, split, source)?;
    let train_masks = corpus
        .train
        .iter()
        .map(|ex| rationale_mask(task, ex, source))
        .collect::<Result<Vec<_>, _>>()?;
    let test_masks: Vec<Vec<bool>> = records.iter().map(|r| r.mask.clone()).collect();
    let probe_cfg = model_config(cfg, corpus.vocab.len(), corpus.bias_labels.len())?;
    let schedule = train_config(cfg, "probe_epochs", PROBE)?;
    let probe = bias_probe(&corpus.train, &train_masks, split, &test_masks, probe_cfg, &schedule)?;
    for (r, p) in records.iter_mut().zip(&probe.predictions) {
        r.probe_pred = Some(*p);
    }
    let metric: TaskMetric = cfg.raw("task_metric").parse()?;
    let dc = debias_config(cfg)?;
    let row = TradeoffRow::from_records(
        dc.variant.as_str(),
        dc.threshold,
        dc.gamma,
        &records,
        metric,
        corpus.task_labels.len(),
        corpus.bias_labels.len(),
    )?;
    Ok((records, row))
}

pub fn evaluate(
    cfg: &RunConfig,
    corpus: &Corpus,
    task: &RefModel,
    oracle: &BiasOracle,
) -> Result<(Vec<PredictionRecord>, TradeoffRow), CliError> {
    evaluate_with(cfg, corpus, task, mask_source(cfg, oracle)?)
}

pub fn load_model(path: &std::path::Path) -> Result<RefModel, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(RefModel::from_params(ParamStore::from_checkpoint_bytes(&bytes)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_keys_match_library_defaults() {
        let cfg = RunConfig::default();
        assert_eq!(corpus_spec(&cfg).unwrap(), CorpusSpec::default());
        let mc = model_config(&cfg, 10, 2).unwrap();
        assert_eq!(mc, ModelConfig::new(10, 2));
    }

    #[test]
    fn seq_len_accepts_single_value() {
        let mut cfg = RunConfig::default();
        cfg.set("seq_len", "12").unwrap();
        assert_eq!(corpus_spec(&cfg).unwrap().seq_len, (12, 12));
        cfg.set("seq_len", "a-b").unwrap();
        assert!(matches!(corpus_spec(&cfg), Err(CliError::Config(_))));
    }

    #[test]
    fn unknown_names_are_config_errors() {
        let mut cfg = RunConfig::default();
        cfg.set("optimizer", "lbfgs").unwrap();
        assert_eq!(train_config(&cfg, "epochs", 0).unwrap_err().exit_code(), 2);
        let mut cfg = RunConfig::default();
        cfg.set("variant", "magic").unwrap();
        assert_eq!(debias_config(&cfg).unwrap_err().exit_code(), 2);
        let mut cfg = RunConfig::default();
        cfg.set("multiplier_rule", "x").unwrap();
        assert_eq!(controller(&cfg, "target").unwrap_err().exit_code(), 2);
    }

    #[test]
    fn rerank_budget_defaults_to_target() {
        let mut cfg = RunConfig::default();
        cfg.set("target", "0.5").unwrap();
        assert_eq!(rerank_budget(&cfg).unwrap(), 0.5);
        cfg.set("rerank_budget", "0.3").unwrap();
        assert_eq!(rerank_budget(&cfg).unwrap(), 0.3);
    }
}
