//! Task, fairness and faithfulness metrics over per-example prediction
//! records, plus the bias probe and trade-off rows.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::debias::{rerank_select, BiasOracle};
use crate::error::{Error, Result};
use crate::rationale::{
    argmax, train_classifier, Example, ModelConfig, RefModel, TrainConfig, TrainingReport,
};

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch {
            expected: a,
            actual: b,
        });
    }
    if a == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

pub fn accuracy(golds: &[usize], preds: &[usize]) -> Result<f64> {
    check_lengths(golds.len(), preds.len())?;
    let hits = golds.iter().zip(preds).filter(|(g, p)| g == p).count();
    Ok(hits as f64 / golds.len() as f64)
}

/// Macro F1 over `k` classes. A class with no gold and no predicted
/// instance scores 0 and still counts in the average.
pub fn f1_macro(golds: &[usize], preds: &[usize], k: usize) -> Result<f64> {
    check_lengths(golds.len(), preds.len())?;
    if k == 0 {
        return Err(Error::InvalidConfig("f1 over zero classes".into()));
    }
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fn_ = vec![0usize; k];
    for (&g, &p) in golds.iter().zip(preds) {
        if g >= k || p >= k {
            return Err(Error::Domain {
                op: "f1_macro",
                detail: format!("label outside {k} classes"),
            });
        }
        if g == p {
            tp[g] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let total: f64 = (0..k)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / k as f64)
}

/// Fraction of selected tokens, averaged over masks.
pub fn selection_ratio(masks: &[Vec<bool>]) -> f64 {
    if masks.is_empty() {
        return 0.0;
    }
    let total: f64 = masks
        .iter()
        .map(|m| {
            if m.is_empty() {
                0.0
            } else {
                m.iter().filter(|&&b| b).count() as f64 / m.len() as f64
            }
        })
        .sum();
    total / masks.len() as f64
}

/// Everything computed for one evaluated example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: u64,
    pub gold: usize,
    /// Prediction from the rationale alone.
    pub pred: usize,
    pub full_probs: Vec<f64>,
    pub rationale_probs: Vec<f64>,
    pub complement_probs: Option<Vec<f64>>,
    pub mask: Vec<bool>,
    pub bias_label: usize,
    pub probe_pred: Option<usize>,
}

impl PredictionRecord {
    /// Class predicted on the full input.
    pub fn full_class(&self) -> usize {
        argmax(&self.full_probs)
    }

    pub fn to_jsonl(records: &[PredictionRecord]) -> String {
        records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Vec<PredictionRecord>> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    line: i + 1,
                    detail: e.to_string(),
                })
            })
            .collect()
    }
}

/// `p_full(c) - p_complement(c)` for the class `c` predicted on the full
/// input.
pub fn comprehensiveness(rec: &PredictionRecord) -> Result<f64> {
    let comp = rec.complement_probs.as_ref().ok_or_else(|| Error::MissingField {
        line: 0,
        field: "complement_probs".into(),
    })?;
    let c = rec.full_class();
    Ok(rec.full_probs[c] - comp[c])
}

/// `p_full(c) - p_rationale(c)` for the class `c` predicted on the full
/// input.
pub fn sufficiency(rec: &PredictionRecord) -> f64 {
    let c = rec.full_class();
    rec.full_probs[c] - rec.rationale_probs[c]
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

pub fn mean_comprehensiveness(records: &[PredictionRecord]) -> Result<f64> {
    let values = records.iter().map(comprehensiveness).collect::<Result<Vec<_>>>()?;
    Ok(mean(values.into_iter()))
}

pub fn mean_sufficiency(records: &[PredictionRecord]) -> f64 {
    mean(records.iter().map(sufficiency))
}

/// Root mean square over task classes of the true-positive-rate gap
/// between bias groups 0 and 1. Classes lacking gold instances in either
/// group are skipped.
pub fn tpr_gap_rms(records: &[PredictionRecord], task_classes: usize) -> Result<f64> {
    let mut pos = vec![[0usize; 2]; task_classes];
    let mut hit = vec![[0usize; 2]; task_classes];
    for r in records {
        if r.bias_label > 1 {
            return Err(Error::Domain {
                op: "tpr_gap_rms",
                detail: format!("bias group {} is not binary", r.bias_label),
            });
        }
        if r.gold >= task_classes {
            return Err(Error::Domain {
                op: "tpr_gap_rms",
                detail: format!("label {} outside {task_classes} classes", r.gold),
            });
        }
        pos[r.gold][r.bias_label] += 1;
        if r.pred == r.gold {
            hit[r.gold][r.bias_label] += 1;
        }
    }
    let gaps: Vec<f64> = (0..task_classes)
        .filter(|&k| pos[k][0] > 0 && pos[k][1] > 0)
        .map(|k| {
            let tpr = |g: usize| hit[k][g] as f64 / pos[k][g] as f64;
            tpr(0) - tpr(1)
        })
        .collect();
    if gaps.is_empty() {
        return Err(Error::NoEvaluableClass);
    }
    Ok((gaps.iter().map(|g| g * g).sum::<f64>() / gaps.len() as f64).sqrt())
}

/// Where evaluation masks come from.
#[derive(Clone, Copy)]
pub enum MaskSource<'a> {
    /// Deterministic task gates.
    Gates,
    /// Deterministic gates pruned by bias energy to a budget.
    Rerank { oracle: &'a BiasOracle, budget: f64 },
    /// Uniformly random masks with as many tokens as the gates select.
    RandomLike { seed: u64 },
    /// Every token.
    Full,
}

/// The rationale mask for one example.
pub fn rationale_mask(model: &RefModel, ex: &Example, source: MaskSource<'_>) -> Result<Vec<bool>> {
    match source {
        MaskSource::Gates => Ok(model.extract_gates(ex)?.deterministic_mask()),
        MaskSource::Rerank { oracle, budget } => {
            let gates = model.extract_gates(ex)?;
            rerank_select(&gates, &oracle.bias_energies(ex)?, budget)
        }
        MaskSource::RandomLike { seed } => {
            let count = model
                .extract_gates(ex)?
                .deterministic_mask()
                .iter()
                .filter(|&&b| b)
                .count();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ex.id.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut mask = vec![false; ex.len()];
            for i in sample(&mut rng, ex.len(), count) {
                mask[i] = true;
            }
            Ok(mask)
        }
        MaskSource::Full => Ok(vec![true; ex.len()]),
    }
}

fn as_scale(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

/// Runs the task model on full, rationale-only and complement-only inputs.
pub fn collect_records(
    model: &RefModel,
    data: &[Example],
    source: MaskSource<'_>,
) -> Result<Vec<PredictionRecord>> {
    data.par_iter()
        .map(|ex| {
            let mask = rationale_mask(model, ex, source)?;
            let full_probs = model.classify(ex, &vec![1.0; ex.len()])?;
            let rationale_probs = model.classify(ex, &as_scale(&mask))?;
            let complement: Vec<bool> = mask.iter().map(|b| !b).collect();
            let complement_probs = model.classify(ex, &as_scale(&complement))?;
            Ok(PredictionRecord {
                id: ex.id,
                gold: ex.task_label,
                pred: argmax(&rationale_probs),
                full_probs,
                rationale_probs,
                complement_probs: Some(complement_probs),
                mask,
                bias_label: ex.bias_label,
                probe_pred: None,
            })
        })
        .collect()
}

/// A bias classifier trained on rationale-masked inputs.
#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub model: RefModel,
    pub f1: f64,
    pub predictions: Vec<usize>,
    pub report: TrainingReport,
}

/// Trains a fresh classifier on `train` inputs scaled by `train_masks` to
/// predict bias labels, and scores it by macro F1 on masked `test` inputs.
pub fn bias_probe(
    train: &[Example],
    train_masks: &[Vec<bool>],
    test: &[Example],
    test_masks: &[Vec<bool>],
    config: ModelConfig,
    schedule: &TrainConfig,
) -> Result<ProbeResult> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_lengths(test.len(), test_masks.len())?;
    let mut model = RefModel::new(config, schedule.seed)?;
    let scales: Vec<Vec<f64>> = train_masks.iter().map(|m| as_scale(m)).collect();
    let report = train_classifier(&mut model, train, &scales, |ex| ex.bias_label, schedule)?;
    let predictions = test
        .par_iter()
        .zip(test_masks)
        .map(|(ex, m)| Ok(argmax(&model.classify(ex, &as_scale(m))?)))
        .collect::<Result<Vec<_>>>()?;
    let golds: Vec<usize> = test.iter().map(|e| e.bias_label).collect();
    let f1 = f1_macro(&golds, &predictions, config.classes)?;
    Ok(ProbeResult {
        model,
        f1,
        predictions,
        report,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskMetric {
    Accuracy,
    F1,
}

impl std::str::FromStr for TaskMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(TaskMetric::Accuracy),
            "f1" => Ok(TaskMetric::F1),
            _ => Err(Error::InvalidConfig(format!("unknown task metric `{s}`"))),
        }
    }
}

pub fn task_metric(records: &[PredictionRecord], metric: TaskMetric, classes: usize) -> Result<f64> {
    let golds: Vec<usize> = records.iter().map(|r| r.gold).collect();
    let preds: Vec<usize> = records.iter().map(|r| r.pred).collect();
    match metric {
        TaskMetric::Accuracy => accuracy(&golds, &preds),
        TaskMetric::F1 => f1_macro(&golds, &preds, classes),
    }
}

pub const TRADEOFF_HEADER: &str =
    "variant,A,gamma,task_metric,bias_f1,tpr_gap_rms,comprehensiveness,sufficiency,selection_ratio";

/// One evaluated configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct TradeoffRow {
    pub variant: String,
    pub a: f64,
    pub gamma: f64,
    pub task_metric: f64,
    pub bias_f1: f64,
    pub tpr_gap_rms: f64,
    pub comprehensiveness: f64,
    pub sufficiency: f64,
    pub selection_ratio: f64,
}

impl TradeoffRow {
    /// Assembles a row from records whose `probe_pred` fields are filled.
    pub fn from_records(
        variant: &str,
        a: f64,
        gamma: f64,
        records: &[PredictionRecord],
        metric: TaskMetric,
        task_classes: usize,
        bias_groups: usize,
    ) -> Result<Self> {
        let bias_golds: Vec<usize> = records.iter().map(|r| r.bias_label).collect();
        let probe: Vec<usize> = records
            .iter()
            .map(|r| {
                r.probe_pred.ok_or_else(|| Error::MissingField {
                    line: 0,
                    field: "probe_pred".into(),
                })
            })
            .collect::<Result<_>>()?;
        let masks: Vec<Vec<bool>> = records.iter().map(|r| r.mask.clone()).collect();
        Ok(Self {
            variant: variant.to_string(),
            a,
            gamma,
            task_metric: task_metric(records, metric, task_classes)?,
            bias_f1: f1_macro(&bias_golds, &probe, bias_groups)?,
            tpr_gap_rms: tpr_gap_rms(records, task_classes).unwrap_or(f64::NAN),
            comprehensiveness: mean_comprehensiveness(records)?,
            sufficiency: mean_sufficiency(records),
            selection_ratio: selection_ratio(&masks),
        })
    }

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.variant,
            self.a,
            self.gamma,
            self.task_metric,
            self.bias_f1,
            self.tpr_gap_rms,
            self.comprehensiveness,
            self.sufficiency,
            self.selection_ratio
        )
    }

    pub fn from_csv_line(line: &str) -> Result<Self> {
        let cols: Vec<&str> = line.trim_end().split(',').collect();
        let bad = |detail: String| Error::Parse { line: 1, detail };
        if cols.len() != 9 {
            return Err(bad(format!("expected 9 columns, found {}", cols.len())));
        }
        let num = |i: usize| -> Result<f64> {
            cols[i].parse().map_err(|_| bad(format!("bad number `{}`", cols[i])))
        };
        Ok(Self {
            variant: cols[0].to_string(),
            a: num(1)?,
            gamma: num(2)?,
            task_metric: num(3)?,
            bias_f1: num(4)?,
            tpr_gap_rms: num(5)?,
            comprehensiveness: num(6)?,
            sufficiency: num(7)?,
            selection_ratio: num(8)?,
        })
    }

    pub fn to_csv(rows: &[TradeoffRow]) -> String {
        let mut out = format!("{TRADEOFF_HEADER}\n");
        for r in rows {
            out.push_str(&r.to_csv_line());
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(gold: usize, pred: usize, bias: usize) -> PredictionRecord {
        PredictionRecord {
            id: 0,
            gold,
            pred,
            full_probs: vec![0.9, 0.1],
            rationale_probs: vec![0.85, 0.15],
            complement_probs: Some(vec![0.3, 0.7]),
            mask: vec![true, false],
            bias_label: bias,
            probe_pred: Some(bias),
        }
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_macro(&[0, 1, 1], &[0, 1, 1], 2).unwrap(), 1.0);
        let v = f1_macro(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert!((v - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
        assert!((v - 0.7333).abs() < 1e-4);
        let v = f1_macro(&[0, 0, 1, 1], &[1, 1, 1, 1], 2).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
        // an absent class counts as zero
        assert_eq!(f1_macro(&[0, 0], &[0, 0], 2).unwrap(), 0.5);
        assert!(matches!(
            f1_macro(&[0], &[0, 1], 2),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn selection_ratio_examples() {
        assert_eq!(selection_ratio(&[vec![true; 3]]), 1.0);
        assert_eq!(selection_ratio(&[vec![false; 3]]), 0.0);
        let m = [vec![true, false, true, false], vec![true; 4]];
        assert_eq!(selection_ratio(&m), 0.75);
    }

    #[test]
    fn faithfulness_examples() {
        let r = record(0, 0, 0);
        assert!((comprehensiveness(&r).unwrap() - 0.6).abs() < 1e-12);
        assert!((sufficiency(&r) - 0.05).abs() < 1e-12);
        let mut identity = r.clone();
        identity.rationale_probs = identity.full_probs.clone();
        assert_eq!(sufficiency(&identity), 0.0);
        identity.complement_probs = None;
        assert!(matches!(comprehensiveness(&identity), Err(Error::MissingField { .. })));
    }

    #[test]
    fn tpr_gap_examples() {
        // class 0: group 0 TPR 1.0, group 1 TPR 0.9; class 1: 0.7 vs 1.0
        let mut recs = Vec::new();
        for i in 0..10 {
            recs.push(record(0, 0, 0));
            recs.push(record(0, if i == 0 { 1 } else { 0 }, 1));
            recs.push(record(1, if i < 3 { 0 } else { 1 }, 0));
            recs.push(record(1, 1, 1));
        }
        let v = tpr_gap_rms(&recs, 2).unwrap();
        assert!((v - ((0.01 + 0.09) / 2.0f64).sqrt()).abs() < 1e-12);
        assert!((v - 0.2236).abs() < 1e-4);
        let balanced = vec![record(0, 0, 0), record(0, 0, 1)];
        assert_eq!(tpr_gap_rms(&balanced, 2).unwrap(), 0.0);
        assert!(matches!(
            tpr_gap_rms(&[record(0, 0, 0)], 2),
            Err(Error::NoEvaluableClass)
        ));
    }

    #[test]
    fn tradeoff_csv_round_trip() {
        let recs = vec![record(0, 0, 0), record(1, 0, 1), record(1, 1, 0), record(0, 0, 1)];
        let row = TradeoffRow::from_records("energy", 0.5, 1.0, &recs, TaskMetric::Accuracy, 2, 2).unwrap();
        assert_eq!(row.task_metric, 0.75);
        assert_eq!(row.bias_f1, 1.0);
        let csv = TradeoffRow::to_csv(&[row.clone()]);
        assert!(csv.starts_with(TRADEOFF_HEADER));
        let line = csv.lines().nth(1).unwrap();
        assert_eq!(TradeoffRow::from_csv_line(line).unwrap(), row);
    }

    #[test]
    fn records_jsonl_round_trip() {
        let recs = vec![record(0, 1, 1), record(1, 1, 0)];
        let text = PredictionRecord::to_jsonl(&recs);
        assert_eq!(PredictionRecord::from_jsonl(&text).unwrap(), recs);
    }
}
