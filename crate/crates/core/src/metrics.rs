//! SR, GR, ER, TrainR, TestR and patch activation statistics, computed from
//! recorded predictions.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::sme::{ActivationData, SmeRun, StepKind};

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Fraction of edits whose immediate post-edit prediction is the target.
pub fn success_rate(run: &SmeRun) -> Option<f64> {
    let mut t = 0;
    let mut ok = 0;
    for r in run.edits() {
        t += 1;
        ok += usize::from(r.post_prediction.as_ref() == Some(&r.target));
    }
    ratio(ok, t)
}

/// GR over all (edit, equivalent) pairs, plus the number of edits without
/// equivalents (excluded).
pub fn generalization_rate(run: &SmeRun) -> (Option<f64>, usize) {
    let mut pairs = 0;
    let mut ok = 0;
    let mut excluded = 0;
    for r in run.edits() {
        if r.equivalents_correct.is_empty() {
            excluded += 1;
        }
        pairs += r.equivalents_correct.len();
        ok += r.equivalents_correct.iter().filter(|&&c| c).count();
    }
    (ratio(ok, pairs), excluded)
}

/// Fraction of edited examples the final model still gets right.
pub fn edit_retain_rate(run: &SmeRun) -> Option<f64> {
    let ok = run
        .edits()
        .zip(&run.final_edit_predictions)
        .filter(|(r, p)| **p == r.target)
        .count();
    ratio(ok, run.final_edit_predictions.len())
}

fn count(v: &[bool]) -> usize {
    v.iter().filter(|&&c| c).count()
}

/// `(TrainR, TestR)`: final correct counts over initial correct counts.
pub fn retain_rates(run: &SmeRun) -> (Option<f64>, Option<f64>) {
    (
        ratio(count(&run.d_tr_final), count(&run.d_tr_initial)),
        ratio(count(&run.test_final), count(&run.test_initial)),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// Population standard deviation; `None` for an empty sample.
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            n: xs.len(),
        })
    }
}

/// |a_p| of every patch on its own query (Edit), on the queries of earlier
/// edits (Past-edit) and on random test queries (Random).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub edit: Option<MeanStd>,
    pub past_edit: Option<MeanStd>,
    pub random: Option<MeanStd>,
    /// `matrix[i][j]` = |a_i| on the query of patch `j`.
    pub matrix: Vec<Vec<f64>>,
    pub diagonal_mean: Option<f64>,
    pub off_diagonal_mean: Option<f64>,
}

pub fn activation_stats(data: &ActivationData) -> Result<ActivationStats> {
    let n = data.patches.len();
    let own = data.patches.activations(&data.patch_queries, data.activation)?;
    let rnd = data.patches.activations(&data.random_queries, data.activation)?;
    let matrix: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| own.get2(j, i).abs()).collect())
        .collect();
    let mut edit = Vec::with_capacity(n);
    let mut past = Vec::new();
    let mut random = Vec::new();
    let mut off = Vec::new();
    for (i, row) in matrix.iter().enumerate() {
        edit.push(row[i]);
        for (j, &v) in row.iter().enumerate() {
            if j != i {
                off.push(v);
            }
            if data.patch_edit[j] < data.patch_edit[i] {
                past.push(v);
            }
        }
        let rows = rnd.shape()[0];
        random.extend((0..rows).map(|r| rnd.get2(r, i).abs()));
    }
    let mean = |v: &[f64]| MeanStd::of(v).map(|m| m.mean);
    Ok(ActivationStats {
        diagonal_mean: mean(&edit),
        off_diagonal_mean: mean(&off),
        edit: MeanStd::of(&edit),
        past_edit: MeanStd::of(&past),
        random: MeanStd::of(&random),
        matrix,
    })
}

/// Everything reported for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmeReport {
    pub editor: String,
    pub fold: usize,
    /// Edits made (E).
    pub edits: usize,
    /// Stream examples `f_0` mispredicts (N).
    pub mistakes: usize,
    pub sr: Option<f64>,
    pub gr: Option<f64>,
    pub gr_excluded: usize,
    pub er: Option<f64>,
    pub train_r: Option<f64>,
    pub test_r: Option<f64>,
    pub patches: usize,
    pub max_patches_per_edit: usize,
    pub param_growth: usize,
    pub failures: usize,
    pub activation: Option<ActivationStats>,
}

pub fn report(run: &SmeRun) -> Result<SmeReport> {
    let (gr, gr_excluded) = generalization_rate(run);
    let (train_r, test_r) = retain_rates(run);
    let activation = match &run.activation {
        Some(a) if !a.patches.is_empty() => Some(activation_stats(a)?),
        _ => None,
    };
    Ok(SmeReport {
        editor: run.editor.clone(),
        fold: run.fold,
        edits: run.edits().count(),
        mistakes: run.initial_mistakes,
        sr: success_rate(run),
        gr,
        gr_excluded,
        er: edit_retain_rate(run),
        train_r,
        test_r,
        patches: run.total_patches(),
        max_patches_per_edit: run.edits().map(|r| r.patches_added).max().unwrap_or(0),
        param_growth: run.final_params - run.initial_params,
        failures: run
            .records
            .iter()
            .filter(|r| r.kind == StepKind::Edited && r.post_prediction.as_ref() != Some(&r.target))
            .count(),
        activation,
    })
}

/// Mean and deviation of each metric across folds (absent values skipped).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub editor: String,
    pub folds: usize,
    pub edits: Option<MeanStd>,
    pub sr: Option<MeanStd>,
    pub gr: Option<MeanStd>,
    pub er: Option<MeanStd>,
    pub train_r: Option<MeanStd>,
    pub test_r: Option<MeanStd>,
    pub edit_activation: Option<MeanStd>,
    pub past_edit_activation: Option<MeanStd>,
    pub random_activation: Option<MeanStd>,
}

pub fn summarize(reports: &[SmeReport]) -> FoldSummary {
    let stat = |f: &dyn Fn(&SmeReport) -> Option<f64>| {
        MeanStd::of(&reports.iter().filter_map(f).collect::<Vec<_>>())
    };
    let act = |f: &dyn Fn(&ActivationStats) -> Option<MeanStd>| {
        stat(&|r: &SmeReport| r.activation.as_ref().and_then(f).map(|m| m.mean))
    };
    FoldSummary {
        editor: reports.first().map(|r| r.editor.clone()).unwrap_or_default(),
        folds: reports.len(),
        edits: stat(&|r| Some(r.edits as f64)),
        sr: stat(&|r| r.sr),
        gr: stat(&|r| r.gr),
        er: stat(&|r| r.er),
        train_r: stat(&|r| r.train_r),
        test_r: stat(&|r| r.test_r),
        edit_activation: act(&|a| a.edit),
        past_edit_activation: act(&|a| a.past_edit),
        random_activation: act(&|a| a.random),
    }
}
