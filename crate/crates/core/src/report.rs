//! Deterministic CSV renderings of runs and reports.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::metrics::{FoldSummary, MeanStd, SmeReport};
use crate::sme::{SmeRun, StepKind};

fn f(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

fn rate(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// One row per edit: running SR and the traced ER/TrainR/TestR.
pub fn steps_csv(runs: &[SmeRun]) -> String {
    let mut out = String::from("fold,t,example_id,edit,sr_so_far,er,train_r,test_r,patches,steps,converged\n");
    for run in runs {
        let train0 = run.d_tr_initial.iter().filter(|&&c| c).count();
        let test0 = run.test_initial.iter().filter(|&&c| c).count();
        for r in run.records.iter().filter(|r| r.kind == StepKind::Edited) {
            let (edit, sr, er, tr, te) = match &r.trace {
                Some(t) => (
                    t.edits.to_string(),
                    rate(t.successes, t.edits),
                    rate(t.retained, t.edits),
                    rate(t.train_correct, train0),
                    rate(t.test_correct, test0),
                ),
                None => (String::new(), None, None, None, None),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                run.fold,
                r.t,
                r.example_id,
                edit,
                f(sr),
                f(er),
                f(tr),
                f(te),
                r.patches_added,
                r.steps,
                r.converged
            );
        }
    }
    out
}

fn ms(m: Option<MeanStd>) -> (Option<f64>, Option<f64>) {
    (m.map(|m| m.mean), m.map(|m| m.std))
}

/// One row per fold, then `mean` and `std` rows.
pub fn summary_csv(reports: &[SmeReport], summary: &FoldSummary) -> String {
    let mut out = String::from(
        "editor,fold,edits,mistakes,sr,gr,er,train_r,test_r,patches,param_growth,edit_act,past_edit_act,random_act\n",
    );
    for r in reports {
        let act = |g: fn(&crate::metrics::ActivationStats) -> Option<MeanStd>| {
            f(r.activation.as_ref().and_then(g).map(|m| m.mean))
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.editor,
            r.fold,
            r.edits,
            r.mistakes,
            f(r.sr),
            f(r.gr),
            f(r.er),
            f(r.train_r),
            f(r.test_r),
            r.patches,
            r.param_growth,
            act(|a| a.edit),
            act(|a| a.past_edit),
            act(|a| a.random),
        );
    }
    let cols = [
        summary.edits,
        summary.sr,
        summary.gr,
        summary.er,
        summary.train_r,
        summary.test_r,
        summary.edit_activation,
        summary.past_edit_activation,
        summary.random_activation,
    ];
    for (label, pick) in [("mean", 0), ("std", 1)] {
        let v: Vec<String> = cols
            .iter()
            .map(|c| {
                let (m, s) = ms(*c);
                f(if pick == 0 { m } else { s })
            })
            .collect();
        let _ = writeln!(
            out,
            "{},{label},{},,{},{},{},{},{},,,{},{},{}",
            summary.editor, v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]
        );
    }
    out
}

/// Dense patch × mistake matrix of |a|.
pub fn matrix_csv(matrix: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for row in matrix {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// One row per memory capacity.
pub fn memory_sweep_csv(rows: &[(usize, FoldSummary)]) -> String {
    let mut out = String::from("capacity,sr,sr_std,er,train_r,train_r_std,test_r\n");
    for (cap, s) in rows {
        let _ = writeln!(
            out,
            "{cap},{},{},{},{},{},{}",
            f(s.sr.map(|m| m.mean)),
            f(s.sr.map(|m| m.std)),
            f(s.er.map(|m| m.mean)),
            f(s.train_r.map(|m| m.mean)),
            f(s.train_r.map(|m| m.std)),
            f(s.test_r.map(|m| m.mean)),
        );
    }
    out
}

/// Writes through a temporary file and renames, so readers never see a
/// partial report.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
