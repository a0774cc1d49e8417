//! Text reports. Floats in per-row output use Rust's shortest round-trip
//! formatting so equal values always print identically.

use std::fmt::Write as _;

use ncart_core::importance::{ranking, Importance};
use ncart_core::odt::{Grid, OdtFit};
use ncart_core::train::SearchResult;
use ncart_core::{Matrix, TrainReport};

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

/// `mean±std` in percent with two decimals.
pub fn percent(summary: Option<(f64, f64)>) -> String {
    summary.map_or(String::new(), |(m, s)| format!("{:.2}±{:.2}", 100.0 * m, 100.0 * s))
}

pub fn cv_csv(report: &TrainReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "# {}-fold cross-validation, seed {}; footer is mean±std over folds in percent \
         (MSE unscaled), std uses the population convention (divides by k)",
        report.folds.len(),
        report.seed
    );
    if !report.completed {
        let _ = writeln!(s, "# incomplete: timeout reached");
    }
    let _ = writeln!(s, "fold,auc,f1,mse,seconds");
    for f in &report.folds {
        let _ = writeln!(s, "{},{},{},{},{:.3}", f.fold, opt(f.auc), opt(f.f1), opt(f.mse), f.seconds);
    }
    let mse = report
        .summary(|f| f.mse)
        .map_or(String::new(), |(m, sd)| format!("{m:.6}±{sd:.6}"));
    let _ = writeln!(
        s,
        "mean±std,{},{},{},{:.3}",
        percent(report.summary(|f| f.auc)),
        percent(report.summary(|f| f.f1)),
        mse,
        report.seconds
    );
    s
}

pub fn trials_csv(result: &SearchResult) -> String {
    let mut s = String::from("trial,blocks,trees,sel_dim,sparse_fn,score,best\n");
    for t in &result.trials {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            t.index,
            t.config.blocks,
            t.config.trees,
            t.config.sel_dim,
            t.config.sparse_fn,
            t.score,
            t.index == result.best
        );
    }
    s
}

/// One column per class (or the target for regression), one row per sample.
pub fn predictions_csv(columns: &[String], pred: &Matrix) -> String {
    let mut s = columns.join(",");
    s.push('\n');
    for r in 0..pred.rows() {
        let row: Vec<String> = pred.row(r).iter().map(f64::to_string).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Features sorted by descending raw score.
pub fn importance_csv(features: &[String], imp: &Importance) -> String {
    let mut s = String::from("feature,raw,normalized\n");
    for j in ranking(&imp.raw) {
        let _ = writeln!(s, "{},{},{}", features[j], imp.raw[j], imp.normalized[j]);
    }
    s
}

pub fn odt_text(grid: &Grid, fit: &OdtFit) -> String {
    let list = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ");
    let mut s = String::new();
    for (axis, t) in grid.thresholds.iter().enumerate() {
        let _ = writeln!(s, "thresholds[{axis}]: {}", list(t));
    }
    let _ = writeln!(s, "a: {}", list(&fit.a));
    let _ = writeln!(s, "b: {}", list(&fit.b));
    let _ = writeln!(s, "residual: {}", fit.residual);
    let _ = writeln!(s, "sweeps: {}", fit.trace.len().saturating_sub(1));
    let _ = writeln!(s, "cells (row = axis-0 interval, column = axis-1 interval): tree / a+b");
    if let Ok(table) = grid.table() {
        for (r, row) in table.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, v)| format!("{v} / {}", fit.a[r] + fit.b[c]))
                .collect();
            let _ = writeln!(s, "  {}", cells.join(" | "));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use ncart_core::train::FoldMetrics;
    use ncart_core::NcartConfig;

    fn report(aucs: &[f64]) -> TrainReport {
        TrainReport {
            config: NcartConfig::default(),
            seed: 0,
            epoch_losses: vec![],
            val_losses: vec![],
            best_epoch: None,
            folds: aucs
                .iter()
                .enumerate()
                .map(|(i, &a)| FoldMetrics {
                    fold: i,
                    auc: Some(a),
                    f1: Some(0.5),
                    mse: None,
                    epochs: 3,
                    seconds: 0.25,
                })
                .collect(),
            seconds: 1.0,
            completed: true,
        }
    }

    #[test]
    fn footer_uses_population_std_in_percent() {
        let text = cv_csv(&report(&[0.8, 0.9]));
        let footer = text.lines().last().unwrap();
        assert_eq!(footer, "mean±std,85.00±5.00,50.00±0.00,,1.000");
        assert!(text.lines().next().unwrap().contains("population"));
        assert_eq!(text.lines().filter(|l| l.starts_with(char::is_numeric)).count(), 2);
    }

    #[test]
    fn predictions_round_trip_through_text() {
        let m = Matrix::from_vec(2, 2, vec![0.1, 0.9, 1.0 / 3.0, 2.0 / 3.0]).unwrap();
        let text = predictions_csv(&["a".into(), "b".into()], &m);
        let back: Vec<f64> = text
            .lines()
            .skip(1)
            .flat_map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>())
            .collect();
        assert_eq!(back, m.as_slice());
    }
}
