use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use ncart_core::data::{load_csv, load_features};
use ncart_core::gradcheck::{check_corners, MODEL_TOL};
use ncart_core::importance::feature_importance;
use ncart_core::odt::{fit_two_odts, refine, AxisTree};
use ncart_core::train::{fit, kfold_cv, random_search};
use ncart_core::{Dataset, ModelFile, Task};

use crate::args::{Flags, GradcheckFlags, OdtFlags};
use crate::report;
use crate::settings::{config_file, RunConfig, SEED_ENV};
use crate::UsageError;

fn resolve(flags: &Flags) -> Result<RunConfig, UsageError> {
    RunConfig::resolve(flags, std::env::var(SEED_ENV).ok().as_deref())
}

/// Writes `text` to `path`, or to stdout when no path is given.
fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn load_training_data(run: &RunConfig) -> Result<Dataset> {
    let data = run.require_data()?;
    let target = run.require_target()?;
    let task = run.require_task()?;
    Ok(load_csv(data, target, task, &run.cat_cols, None)?)
}

pub fn train(flags: &Flags) -> Result<ExitCode> {
    let run = resolve(flags)?;
    let out = run.out.clone().ok_or_else(|| UsageError("missing --out".into()))?;
    let data = load_training_data(&run)?;
    let (model, report) = fit(&data, &run.ncart)?;
    ModelFile::new(model, &run.ncart, &data).save(&out)?;
    if let Some(path) = &run.report {
        emit(Some(path), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    }
    let last = report.epoch_losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} epochs in {:.2}s, final loss {last:.6}; model written to {}",
        report.epoch_losses.len(),
        report.seconds,
        out.display()
    );
    if !report.completed {
        bail!(
            "timeout of {}s reached after {} epochs; partial model and report written",
            run.ncart.timeout_secs,
            report.epoch_losses.len()
        );
    }
    Ok(ExitCode::SUCCESS)
}

pub fn cv(flags: &Flags) -> Result<ExitCode> {
    let run = resolve(flags)?;
    let data = load_training_data(&run)?;
    let report = kfold_cv(&data, &run.ncart)?;
    let text = report::cv_csv(&report);
    emit(run.report.as_deref(), &text)?;
    if run.report.is_some() {
        if data.schema.task == Task::Regression {
            println!("MSE {}", text.lines().last().unwrap_or_default());
        } else {
            println!(
                "AUC {}  F1 {}  ({} folds, {:.2}s)",
                report::percent(report.summary(|f| f.auc)),
                report::percent(report.summary(|f| f.f1)),
                report.folds.len(),
                report.seconds
            );
        }
    }
    if !report.completed {
        bail!("timeout of {}s reached; partial report written", run.ncart.timeout_secs);
    }
    Ok(ExitCode::SUCCESS)
}

pub fn tune(flags: &Flags) -> Result<ExitCode> {
    let run = resolve(flags)?;
    let data = load_training_data(&run)?;
    let result = random_search(&data, &run.ncart)?;
    let best = result.best_trial();
    emit(run.out.as_deref(), &config_file(&best.config))?;
    if let Some(path) = &run.report {
        emit(Some(path), &report::trials_csv(&result))?;
    }
    let cfg = &best.config;
    eprintln!(
        "best trial {}: blocks={} trees={} sel_dim={} sparse_fn={} score={}",
        best.index, cfg.blocks, cfg.trees, cfg.sel_dim, cfg.sparse_fn, best.score
    );
    if let Some(r) = &best.report {
        eprint!("{}", report::cv_csv(r));
    }
    Ok(ExitCode::SUCCESS)
}

fn load_model(run: &RunConfig) -> Result<ModelFile> {
    let path = run.require_model()?;
    ModelFile::load(path).with_context(|| format!("cannot load model {}", path.display()))
}

pub fn predict(flags: &Flags) -> Result<ExitCode> {
    let run = resolve(flags)?;
    let data = run.require_data()?.to_path_buf();
    let file = load_model(&run)?;
    let (x, unseen) = load_features(&data, &file.schema, &file.categories)?;
    if unseen > 0 {
        warn!("{unseen} categorical values were not seen in training");
    }
    let pred = file.model.predict(&x)?;
    let columns = if file.schema.task.is_classification() {
        file.class_names.clone()
    } else {
        vec![file.schema.target.clone()]
    };
    emit(run.out.as_deref(), &report::predictions_csv(&columns, &pred))?;
    info!("{} rows predicted", pred.rows());
    Ok(ExitCode::SUCCESS)
}

pub fn importance(flags: &Flags) -> Result<ExitCode> {
    let run = resolve(flags)?;
    let data = run.require_data()?.to_path_buf();
    let file = load_model(&run)?;
    let (x, unseen) = load_features(&data, &file.schema, &file.categories)?;
    if unseen > 0 {
        warn!("{unseen} categorical values were not seen in training");
    }
    let imp = feature_importance(&file.model, &x)?;
    emit(run.out.as_deref(), &report::importance_csv(&file.schema.features, &imp))?;
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(flags: &GradcheckFlags) -> Result<ExitCode> {
    if flags.seeds == 0 || flags.per_kind == 0 {
        return Err(UsageError("--seeds and --per-kind must be positive".into()).into());
    }
    let seeds: Vec<u64> = (flags.seed..flags.seed + flags.seeds).collect();
    let results = check_corners(&seeds, flags.per_kind)?;
    let mut text = String::from("seed,task,blocks,trees,sel_dim,sparse_fn,checked,skipped,max_rel_err,worst,status\n");
    for r in &results {
        let c = &r.config;
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{:.3e},{},{}\n",
            c.seed,
            r.task,
            c.blocks,
            c.trees,
            c.sel_dim,
            c.sparse_fn,
            r.result.report.checked,
            r.result.skipped,
            r.result.report.max_rel_err,
            r.result.worst_tensor,
            if r.passes() { "PASS" } else { "FAIL" }
        ));
    }
    emit(flags.report.as_deref(), &text)?;
    let failed = results.iter().filter(|r| !r.passes()).count();
    let worst = results.iter().map(|r| r.result.report.max_rel_err).fold(0.0, f64::max);
    eprintln!(
        "{} of {} checks passed (tolerance {MODEL_TOL:e}, worst {worst:.3e})",
        results.len() - failed,
        results.len()
    );
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

pub fn odt_approx(flags: &OdtFlags) -> Result<ExitCode> {
    let text = fs::read_to_string(&flags.data).with_context(|| format!("cannot read {}", flags.data.display()))?;
    let tree: AxisTree = text
        .parse()
        .with_context(|| format!("cannot parse tree in {}", flags.data.display()))?;
    let grid = refine(&tree, 2)?;
    let fit = fit_two_odts(&grid)?;
    print!("{}", report::odt_text(&grid, &fit));
    Ok(ExitCode::SUCCESS)
}
