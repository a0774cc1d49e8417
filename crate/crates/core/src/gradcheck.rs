//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{NcartConfig, Task};
use crate::error::{NcartError, Result};
use crate::matrix::Matrix;
use crate::model::{NcartModel, Targets};
use crate::reference::{DoubleDouble, Real, ReferenceLoss};
use crate::sparse::SparseFn;

pub const FD_STEP: f64 = 1e-5;
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Index of the coordinate with the largest relative error.
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

impl GradReport {
    fn empty() -> Self {
        Self {
            max_rel_err: 0.0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
            checked: 0,
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }

    /// Keeps the worse of two reports.
    pub fn merge(&mut self, other: &GradReport) {
        if other.max_rel_err > self.max_rel_err {
            let checked = self.checked;
            *self = other.clone();
            self.checked += checked;
        } else {
            self.checked += other.checked;
        }
    }
}

pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Checks every coordinate of `analytic` against central differences of `f` at `x`.
pub fn check_gradient(f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> Result<GradReport> {
    let coords: Vec<usize> = (0..x.len()).collect();
    check_coordinates(f, x, analytic, &coords)
}

/// Like [`check_gradient`] but restricted to `coords`.
pub fn check_coordinates(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
) -> Result<GradReport> {
    if x.len() != analytic.len() {
        return Err(NcartError::InvalidInput(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            x.len()
        )));
    }
    let mut probe = x.to_vec();
    let mut report = GradReport::empty();
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + FD_STEP;
        let up = f(&probe);
        probe[i] = orig - FD_STEP;
        let down = f(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(NcartError::NonFinite(format!("objective near coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * FD_STEP);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_err || report.checked == 0 {
            report.max_rel_err = err;
            report.worst_index = i;
            report.worst_analytic = analytic[i];
            report.worst_numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Selection rows closer than this to a support change are not checked.
pub const SUPPORT_MARGIN: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradReport {
    pub report: GradReport,
    /// Name of the tensor holding the worst coordinate.
    pub worst_tensor: String,
    /// Coordinates left out because a step of `FD_STEP` crosses a kink.
    pub skipped: usize,
}

/// Checks the backward pass of `model` on one train-mode batch.
///
/// Numeric derivatives come from an independent re-evaluation of the loss in
/// double-double arithmetic, so their error is dominated by the `O(h²)`
/// truncation term instead of float cancellation. For every block and every
/// tensor kind at most `per_kind` coordinates are drawn at random (all of
/// them when there are fewer).
pub fn check_model(model: &NcartModel, x: &Matrix, targets: Targets<'_>, per_kind: usize, seed: u64) -> Result<ModelGradReport> {
    let (_, grads) = model.clone().loss_and_grad(x, targets)?;
    if !grads.is_finite() {
        return Err(NcartError::NonFinite("analytic gradient".into()));
    }
    let reference = ReferenceLoss::<DoubleDouble>::new(model, x, targets)?;
    let names = model.param_names();
    let params = model.params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut groups: Vec<(String, Vec<(usize, usize)>)> = Vec::new();
    for (t, name) in names.iter().enumerate() {
        let (block, rest) = name.split_once('.').unwrap_or((name, ""));
        let kind = format!("{block}.{}", rest.rsplit('.').next().unwrap_or(rest));
        let coords = (0..params[t].len()).map(|i| (t, i));
        match groups.iter_mut().find(|(k, _)| *k == kind) {
            Some((_, v)) => v.extend(coords),
            None => groups.push((kind, coords.collect())),
        }
    }

    let mut report = GradReport::empty();
    let mut worst_tensor = String::new();
    let mut skipped = 0;
    for (kind, coords) in &groups {
        let picks: Vec<(usize, usize)> = if coords.len() <= per_kind {
            coords.clone()
        } else {
            sample(&mut rng, coords.len(), per_kind).into_iter().map(|i| coords[i]).collect()
        };
        for (t, i) in picks {
            if kind.ends_with(".selection") && near_support_change(model, params[t], i)? {
                skipped += 1;
                continue;
            }
            let up = reference.probe(t, i, FD_STEP)?;
            let down = reference.probe(t, i, -FD_STEP)?;
            if up.crossed_kink || down.crossed_kink {
                skipped += 1;
                continue;
            }
            let numeric = ((up.loss - down.loss) / DoubleDouble::of(2.0 * FD_STEP)).to_f64();
            if !numeric.is_finite() {
                return Err(NcartError::NonFinite(format!("objective near {}[{i}]", names[t])));
            }
            let analytic = grads.0[t][i];
            let err = relative_error(analytic, numeric);
            if err > report.max_rel_err || report.checked == 0 {
                report.max_rel_err = err;
                report.worst_index = i;
                report.worst_analytic = analytic;
                report.worst_numeric = numeric;
                worst_tensor = names[t].clone();
            }
            report.checked += 1;
        }
    }
    Ok(ModelGradReport {
        report,
        worst_tensor,
        skipped,
    })
}

/// Tolerance on the relative error of a whole-model check.
pub const MODEL_TOL: f64 = 1e-4;
/// Shape of the models in the corner suite.
pub const SUITE_FEATURES: usize = 10;
pub const SUITE_BATCH: usize = 16;
pub const SUITE_HIDDEN: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct CornerResult {
    pub config: NcartConfig,
    pub task: Task,
    pub result: ModelGradReport,
}

impl CornerResult {
    pub fn passes(&self) -> bool {
        self.result.report.passes(MODEL_TOL)
    }
}

/// Every extreme configuration (blocks, trees, selection size and sparse
/// mapping at the ends of their ranges) at hidden width [`SUITE_HIDDEN`].
pub fn corner_configs() -> Vec<NcartConfig> {
    let mut out = Vec::new();
    for blocks in [2, 4] {
        for trees in [8, 64] {
            for sel_dim in [2, 10] {
                for sparse_fn in [SparseFn::Sparsemax, SparseFn::Entmax] {
                    out.push(NcartConfig {
                        blocks,
                        trees,
                        sel_dim,
                        sparse_fn,
                        hidden: Some(SUITE_HIDDEN),
                        ..NcartConfig::default()
                    });
                }
            }
        }
    }
    out
}

/// Runs [`check_model`] for every corner and seed on a random batch. Seed 1
/// uses a regression head, the others a three-class head.
pub fn check_corners(seeds: &[u64], per_kind: usize) -> Result<Vec<CornerResult>> {
    let mut out = Vec::new();
    for &seed in seeds {
        for base in corner_configs() {
            let config = NcartConfig { seed, ..base };
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let x = Matrix::from_fn(SUITE_BATCH, SUITE_FEATURES, |_, _| rng.gen_range(-2.0..2.0));
            let (task, outputs) = if seed == 1 { (Task::Regression, 1) } else { (Task::Multiclass, 3) };
            let model = NcartModel::init(&config, SUITE_FEATURES, outputs, task, seed)?;
            let values = Matrix::from_fn(SUITE_BATCH, 1, |_, _| rng.gen_range(-1.0..1.0));
            let classes: Vec<usize> = (0..SUITE_BATCH).map(|_| rng.gen_range(0..3)).collect();
            let targets = match task {
                Task::Regression => Targets::Values(&values),
                _ => Targets::Classes(&classes),
            };
            let result = check_model(&model, &x, targets, per_kind, seed)?;
            out.push(CornerResult { config, task, result });
        }
    }
    Ok(out)
}

fn near_support_change(model: &NcartModel, scores: &[f64], index: usize) -> Result<bool> {
    let block = model
        .blocks
        .iter()
        .find(|b| b.has_selection())
        .expect("validated model has a selection block");
    let n = block.in_dim();
    let row = index / n;
    let margin = block.sparse_fn.support_margin(&scores[row * n..(row + 1) * n])?;
    Ok(margin < SUPPORT_MARGIN + FD_STEP)
}
