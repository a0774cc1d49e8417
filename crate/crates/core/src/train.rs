//! Adam, the minibatch training loop, k-fold cross-validation and random
//! hyperparameter search.

use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{NcartConfig, Task, BLOCK_CHOICES, SEL_DIM_RANGE, TREE_CHOICES};
use crate::data::{Dataset, Labels};
use crate::error::{NcartError, Result};
use crate::metrics;
use crate::model::{Gradients, NcartModel};
use crate::sparse::SparseFn;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Fraction of the training rows held out when early stopping is enabled.
/// Optimizer steps before early stopping tracks the validation loss; until
/// then the normalization running statistics still carry their initial values.
pub const WARMUP_STEPS: usize = 50;
pub const VALIDATION_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(sizes: &[usize], lr: f64) -> Self {
        Self {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_model(model: &NcartModel, lr: f64) -> Self {
        let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
        Self::new(&sizes, lr)
    }

    /// One bias-corrected Adam update. Nothing is modified when a gradient
    /// entry is not finite.
    pub fn update(&mut self, params: Vec<&mut [f64]>, grads: &Gradients) -> Result<()> {
        if params.len() != self.m.len() || grads.0.len() != self.m.len() {
            return Err(NcartError::InvalidInput(format!(
                "adam state tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.0.len()
            )));
        }
        for (t, (p, g)) in params.iter().zip(&grads.0).enumerate() {
            if p.len() != g.len() || g.len() != self.m[t].len() {
                return Err(NcartError::InvalidInput(format!("tensor {t}: shape changed between steps")));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(NcartError::NonFinite(format!("gradient of tensor {t} at entry {i}")));
            }
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (t, (p, g)) in params.into_iter().zip(&grads.0).enumerate() {
            let (m, v) = (&mut self.m[t], &mut self.v[t]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Held-out metrics of one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub auc: Option<f64>,
    pub f1: Option<f64>,
    pub mse: Option<f64>,
    pub epochs: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: NcartConfig,
    pub seed: u64,
    /// Mean training loss per completed epoch.
    pub epoch_losses: Vec<f64>,
    /// Validation loss per epoch when early stopping is on.
    pub val_losses: Vec<f64>,
    /// Epoch whose parameters were kept (early stopping only).
    pub best_epoch: Option<usize>,
    pub folds: Vec<FoldMetrics>,
    pub seconds: f64,
    /// False when the run hit the timeout.
    pub completed: bool,
}

impl TrainReport {
    fn new(config: &NcartConfig) -> Self {
        Self {
            config: config.clone(),
            seed: config.seed,
            epoch_losses: Vec::new(),
            val_losses: Vec::new(),
            best_epoch: None,
            folds: Vec::new(),
            seconds: 0.0,
            completed: true,
        }
    }

    /// Mean and population standard deviation of a per-fold metric.
    pub fn summary(&self, metric: impl Fn(&FoldMetrics) -> Option<f64>) -> Option<(f64, f64)> {
        let vals: Vec<f64> = self.folds.iter().filter_map(metric).collect();
        if vals.is_empty() {
            return None;
        }
        let k = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / k;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
        Some((mean, var.sqrt()))
    }
}

/// Independent 64-bit seed for stream `stream` of `base`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream.wrapping_add(1));
    rng.next_u64()
}

/// Splits `0..n` into consecutive batches of `size`; a trailing batch of one
/// row joins the previous batch because train-mode batch norm needs two.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().expect("at least one batch") = &order[start..];
    }
    out
}

fn check_trainable(data: &Dataset) -> Result<()> {
    if data.rows() < 2 {
        return Err(NcartError::InvalidInput(format!("training needs at least 2 rows, got {}", data.rows())));
    }
    if let Some(codes) = data.classes() {
        if codes.iter().all(|&c| c == codes[0]) {
            return Err(NcartError::InvalidInput("classification target has a single class".into()));
        }
    }
    Ok(())
}

fn split_validation(data: &Dataset, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..data.rows()).collect();
    idx.shuffle(rng);
    let n_val = ((data.rows() as f64 * VALIDATION_FRACTION).round() as usize).max(1);
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

/// Trains `model` in place on `data` with `config.epochs` passes of shuffled
/// minibatches. With early stopping, 10% of the rows are held out and the
/// parameters of the epoch with the lowest held-out loss are kept.
pub fn train(model: &mut NcartModel, data: &Dataset, config: &NcartConfig) -> Result<TrainReport> {
    train_until(model, data, config, Instant::now())
}

fn train_until(model: &mut NcartModel, data: &Dataset, config: &NcartConfig, start: Instant) -> Result<TrainReport> {
    config.validate()?;
    check_trainable(data)?;
    if data.features() != model.n_features || data.outputs() != model.n_outputs {
        return Err(NcartError::InvalidInput(format!(
            "model maps {} -> {}, data has {} features and {} outputs",
            model.n_features,
            model.n_outputs,
            data.features(),
            data.outputs()
        )));
    }
    let mut report = TrainReport::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1));
    let (train_rows, val) = match config.early_stop_patience {
        Some(_) if data.rows() >= 20 => {
            let (t, v) = split_validation(data, &mut rng);
            (t, Some(data.subset(&v)))
        }
        _ => ((0..data.rows()).collect(), None),
    };
    let train_set = data.subset(&train_rows);
    let mut adam = AdamState::for_model(model, config.lr);
    let mut best: Option<(f64, NcartModel)> = None;
    let mut since_best = 0;
    let mut steps = 0usize;
    let mut order: Vec<usize> = (0..train_set.rows()).collect();

    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in batches(&order, config.batch_size) {
            let part = train_set.subset(batch);
            let (loss, grads) = model.loss_and_grad(&part.x, part.targets())?;
            if !loss.is_finite() {
                return Err(NcartError::NonFinite(format!("training loss at epoch {epoch}")));
            }
            adam.update(model.params_mut(), &grads)?;
            steps += 1;
            total += loss * batch.len() as f64;
            if start.elapsed().as_secs_f64() > config.timeout_secs {
                report.completed = false;
                info!("timeout after {} epochs", report.epoch_losses.len());
                break 'epochs;
            }
        }
        report.epoch_losses.push(total / train_set.rows() as f64);

        if let (Some(val), Some(patience)) = (&val, config.early_stop_patience) {
            let out = model.infer(&val.x)?;
            let (val_loss, _) = model.loss(&out, val.targets())?;
            report.val_losses.push(val_loss);
            if steps < WARMUP_STEPS {
                continue;
            }
            if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
                best = Some((val_loss, model.clone()));
                report.best_epoch = Some(epoch);
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    debug!("early stop at epoch {epoch}");
                    break;
                }
            }
        }
    }
    if let Some((_, m)) = best {
        *model = m;
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Initializes a model from `config` and trains it on `data`.
pub fn fit(data: &Dataset, config: &NcartConfig) -> Result<(NcartModel, TrainReport)> {
    let mut model = NcartModel::init(config, data.features(), data.outputs(), data.schema.task, config.seed)?;
    let report = train(&mut model, data, config)?;
    Ok((model, report))
}

/// Fold index of every row. Each row draws a seeded sort key; classification
/// rows are dealt class by class into folds in key order, so every fold holds
/// each class within one sample of its share, and regression rows are sorted
/// by key and cut into contiguous folds.
pub fn fold_assignment(data: &Dataset, k: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    let keys: Vec<u64> = (0..data.rows()).map(|_| rng.next_u64()).collect();
    let classes = match &data.y {
        Labels::Classes { codes, names } => Some((codes.as_slice(), names.as_slice())),
        Labels::Values(_) => None,
    };
    assign_folds(classes, &keys, k)
}

/// Fold assignment from explicit per-row keys. The result depends only on
/// each row's (class, key) pair, not on row order.
pub fn assign_folds(classes: Option<(&[usize], &[String])>, keys: &[u64], k: usize) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(NcartError::Config(format!("need at least 2 folds, got {k}")));
    }
    let n = keys.len();
    if n < k {
        return Err(NcartError::InvalidInput(format!("{n} rows cannot fill {k} folds")));
    }
    let by_key = |mut idx: Vec<usize>| {
        idx.sort_by_key(|&i| keys[i]);
        idx
    };
    let mut fold = vec![0; n];
    match classes {
        Some((codes, names)) => {
            let mut next = 0;
            for (c, name) in names.iter().enumerate() {
                let members = by_key((0..n).filter(|&i| codes[i] == c).collect());
                if members.is_empty() {
                    continue;
                }
                if members.len() < k {
                    return Err(NcartError::InvalidInput(format!(
                        "class `{name}` has {} samples, fewer than {k} folds",
                        members.len()
                    )));
                }
                for i in members {
                    fold[i] = next % k;
                    next += 1;
                }
            }
        }
        None => {
            for (pos, i) in by_key((0..n).collect()).into_iter().enumerate() {
                fold[i] = pos * k / n;
            }
        }
    }
    Ok(fold)
}

/// Held-out metrics of `model` on `data`.
pub fn evaluate(model: &NcartModel, data: &Dataset) -> Result<(Option<f64>, Option<f64>, Option<f64>)> {
    let pred = model.predict(&data.x)?;
    match &data.y {
        Labels::Classes { codes, names } => {
            let auc = metrics::roc_auc_multiclass(&pred, codes).ok();
            let f1 = metrics::f1(&metrics::argmax_rows(&pred), codes, names.len())?;
            Ok((auc, Some(f1), None))
        }
        Labels::Values(v) => Ok((None, None, Some(metrics::mse(pred.as_slice(), v.as_slice())?))),
    }
}

/// Stratified k-fold cross-validation; fold `f` trains a fresh model seeded
/// from stream `f` of `config.seed`.
pub fn kfold_cv(data: &Dataset, config: &NcartConfig) -> Result<TrainReport> {
    config.validate()?;
    check_trainable(data)?;
    let start = Instant::now();
    let k = config.folds;
    let assignment = fold_assignment(data, k, config.seed)?;
    let runs: Vec<Result<(FoldMetrics, bool)>> = (0..k)
        .into_par_iter()
        .map(|f| {
            let fold_start = Instant::now();
            let train_rows: Vec<usize> = (0..data.rows()).filter(|&i| assignment[i] != f).collect();
            let test_rows: Vec<usize> = (0..data.rows()).filter(|&i| assignment[i] == f).collect();
            let fold_config = NcartConfig {
                seed: derive_seed(config.seed, f as u64 + 1),
                ..config.clone()
            };
            let train_set = data.subset(&train_rows);
            let mut model = NcartModel::init(&fold_config, data.features(), data.outputs(), data.schema.task, fold_config.seed)?;
            let rep = train_until(&mut model, &train_set, &fold_config, start)?;
            let (auc, f1, mse) = evaluate(&model, &data.subset(&test_rows))?;
            Ok((
                FoldMetrics {
                    fold: f,
                    auc,
                    f1,
                    mse,
                    epochs: rep.epoch_losses.len(),
                    seconds: fold_start.elapsed().as_secs_f64(),
                },
                rep.completed,
            ))
        })
        .collect();
    let mut report = TrainReport::new(config);
    for r in runs {
        let (m, completed) = r?;
        report.completed &= completed;
        report.folds.push(m);
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Draws one configuration from the search space, keeping the training
/// settings of `base`.
pub fn sample_config(rng: &mut impl Rng, base: &NcartConfig) -> NcartConfig {
    NcartConfig {
        blocks: BLOCK_CHOICES[rng.gen_range(0..BLOCK_CHOICES.len())],
        trees: TREE_CHOICES[rng.gen_range(0..TREE_CHOICES.len())],
        sel_dim: rng.gen_range(SEL_DIM_RANGE.0..=SEL_DIM_RANGE.1),
        sparse_fn: if rng.gen_bool(0.5) { SparseFn::Sparsemax } else { SparseFn::Entmax },
        ..base.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub config: NcartConfig,
    pub score: f64,
    pub report: Option<TrainReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: usize,
    pub trials: Vec<Trial>,
}

impl SearchResult {
    pub fn best_trial(&self) -> &Trial {
        &self.trials[self.best]
    }
}

/// Random search with an arbitrary scorer (higher is better). The first
/// trial wins ties; a NaN score never wins.
pub fn random_search_with<F>(base: &NcartConfig, mut score: F) -> Result<SearchResult>
where
    F: FnMut(usize, &NcartConfig) -> Result<(f64, Option<TrainReport>)>,
{
    base.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base.seed, 2));
    let mut trials: Vec<Trial> = Vec::with_capacity(base.trials);
    let mut best: Option<usize> = None;
    for index in 0..base.trials {
        let config = sample_config(&mut rng, base);
        let (s, report) = score(index, &config)?;
        info!(
            "trial {index}: blocks={} trees={} sel_dim={} {} -> {s:.5}",
            config.blocks, config.trees, config.sel_dim, config.sparse_fn
        );
        if !s.is_nan() && best.is_none_or(|b| s > trials[b].score) {
            best = Some(index);
        }
        trials.push(Trial { index, config, score: s, report });
    }
    let best = best.ok_or_else(|| NcartError::InvalidInput("every trial scored NaN".into()))?;
    Ok(SearchResult { best, trials })
}

/// Score used to rank configurations: mean fold AUC for classification,
/// negated mean fold MSE for regression.
pub fn cv_score(task: Task, report: &TrainReport) -> f64 {
    let summary = if task.is_classification() {
        report.summary(|f| f.auc)
    } else {
        report.summary(|f| f.mse.map(|m| -m))
    };
    summary.map_or(f64::NAN, |s| s.0)
}

/// Random search scored by k-fold cross-validation.
pub fn random_search(data: &Dataset, base: &NcartConfig) -> Result<SearchResult> {
    random_search_with(base, |_, config| {
        let report = kfold_cv(data, config)?;
        Ok((cv_score(data.schema.task, &report), Some(report)))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Schema;
    use crate::matrix::Matrix;

    fn blobs(rows: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut codes = Vec::new();
        let x = Matrix::from_fn(rows, 3, |r, c| {
            if c == 0 {
                codes.push(r % 2);
            }
            let shift = if r % 2 == 0 { -1.5 } else { 1.5 };
            rng.gen_range(-1.0..1.0) + if c < 2 { shift } else { 0.0 }
        });
        let schema = Schema {
            features: vec!["a".into(), "b".into(), "c".into()],
            target: "y".into(),
            categorical: vec![],
            task: Task::Binclass,
        };
        Dataset::from_parts(
            x,
            Labels::Classes {
                codes,
                names: vec!["0".into(), "1".into()],
            },
            schema,
        )
        .unwrap()
    }

    fn small_config() -> NcartConfig {
        NcartConfig {
            trees: 8,
            sel_dim: 2,
            hidden: Some(8),
            batch_size: 64,
            epochs: 5,
            ..NcartConfig::default()
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let mut p = vec![vec![1.0, -2.0], vec![3.0]];
        let mut adam = AdamState::new(&[2, 1], 1e-3);
        let g = Gradients(vec![vec![0.0, 0.0], vec![0.0]]);
        for _ in 0..3 {
            adam.update(p.iter_mut().map(|v| v.as_mut_slice()).collect(), &g).unwrap();
        }
        assert_eq!(p, vec![vec![1.0, -2.0], vec![3.0]]);
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        let mut p = [vec![0.5]];
        let mut adam = AdamState::new(&[1], 1e-3);
        adam.update(vec![p[0].as_mut_slice()], &Gradients(vec![vec![1.0]])).unwrap();
        // m_hat = 1, v_hat = 1 after bias correction.
        let expected = 0.5 - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((p[0][0] - expected).abs() < 1e-12);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut p = [vec![0.5]];
        let mut adam = AdamState::new(&[1], 1e-3);
        assert!(adam.update(vec![p[0].as_mut_slice()], &Gradients(vec![vec![f64::NAN]])).is_err());
        assert_eq!(p[0][0], 0.5);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn trailing_singleton_batch_is_merged() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.len(), 2);
        assert_eq!(b[1], &[4, 5, 6, 7, 8]);
        let b = batches(&order, 3);
        assert_eq!(b.len(), 3);
        let order: Vec<usize> = (0..10).collect();
        assert_eq!(batches(&order, 4).last().unwrap().len(), 2);
    }

    #[test]
    fn zero_epochs_leave_the_model_unchanged() {
        let data = blobs(40, 1);
        let config = NcartConfig { epochs: 0, ..small_config() };
        let mut model = NcartModel::init(&config, 3, 2, Task::Binclass, 0).unwrap();
        let before = model.clone();
        let report = train(&mut model, &data, &config).unwrap();
        assert_eq!(model, before);
        assert!(report.epoch_losses.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_losses_finite() {
        let data = blobs(100, 2);
        let (m1, r1) = fit(&data, &small_config()).unwrap();
        let (m2, r2) = fit(&data, &small_config()).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(r1.epoch_losses, r2.epoch_losses);
        assert_eq!(r1.epoch_losses.len(), 5);
        assert!(r1.epoch_losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn folds_partition_and_stratify() {
        let data = blobs(53, 3);
        let a = fold_assignment(&data, 5, 9).unwrap();
        assert_eq!(a, fold_assignment(&data, 5, 9).unwrap());
        let codes = data.classes().unwrap();
        let total_pos = codes.iter().filter(|&&c| c == 1).count() as f64;
        for f in 0..5 {
            let members: Vec<usize> = (0..53).filter(|&i| a[i] == f).collect();
            assert!(!members.is_empty());
            let pos = members.iter().filter(|&&i| codes[i] == 1).count() as f64;
            let expected = total_pos * members.len() as f64 / 53.0;
            assert!((pos - expected).abs() <= 1.0, "fold {f}: {pos} vs {expected}");
        }
    }

    #[test]
    fn too_few_samples_per_class_is_an_error() {
        let data = blobs(6, 4);
        assert!(fold_assignment(&data, 5, 0).is_err());
    }

    #[test]
    fn search_samples_inside_the_space_and_follows_the_scorer() {
        let base = NcartConfig { trials: 30, ..small_config() };
        let result = random_search_with(&base, |_, c| Ok((if c.trees == 64 { 1.0 } else { 0.0 }, None))).unwrap();
        for t in &result.trials {
            t.config.validate().unwrap();
        }
        assert_eq!(result.best_trial().config.trees, 64);
        let first64 = result.trials.iter().position(|t| t.config.trees == 64).unwrap();
        assert_eq!(result.best, first64);
        let one = random_search_with(&NcartConfig { trials: 1, ..small_config() }, |_, _| Ok((0.3, None))).unwrap();
        assert_eq!(one.trials.len(), 1);
        assert_eq!(one.best, 0);
    }

    #[test]
    fn cv_reports_every_fold() {
        let data = blobs(60, 5);
        let config = NcartConfig { folds: 3, epochs: 3, ..small_config() };
        let report = kfold_cv(&data, &config).unwrap();
        assert_eq!(report.folds.len(), 3);
        assert!(report.folds.iter().all(|f| f.auc.is_some() && f.f1.is_some()));
        let again = kfold_cv(&data, &config).unwrap();
        let scores = |r: &TrainReport| r.folds.iter().map(|f| (f.auc, f.f1, f.epochs)).collect::<Vec<_>>();
        assert_eq!(scores(&report), scores(&again));
    }
}
