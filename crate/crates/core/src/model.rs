//! The NCART block and the residual network built from it.
//!
//! A block computes
//!
//! ```text
//! x_B   = BatchNorm(x)
//! x_P,i = h(A_i) · x_B            (final block only; otherwise x_P,i = x_B)
//! t_i   = W2 · relu(W1 · σ(x_P,i - s_i) + b1) + b2
//! O     = (1/N) Σ_i w_i t_i
//! ```
//!
//! and the network is `y_l = y_{l-1} + Block_l(y_{l-1})` for every block but
//! the last, whose output (of the target dimension) is the network output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{NcartConfig, Task};
use crate::error::{shape_err, NcartError, Result};
use crate::layers::{self, batchnorm_bwd, sigmoid, BatchNormCache, BatchNormState, Mode};
use crate::matrix::Matrix;
use crate::sparse::SparseFn;

/// One soft oblivious tree: thresholds plus a two-layer leaf network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    /// Split thresholds, one per input coordinate.
    pub thresholds: Vec<f64>,
    /// `hidden x m`
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// `out x hidden`
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl TreeParams {
    pub fn input_dim(&self) -> usize {
        self.thresholds.len()
    }

    pub fn out_dim(&self) -> usize {
        self.b2.len()
    }

    fn init(rng: &mut impl Rng, inputs: usize, hidden: usize, outputs: usize) -> Self {
        let r1 = (1.0 / inputs as f64).sqrt();
        let r2 = (1.0 / hidden as f64).sqrt();
        Self {
            thresholds: vec![0.0; inputs],
            w1: Matrix::from_fn(hidden, inputs, |_, _| rng.gen_range(-r1..=r1)),
            b1: vec![0.0; hidden],
            w2: Matrix::from_fn(outputs, hidden, |_, _| rng.gen_range(-r2..=r2)),
            b2: vec![0.0; outputs],
        }
    }

    fn check(&self) -> Result<()> {
        let m = self.input_dim();
        let h = self.b1.len();
        let o = self.out_dim();
        if self.w1.shape() != (h, m) || self.w2.shape() != (o, h) {
            return Err(shape_err(
                "TreeParams",
                format!("w1 {h}x{m}, w2 {o}x{h}"),
                format!("w1 {:?}, w2 {:?}", self.w1.shape(), self.w2.shape()),
            ));
        }
        Ok(())
    }

    /// `f(σ(x_P - s))` for every row of `x_p`.
    pub fn forward(&self, x_p: &Matrix) -> Result<(Matrix, TreeCache)> {
        if x_p.cols() != self.input_dim() {
            return Err(shape_err("tree_forward", self.input_dim(), x_p.cols()));
        }
        let mut gates = x_p.clone();
        for r in 0..gates.rows() {
            for (v, s) in gates.row_mut(r).iter_mut().zip(&self.thresholds) {
                *v = sigmoid(*v - s);
            }
        }
        let pre = affine(&gates, &self.w1, &self.b1)?;
        let act = layers::relu_fwd(&pre);
        let out = affine(&act, &self.w2, &self.b2)?;
        Ok((out.clone(), TreeCache { gates, pre, act, out }))
    }

    /// Returns the gradient w.r.t. the tree input and accumulates parameter
    /// gradients into `grads` (thresholds, w1, b1, w2, b2).
    fn backward(&self, cache: &TreeCache, d_out: &Matrix, grads: &mut [Vec<f64>]) -> Result<Matrix> {
        let d_w2 = d_out.matmul_tn(&cache.act)?;
        let d_b2 = d_out.col_sums();
        let d_act = d_out.matmul(&self.w2)?;
        let d_pre = layers::relu_bwd(&cache.pre, &d_act)?;
        let d_w1 = d_pre.matmul_tn(&cache.gates)?;
        let d_b1 = d_pre.col_sums();
        let d_gates = d_pre.matmul(&self.w1)?;
        let d_in = layers::sigmoid_bwd(&cache.gates, &d_gates)?;
        let d_s: Vec<f64> = d_in.col_sums().iter().map(|v| -v).collect();
        grads[0] = d_s;
        grads[1] = d_w1.into_vec();
        grads[2] = d_b1;
        grads[3] = d_w2.into_vec();
        grads[4] = d_b2;
        Ok(d_in)
    }
}

/// `x · wᵀ + b` with the bias folded into the accumulator.
fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    let mut out = x.matmul_nt(w)?;
    for r in 0..out.rows() {
        for (v, bias) in out.row_mut(r).iter_mut().zip(b) {
            *v += bias;
        }
    }
    Ok(out)
}

/// Saved activations of one tree.
#[derive(Debug, Clone)]
pub struct TreeCache {
    gates: Matrix,
    pre: Matrix,
    act: Matrix,
    out: Matrix,
}

impl TreeCache {
    pub fn output(&self) -> &Matrix {
        &self.out
    }
}

/// Batch norm, optional per-tree sparse selection, tree ensemble, weighted mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NcartBlock {
    pub bn: BatchNormState,
    pub trees: Vec<TreeParams>,
    /// One `d x n` score matrix per tree; present only on the final block.
    pub selections: Option<Vec<Matrix>>,
    pub weights: Vec<f64>,
    pub sparse_fn: SparseFn,
    pub out_dim: usize,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    bn: Option<BatchNormCache>,
    x_b: Matrix,
    /// `h(A_i)` and `x_P,i` per tree when the block selects features.
    projections: Vec<(Matrix, Matrix)>,
    trees: Vec<TreeCache>,
}

impl NcartBlock {
    pub fn new_random(
        rng: &mut impl Rng,
        n_in: usize,
        trees: usize,
        sel_dim: Option<usize>,
        hidden: usize,
        out_dim: usize,
        sparse_fn: SparseFn,
    ) -> Self {
        let m = sel_dim.unwrap_or(n_in);
        let mut tree_params = Vec::with_capacity(trees);
        let mut selections = sel_dim.map(|_| Vec::with_capacity(trees));
        for _ in 0..trees {
            if let (Some(sel), Some(d)) = (selections.as_mut(), sel_dim) {
                sel.push(Matrix::from_fn(d, n_in, |_, _| rng.gen_range(-0.1..=0.1)));
            }
            tree_params.push(TreeParams::init(rng, m, hidden, out_dim));
        }
        Self {
            bn: BatchNormState::new(n_in),
            trees: tree_params,
            selections,
            weights: vec![1.0; trees],
            sparse_fn,
            out_dim,
        }
    }

    pub fn has_selection(&self) -> bool {
        self.selections.is_some()
    }

    pub fn in_dim(&self) -> usize {
        self.bn.features()
    }

    /// Row-wise `h(A)` for the given selection score matrix.
    pub fn projection(&self, scores: &Matrix) -> Result<Matrix> {
        let mut p = Matrix::zeros(scores.rows(), scores.cols());
        for r in 0..scores.rows() {
            let row = self.sparse_fn.forward(scores.row(r))?;
            p.row_mut(r).copy_from_slice(&row);
        }
        Ok(p)
    }

    fn check(&self) -> Result<()> {
        let n = self.in_dim();
        if self.weights.len() != self.trees.len() || self.trees.is_empty() {
            return Err(shape_err("NcartBlock", "one weight per tree", format!("{} weights, {} trees", self.weights.len(), self.trees.len())));
        }
        for (i, t) in self.trees.iter().enumerate() {
            t.check()?;
            if t.out_dim() != self.out_dim {
                return Err(shape_err("NcartBlock", self.out_dim, format!("tree {i} outputs {}", t.out_dim())));
            }
            let m = match &self.selections {
                Some(sel) => {
                    let a = sel.get(i).ok_or_else(|| shape_err("NcartBlock", "one selection per tree", sel.len()))?;
                    if a.cols() != n {
                        return Err(shape_err("NcartBlock selection", n, a.cols()));
                    }
                    a.rows()
                }
                None => n,
            };
            if t.input_dim() != m {
                return Err(shape_err("NcartBlock", m, format!("tree {i} reads {}", t.input_dim())));
            }
        }
        Ok(())
    }

    /// Input to tree `i` given the normalized block input.
    fn tree_input(&self, i: usize, x_b: &Matrix) -> Result<Option<(Matrix, Matrix)>> {
        match &self.selections {
            Some(sel) => {
                let p = self.projection(&sel[i])?;
                let x_p = x_b.matmul_nt(&p)?;
                Ok(Some((p, x_p)))
            }
            None => Ok(None),
        }
    }

    pub fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<(Matrix, Option<BlockCache>)> {
        if x.cols() != self.in_dim() {
            return Err(shape_err("block_forward", self.in_dim(), x.cols()));
        }
        let (x_b, bn_cache) = self.bn.forward(x, mode)?;
        let keep = mode == Mode::Train;
        let inv_n = 1.0 / self.trees.len() as f64;
        let mut out = Matrix::zeros(x.rows(), self.out_dim);
        let mut projections = Vec::new();
        let mut tree_caches = Vec::new();
        for (i, tree) in self.trees.iter().enumerate() {
            let proj = self.tree_input(i, &x_b)?;
            let (t, cache) = tree.forward(proj.as_ref().map_or(&x_b, |(_, xp)| xp))?;
            out.axpy(self.weights[i] * inv_n, &t)?;
            if keep {
                if let Some(pp) = proj {
                    projections.push(pp);
                }
                tree_caches.push(cache);
            }
        }
        let cache = keep.then_some(BlockCache {
            bn: bn_cache,
            x_b,
            projections,
            trees: tree_caches,
        });
        Ok((out, cache))
    }

    /// Eval-mode forward pass that leaves the block untouched.
    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(shape_err("block_forward", self.in_dim(), x.cols()));
        }
        let x_b = self.bn.eval(x)?;
        let inv_n = 1.0 / self.trees.len() as f64;
        let mut out = Matrix::zeros(x.rows(), self.out_dim);
        for (i, tree) in self.trees.iter().enumerate() {
            let proj = self.tree_input(i, &x_b)?;
            let (t, _) = tree.forward(proj.as_ref().map_or(&x_b, |(_, xp)| xp))?;
            out.axpy(self.weights[i] * inv_n, &t)?;
        }
        Ok(out)
    }

    /// Per tree, the matrix each tree splits on (eval mode): `x_B` or `h(A_i) x_B`.
    pub fn tree_inputs_eval(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        let x_b = self.bn.eval(x)?;
        (0..self.trees.len())
            .map(|i| Ok(self.tree_input(i, &x_b)?.map_or_else(|| x_b.clone(), |(_, xp)| xp)))
            .collect()
    }

    fn param_count(&self) -> usize {
        3 + self.trees.len() * if self.has_selection() { 6 } else { 5 }
    }

    /// Returns the gradient w.r.t. the block input and the parameter
    /// gradients in [`NcartModel::params`] order.
    pub fn backward(&self, cache: &BlockCache, d_out: &Matrix) -> Result<(Matrix, Vec<Vec<f64>>)> {
        let bn_cache = cache
            .bn
            .as_ref()
            .ok_or_else(|| NcartError::InvalidInput("backward needs a train-mode forward cache".into()))?;
        if cache.trees.len() != self.trees.len() || d_out.cols() != self.out_dim || d_out.rows() != cache.x_b.rows() {
            return Err(shape_err("block_backward", "cache from this block and batch", "mismatched cache"));
        }
        let n_trees = self.trees.len();
        let inv_n = 1.0 / n_trees as f64;
        let per_tree = if self.has_selection() { 6 } else { 5 };
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.param_count()];
        let mut d_xb = Matrix::zeros(cache.x_b.rows(), cache.x_b.cols());
        let mut d_weights = vec![0.0; n_trees];

        for (i, tree) in self.trees.iter().enumerate() {
            let tc = &cache.trees[i];
            d_weights[i] = inv_n * dot_all(d_out, &tc.out);
            let mut d_t = d_out.clone();
            d_t.scale(self.weights[i] * inv_n);
            let base = 3 + i * per_tree;
            let tree_slot = if self.has_selection() { base + 1 } else { base };
            let d_xp = tree.backward(tc, &d_t, &mut grads[tree_slot..tree_slot + 5])?;
            match &cache.projections.get(i) {
                Some((p, _)) if self.has_selection() => {
                    let d_p = d_xp.matmul_tn(&cache.x_b)?;
                    d_xb.add_assign(&d_xp.matmul(p)?)?;
                    let mut d_a = Vec::with_capacity(p.rows() * p.cols());
                    for r in 0..p.rows() {
                        d_a.extend(self.sparse_fn.backward(p.row(r), d_p.row(r))?);
                    }
                    grads[base] = d_a;
                }
                _ => d_xb.add_assign(&d_xp)?,
            }
        }

        let (d_x, d_gamma, d_beta) = batchnorm_bwd(&self.bn, bn_cache, &d_xb)?;
        grads[0] = d_gamma;
        grads[1] = d_beta;
        grads[2] = d_weights;
        Ok((d_x, grads))
    }

    fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.bn.gamma, &self.bn.beta, &self.weights];
        for (i, t) in self.trees.iter().enumerate() {
            if let Some(sel) = &self.selections {
                out.push(sel[i].as_slice());
            }
            out.extend([&t.thresholds[..], t.w1.as_slice(), &t.b1, t.w2.as_slice(), &t.b2]);
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.bn.gamma, &mut self.bn.beta, &mut self.weights];
        let mut sels = self.selections.as_mut().map(|s| s.iter_mut());
        for t in self.trees.iter_mut() {
            if let Some(it) = sels.as_mut() {
                out.push(it.next().expect("one selection per tree").as_mut_slice());
            }
            out.push(&mut t.thresholds);
            out.push(t.w1.as_mut_slice());
            out.push(&mut t.b1);
            out.push(t.w2.as_mut_slice());
            out.push(&mut t.b2);
        }
        out
    }

    fn param_names(&self, block: usize) -> Vec<String> {
        let mut out = vec![
            format!("block{block}.bn.gamma"),
            format!("block{block}.bn.beta"),
            format!("block{block}.weights"),
        ];
        for i in 0..self.trees.len() {
            if self.has_selection() {
                out.push(format!("block{block}.tree{i}.selection"));
            }
            for p in ["thresholds", "w1", "b1", "w2", "b2"] {
                out.push(format!("block{block}.tree{i}.{p}"));
            }
        }
        out
    }
}

fn dot_all(a: &Matrix, b: &Matrix) -> f64 {
    crate::matrix::dot(a.as_slice(), b.as_slice())
}

/// Training targets for a batch.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Classes(&'a [usize]),
    Values(&'a Matrix),
}

/// Caches of a train-mode forward pass over the whole network.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    blocks: Vec<BlockCache>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NcartModel {
    pub blocks: Vec<NcartBlock>,
    pub n_features: usize,
    pub n_outputs: usize,
    pub task: Task,
}

/// Parameter gradients, one vector per tensor in [`NcartModel::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

impl NcartModel {
    /// Randomly initialized network. Everything is determined by `seed`.
    pub fn init(config: &NcartConfig, n_features: usize, n_outputs: usize, task: Task, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_features == 0 {
            return Err(NcartError::Config("at least one feature is required".into()));
        }
        if n_outputs == 0 {
            return Err(NcartError::Config("at least one output is required".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = config.hidden_width(n_features);
        let mut blocks = Vec::with_capacity(config.blocks);
        for _ in 0..config.blocks - 1 {
            blocks.push(NcartBlock::new_random(&mut rng, n_features, config.trees, None, hidden, n_features, config.sparse_fn));
        }
        blocks.push(NcartBlock::new_random(
            &mut rng,
            n_features,
            config.trees,
            Some(config.sel_dim),
            hidden,
            n_outputs,
            config.sparse_fn,
        ));
        Ok(Self {
            blocks,
            n_features,
            n_outputs,
            task,
        })
    }

    /// Checks the residual shape law and every tensor shape.
    pub fn validate(&self) -> Result<()> {
        let (last, body) = self
            .blocks
            .split_last()
            .ok_or_else(|| NcartError::ModelFile("model has no blocks".into()))?;
        if body.is_empty() {
            return Err(NcartError::ModelFile("model needs at least two blocks".into()));
        }
        for (l, b) in body.iter().enumerate() {
            b.check()?;
            if b.has_selection() || b.in_dim() != self.n_features || b.out_dim != self.n_features {
                return Err(shape_err("NcartModel", format!("residual block {l} mapping n -> n without selection"), format!("{} -> {}", b.in_dim(), b.out_dim)));
            }
        }
        last.check()?;
        if !last.has_selection() || last.in_dim() != self.n_features || last.out_dim != self.n_outputs {
            return Err(shape_err("NcartModel", "final selection block mapping n -> outputs", format!("{} -> {}", last.in_dim(), last.out_dim)));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<(Matrix, Option<ForwardCache>)> {
        if x.cols() != self.n_features {
            return Err(shape_err("forward", self.n_features, x.cols()));
        }
        let (last, body) = self.blocks.split_last_mut().expect("validated model has blocks");
        let mut caches = Vec::with_capacity(body.len() + 1);
        let mut stream = x.clone();
        for block in body {
            let (o, c) = block.forward(&stream, mode)?;
            stream.add_assign(&o)?;
            caches.extend(c);
        }
        let (out, c) = last.forward(&stream, mode)?;
        caches.extend(c);
        let cache = (mode == Mode::Train).then_some(ForwardCache { blocks: caches });
        Ok((out, cache))
    }

    /// Eval-mode forward pass; raw logits or regression outputs.
    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.residual_stream(x)?.pop().expect("final block output"))
    }

    /// Inputs to every block plus the final output, in eval mode.
    pub fn residual_stream(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        if x.cols() != self.n_features {
            return Err(shape_err("forward", self.n_features, x.cols()));
        }
        let (last, body) = self.blocks.split_last().expect("validated model has blocks");
        let mut stream = x.clone();
        let mut states = Vec::with_capacity(self.blocks.len() + 1);
        for block in body {
            let o = block.infer(&stream)?;
            states.push(stream.clone());
            stream.add_assign(&o)?;
        }
        let out = last.infer(&stream)?;
        states.push(stream);
        states.push(out);
        Ok(states)
    }

    pub fn backward(&self, cache: &ForwardCache, d_out: &Matrix) -> Result<Gradients> {
        if cache.blocks.len() != self.blocks.len() {
            return Err(shape_err("backward", self.blocks.len(), cache.blocks.len()));
        }
        let last = self.blocks.len() - 1;
        let mut per_block = vec![Vec::new(); self.blocks.len()];
        let (mut d_stream, g) = self.blocks[last].backward(&cache.blocks[last], d_out)?;
        per_block[last] = g;
        for l in (0..last).rev() {
            let (d_in, g) = self.blocks[l].backward(&cache.blocks[l], &d_stream)?;
            d_stream.add_assign(&d_in)?;
            per_block[l] = g;
        }
        Ok(Gradients(per_block.into_iter().flatten().collect()))
    }

    /// Mean loss over the batch and its gradient w.r.t. the network output:
    /// softmax cross-entropy for classification, squared error for regression.
    pub fn loss(&self, out: &Matrix, targets: Targets<'_>) -> Result<(f64, Matrix)> {
        match targets {
            Targets::Classes(y) => layers::cross_entropy(out, y),
            Targets::Values(y) => layers::mse_loss(out, y),
        }
    }

    /// Train-mode forward, loss and backward on one batch.
    pub fn loss_and_grad(&mut self, x: &Matrix, targets: Targets<'_>) -> Result<(f64, Gradients)> {
        let (out, cache) = self.forward(x, Mode::Train)?;
        let (loss, d_out) = self.loss(&out, targets)?;
        let grads = self.backward(&cache.expect("train mode keeps caches"), &d_out)?;
        Ok((loss, grads))
    }

    /// Class probabilities (softmax over the outputs) or regression values.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        let out = self.infer(x)?;
        Ok(if self.task.is_classification() {
            layers::softmax_fwd(&out)
        } else {
            out
        })
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.blocks.iter().flat_map(NcartBlock::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.blocks.iter_mut().flat_map(NcartBlock::params_mut).collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.blocks.iter().enumerate().flat_map(|(l, b)| b.param_names(l)).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Per block, per tree, per split coordinate: `(m_left, m_right)` where a
    /// sample goes right iff `σ(x_P,j - s_j) > 0.5`.
    pub fn route_counts(&self, x: &Matrix) -> Result<RouteCounts> {
        let states = self.residual_stream(x)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (block, input) in self.blocks.iter().zip(&states) {
            let inputs = block.tree_inputs_eval(input)?;
            let trees = block
                .trees
                .iter()
                .zip(&inputs)
                .map(|(tree, x_p)| {
                    let mut right = vec![0usize; tree.input_dim()];
                    for r in 0..x_p.rows() {
                        for (j, (&v, &s)) in x_p.row(r).iter().zip(&tree.thresholds).enumerate() {
                            if sigmoid(v - s) > 0.5 {
                                right[j] += 1;
                            }
                        }
                    }
                    right.into_iter().map(|r| (x.rows() - r, r)).collect()
                })
                .collect();
            blocks.push(trees);
        }
        Ok(RouteCounts {
            samples: x.rows(),
            blocks,
        })
    }
}

/// Split-side tallies, indexed `[block][tree][coordinate]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteCounts {
    pub samples: usize,
    pub blocks: Vec<Vec<Vec<(usize, usize)>>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_model;

    fn config(blocks: usize, trees: usize, sel_dim: usize, sparse_fn: SparseFn) -> NcartConfig {
        NcartConfig {
            blocks,
            trees,
            sel_dim,
            hidden: Some(6),
            sparse_fn,
            ..NcartConfig::default()
        }
    }

    fn random_x(seed: u64, rows: usize, cols: usize) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-3.0..3.0))
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let c = config(2, 8, 3, SparseFn::Sparsemax);
        let a = NcartModel::init(&c, 5, 2, Task::Binclass, 42).unwrap();
        let b = NcartModel::init(&c, 5, 2, Task::Binclass, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, NcartModel::init(&c, 5, 2, Task::Binclass, 43).unwrap());
        a.validate().unwrap();
        assert!(a.blocks[0].trees.iter().all(|t| t.input_dim() == 5));
        assert!(a.blocks[1].trees.iter().all(|t| t.input_dim() == 3));
        assert!(a.blocks[0].trees.iter().all(|t| t.thresholds.iter().all(|&s| s == 0.0)));
        assert_eq!(a.blocks[1].selections.as_ref().unwrap()[0].shape(), (3, 5));
        assert!(NcartModel::init(&c, 0, 2, Task::Binclass, 1).is_err());
        assert!(NcartModel::init(&NcartConfig { blocks: 3, ..c }, 5, 2, Task::Binclass, 1).is_err());
    }

    #[test]
    fn tree_at_thresholds_sees_half_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tree = TreeParams::init(&mut rng, 3, 4, 2);
        tree.thresholds = vec![0.3, -1.0, 2.0];
        let x = Matrix::from_vec(1, 3, tree.thresholds.clone()).unwrap();
        let (out, _) = tree.forward(&x).unwrap();
        let (half, _) = TreeParams { thresholds: vec![0.0; 3], ..tree.clone() }
            .forward(&Matrix::zeros(1, 3))
            .unwrap();
        assert_eq!(out, half);

        tree.w2 = Matrix::zeros(2, 4);
        tree.b2 = vec![0.25, -4.0];
        let (out, _) = tree.forward(&random_x(1, 5, 3)).unwrap();
        for r in 0..5 {
            assert_eq!(out.row(r), &[0.25, -4.0]);
        }
    }

    #[test]
    fn tree_matches_straight_line_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tree = TreeParams::init(&mut rng, 4, 5, 3);
        tree.thresholds = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        tree.b1 = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        tree.b2 = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = random_x(9, 6, 4);
        let (out, _) = tree.forward(&x).unwrap();
        for r in 0..6 {
            let gates: Vec<f64> = (0..4).map(|j| 1.0 / (1.0 + (-(x[(r, j)] - tree.thresholds[j])).exp())).collect();
            let hidden: Vec<f64> = (0..5)
                .map(|h| {
                    let mut s = 0.0;
                    for j in 0..4 {
                        s += gates[j] * tree.w1[(h, j)];
                    }
                    (s + tree.b1[h]).max(0.0)
                })
                .collect();
            for o in 0..3 {
                let mut s = 0.0;
                for h in 0..5 {
                    s += hidden[h] * tree.w2[(o, h)];
                }
                let expected = s + tree.b2[o];
                assert!((out[(r, o)] - expected).abs() <= 1e-15 * expected.abs().max(1.0));
            }
        }
    }

    #[test]
    fn single_tree_block_is_tree_of_normalized_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut block = NcartBlock::new_random(&mut rng, 3, 1, None, 4, 3, SparseFn::Sparsemax);
        let x = random_x(2, 8, 3);
        let (out, _) = block.clone().forward(&x, Mode::Train).unwrap();
        let (x_b, _) = block.bn.clone().forward(&x, Mode::Train).unwrap();
        let (t, _) = block.trees[0].forward(&x_b).unwrap();
        assert_eq!(out, t);

        block.weights = vec![0.0];
        let (out, _) = block.forward(&x, Mode::Train).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_selection_gathers_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut block = NcartBlock::new_random(&mut rng, 4, 2, Some(3), 4, 2, SparseFn::Entmax);
        let picks = [[2usize, 0, 3], [1, 1, 2]];
        let sels = block.selections.as_mut().unwrap();
        for (a, pick) in sels.iter_mut().zip(picks) {
            *a = Matrix::zeros(3, 4);
            for (r, &c) in pick.iter().enumerate() {
                a[(r, c)] = 1e6;
            }
        }
        let x = random_x(6, 7, 4);
        let inputs = block.tree_inputs_eval(&x).unwrap();
        let x_b = block.bn.eval(&x).unwrap();
        for (xp, pick) in inputs.iter().zip(picks) {
            for r in 0..7 {
                for (k, &c) in pick.iter().enumerate() {
                    assert_eq!(xp[(r, k)], x_b[(r, c)]);
                }
            }
        }
    }

    #[test]
    fn ensemble_output_is_linear_in_tree_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let block = NcartBlock::new_random(&mut rng, 3, 4, Some(2), 5, 2, SparseFn::Sparsemax);
        let x = random_x(11, 6, 3);
        let base = block.infer(&x).unwrap();
        let mut scaled = block.clone();
        for t in &mut scaled.trees {
            t.w2.scale(2.5);
            t.b2.iter_mut().for_each(|b| *b *= 2.5);
        }
        let out = scaled.infer(&x).unwrap();
        for (a, b) in out.as_slice().iter().zip(base.as_slice()) {
            assert!((a - 2.5 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_definition_for_two_blocks() {
        let c = config(2, 8, 2, SparseFn::Entmax);
        let model = NcartModel::init(&c, 4, 3, Task::Multiclass, 1).unwrap();
        let x = random_x(12, 5, 4);
        let mut y1 = x.clone();
        y1.add_assign(&model.blocks[0].infer(&x).unwrap()).unwrap();
        let expected = model.blocks[1].infer(&y1).unwrap();
        assert_eq!(model.infer(&x).unwrap(), expected);
    }

    #[test]
    fn zeroed_residual_blocks_pass_input_through() {
        let c = config(4, 8, 2, SparseFn::Sparsemax);
        let mut model = NcartModel::init(&c, 4, 2, Task::Binclass, 2).unwrap();
        for b in &mut model.blocks[..3] {
            for t in &mut b.trees {
                t.w2 = Matrix::zeros(t.w2.rows(), t.w2.cols());
                t.b2.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let x = random_x(13, 6, 4);
        let states = model.residual_stream(&x).unwrap();
        assert_eq!(states[3], x);
    }

    #[test]
    fn predict_normalizes_and_is_uniform_when_final_layer_is_zero() {
        let c = config(2, 8, 3, SparseFn::Sparsemax);
        let mut model = NcartModel::init(&c, 5, 3, Task::Multiclass, 3).unwrap();
        let x = random_x(14, 9, 5);
        let p = model.predict(&x).unwrap();
        for r in 0..9 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
        for t in &mut model.blocks[1].trees {
            t.w2 = Matrix::zeros(t.w2.rows(), t.w2.cols());
            t.b2.iter_mut().for_each(|v| *v = 0.0);
        }
        let p = model.predict(&x).unwrap();
        assert!(p.as_slice().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(model.predict(&random_x(1, 2, 4)).is_err());
    }

    #[test]
    fn eval_forward_is_independent_of_batch_composition() {
        let c = config(2, 8, 3, SparseFn::Entmax);
        let model = NcartModel::init(&c, 4, 2, Task::Binclass, 5).unwrap();
        let x = random_x(15, 10, 4);
        let full = model.predict(&x).unwrap();
        let part = model.predict(&x.select_rows(&[3, 7])).unwrap();
        assert_eq!(part.row(0), full.row(3));
        assert_eq!(part.row(1), full.row(7));
    }

    #[test]
    fn route_counts_examples() {
        let c = config(2, 8, 2, SparseFn::Sparsemax);
        let mut model = NcartModel::init(&c, 1, 2, Task::Binclass, 6).unwrap();
        // identity batch norm in eval mode
        for b in &mut model.blocks {
            b.bn.running_var = vec![1.0 - b.bn.eps];
        }
        let x = Matrix::from_vec(10, 1, (0..10).map(|i| i as f64 - 3.5).collect()).unwrap();
        let counts = model.route_counts(&x).unwrap();
        assert_eq!(counts.samples, 10);
        assert_eq!(counts.blocks[0][0], vec![(4, 6)]);

        let same = Matrix::filled(5, 1, 2.0);
        assert_eq!(model.route_counts(&same).unwrap().blocks[0][0], vec![(0, 5)]);
    }

    #[test]
    fn backward_matches_finite_differences_small_model() {
        for (sparse_fn, task) in [(SparseFn::Sparsemax, Task::Multiclass), (SparseFn::Entmax, Task::Regression)] {
            let c = config(2, 8, 2, sparse_fn);
            let outputs = if task == Task::Regression { 1 } else { 3 };
            let model = NcartModel::init(&c, 3, outputs, task, 17).unwrap();
            let x = random_x(18, 16, 3);
            let classes: Vec<usize> = (0..16).map(|i| i % 3).collect();
            let values = random_x(19, 16, 1);
            let targets = if task == Task::Regression { Targets::Values(&values) } else { Targets::Classes(&classes) };
            let r = check_model(&model, &x, targets, usize::MAX, 0).unwrap();
            assert!(r.report.max_rel_err < 1e-4, "{sparse_fn:?}: {r:?}");
            assert!(r.report.checked + r.skipped == model.num_params());
        }
    }
}
