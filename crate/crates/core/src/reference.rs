//! Straight-line re-evaluation of the training loss, generic over the scalar
//! type.
//!
//! This shares no code with the layer kernels: matrices are flat vectors,
//! entmax uses the exact sort-based solution instead of bisection, and every
//! intermediate is recomputed from the raw parameters. Instantiated with
//! [`DoubleDouble`] it gives finite differences whose rounding noise sits
//! far below the gradients being checked.

use std::cmp::Ordering;
use std::ops::{Add, Div, Mul, Neg, Sub};

use twofloat::TwoFloat;

use crate::error::{shape_err, Result};
use crate::layers::BN_EPS;
use crate::matrix::Matrix;
use crate::model::{NcartModel, Targets};
use crate::sparse::SparseFn;

pub trait Real:
    Copy
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn of(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

/// About 106 bits of significand.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct DoubleDouble(pub TwoFloat);

macro_rules! dd_binop {
    ($tr:ident, $f:ident) => {
        impl $tr for DoubleDouble {
            type Output = Self;
            fn $f(self, rhs: Self) -> Self {
                DoubleDouble($tr::$f(self.0, rhs.0))
            }
        }
    };
}
dd_binop!(Add, add);
dd_binop!(Sub, sub);
dd_binop!(Mul, mul);
dd_binop!(Div, div);

impl Neg for DoubleDouble {
    type Output = Self;
    fn neg(self) -> Self {
        DoubleDouble(-self.0)
    }
}

impl Real for DoubleDouble {
    fn of(v: f64) -> Self {
        DoubleDouble(TwoFloat::from(v))
    }

    fn to_f64(self) -> f64 {
        f64::from(self.0)
    }

    // The library's own exp/ln are only accurate to about 1e-16, and their
    // error is not smooth, so both are rebuilt from exact arithmetic.
    fn exp(self) -> Self {
        let x = self.0;
        if x.hi() < -700.0 {
            return Self::of(0.0);
        }
        let k = (x.hi() / std::f64::consts::LN_2).round();
        let r = (x - twofloat::consts::LN_2 * k) / 1024.0;
        let mut term = TwoFloat::from(1.0);
        let mut sum = TwoFloat::from(1.0);
        for i in 1..=14 {
            term = term * r / i as f64;
            sum += term;
        }
        for _ in 0..10 {
            sum = sum * sum;
        }
        DoubleDouble(sum * 2f64.powi(k as i32))
    }

    fn ln(self) -> Self {
        let mut y = Self::of(self.0.hi().ln());
        for _ in 0..2 {
            y = y + self * (-y).exp() - Self::of(1.0);
        }
        y
    }

    fn sqrt(self) -> Self {
        DoubleDouble(self.0.sqrt())
    }
}

fn max<R: Real>(a: R, b: R) -> R {
    if b > a {
        b
    } else {
        a
    }
}

fn sort_desc<R: Real>(z: &[R]) -> Vec<R> {
    let mut s = z.to_vec();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    s
}

fn sparsemax<R: Real>(z: &[R]) -> Vec<R> {
    let sorted = sort_desc(z);
    let mut cum = R::of(0.0);
    let mut tau = R::of(0.0);
    for (k, &v) in sorted.iter().enumerate() {
        cum = cum + v;
        let kk = R::of((k + 1) as f64);
        if R::of(1.0) + kk * v > cum {
            tau = (cum - R::of(1.0)) / kk;
        }
    }
    z.iter().map(|&v| max(v - tau, R::of(0.0))).collect()
}

/// 1.5-entmax: `p_i = [z_i/2 - τ]_+^2`, with τ the smaller root of
/// `Σ_{i≤k} (u_i - τ)² = 1` for the largest consistent support size `k`.
fn entmax15<R: Real>(z: &[R]) -> Vec<R> {
    let u: Vec<R> = z.iter().map(|&v| v / R::of(2.0)).collect();
    let sorted = sort_desc(&u);
    let (mut s1, mut s2) = (R::of(0.0), R::of(0.0));
    let mut tau = sorted[0] - R::of(1.0);
    for (k, &v) in sorted.iter().enumerate() {
        s1 = s1 + v;
        s2 = s2 + v * v;
        let kk = R::of((k + 1) as f64);
        let disc = s1 * s1 - kk * (s2 - R::of(1.0));
        if disc < R::of(0.0) {
            break;
        }
        let t = (s1 - disc.sqrt()) / kk;
        if t < v {
            tau = t;
        } else {
            break;
        }
    }
    u.iter()
        .map(|&v| {
            let d = max(v - tau, R::of(0.0));
            d * d
        })
        .collect()
}

fn sigmoid<R: Real>(u: R) -> R {
    if u >= R::of(0.0) {
        R::of(1.0) / (R::of(1.0) + (-u).exp())
    } else {
        let e = u.exp();
        e / (R::of(1.0) + e)
    }
}

/// Row-major `rows x cols` buffer.
#[derive(Clone)]
struct Buf<R> {
    rows: usize,
    cols: usize,
    data: Vec<R>,
}

impl<R: Real> Buf<R> {
    fn from_matrix(m: &Matrix) -> Self {
        Buf {
            rows: m.rows(),
            cols: m.cols(),
            data: m.as_slice().iter().map(|&v| R::of(v)).collect(),
        }
    }

    fn at(&self, r: usize, c: usize) -> R {
        self.data[r * self.cols + c]
    }
}

/// Shape of one block as laid out in the flat parameter list.
#[derive(Clone)]
struct BlockShape {
    first: usize,
    n_in: usize,
    trees: usize,
    sel_dim: Option<usize>,
    hidden: usize,
    out: usize,
}

impl BlockShape {
    fn per_tree(&self) -> usize {
        if self.sel_dim.is_some() {
            6
        } else {
            5
        }
    }

    fn tree_slot(&self, tree: usize) -> usize {
        self.first + 3 + tree * self.per_tree()
    }
}

#[derive(Clone)]
struct BlockEval<R> {
    x_b: Buf<R>,
    /// Unweighted tree outputs.
    tree_out: Vec<Buf<R>>,
    /// ReLU signs and selection supports per tree.
    patterns: Vec<Vec<bool>>,
    out: Buf<R>,
}

/// Train-mode loss of a model as a function of its parameters.
pub struct ReferenceLoss<'a, R> {
    blocks: Vec<BlockShape>,
    sparse_fn: SparseFn,
    params: Vec<Vec<R>>,
    x: Buf<R>,
    targets: Targets<'a>,
    base: Vec<BlockEval<R>>,
    base_loss: R,
}

/// Outcome of a perturbed evaluation.
pub struct Probe<R> {
    pub loss: R,
    /// True when some ReLU or selection support differs from the
    /// unperturbed evaluation, i.e. the step crossed a kink.
    pub crossed_kink: bool,
}

impl<'a, R: Real> ReferenceLoss<'a, R> {
    pub fn new(model: &NcartModel, x: &Matrix, targets: Targets<'a>) -> Result<Self> {
        model.validate()?;
        if x.cols() != model.n_features {
            return Err(shape_err("reference loss", model.n_features, x.cols()));
        }
        let mut blocks = Vec::with_capacity(model.blocks.len());
        let mut first = 0;
        for b in &model.blocks {
            let shape = BlockShape {
                first,
                n_in: b.in_dim(),
                trees: b.trees.len(),
                sel_dim: b.selections.as_ref().map(|s| s[0].rows()),
                hidden: b.trees[0].b1.len(),
                out: b.out_dim,
            };
            first += 3 + shape.trees * shape.per_tree();
            blocks.push(shape);
        }
        let params = model
            .params()
            .iter()
            .map(|p| p.iter().map(|&v| R::of(v)).collect())
            .collect();
        let mut this = Self {
            blocks,
            sparse_fn: model.blocks[0].sparse_fn,
            params,
            x: Buf::from_matrix(x),
            targets,
            base: Vec::new(),
            base_loss: R::of(0.0),
        };
        let mut stream = this.x.clone();
        let last = this.blocks.len() - 1;
        for l in 0..=last {
            let eval = this.eval_block(l, &stream, &this.params, None);
            if l < last {
                for (s, o) in stream.data.iter_mut().zip(&eval.out.data) {
                    *s = *s + *o;
                }
            }
            this.base.push(eval);
        }
        this.base_loss = this.loss_of(&this.base[last].out)?;
        Ok(this)
    }

    pub fn loss(&self) -> R {
        self.base_loss
    }

    /// Loss with flat parameter `(tensor, index)` shifted by `delta`, the
    /// shift applied in `R` so that `θ + δ` is represented exactly.
    pub fn probe(&self, tensor: usize, index: usize, delta: f64) -> Result<Probe<R>> {
        let l = self
            .blocks
            .iter()
            .rposition(|b| b.first <= tensor)
            .expect("tensor index is non-negative");
        let mut params = self.params.clone();
        params[tensor][index] = params[tensor][index] + R::of(delta);

        let mut stream = self.block_input(l);
        let last = self.blocks.len() - 1;
        let mut crossed = false;
        let mut out = None;
        for k in l..=last {
            let reuse = (k == l).then(|| (&self.base[l], tensor - self.blocks[l].first));
            let eval = self.eval_block(k, &stream, &params, reuse);
            crossed |= eval.patterns != self.base[k].patterns;
            if k < last {
                for (s, o) in stream.data.iter_mut().zip(&eval.out.data) {
                    *s = *s + *o;
                }
            } else {
                out = Some(eval.out);
            }
        }
        let loss = self.loss_of(&out.expect("final block evaluated"))?;
        Ok(Probe {
            loss,
            crossed_kink: crossed,
        })
    }

    fn block_input(&self, l: usize) -> Buf<R> {
        let mut stream = self.x.clone();
        for b in &self.base[..l] {
            for (s, o) in stream.data.iter_mut().zip(&b.out.data) {
                *s = *s + *o;
            }
        }
        stream
    }

    /// Evaluates block `l`. With `reuse = (base, local)`, only the parts
    /// that depend on local tensor `local` are recomputed.
    fn eval_block(&self, l: usize, input: &Buf<R>, params: &[Vec<R>], reuse: Option<(&BlockEval<R>, usize)>) -> BlockEval<R> {
        let shape = &self.blocks[l];
        let p = &params[shape.first..];
        let (x_b, changed_tree) = match reuse {
            Some((base, local)) if local >= 2 => {
                let tree = (local >= 3).then(|| (local - 3) / shape.per_tree());
                (base.x_b.clone(), Some(tree))
            }
            _ => (self.batch_norm(input, &p[0], &p[1]), None),
        };
        let mut tree_out = Vec::with_capacity(shape.trees);
        let mut patterns = Vec::with_capacity(shape.trees);
        for i in 0..shape.trees {
            match (changed_tree, reuse) {
                (Some(t), Some((base, _))) if t != Some(i) => {
                    tree_out.push(base.tree_out[i].clone());
                    patterns.push(base.patterns[i].clone());
                }
                _ => {
                    let (t, pat) = self.eval_tree(shape, i, &x_b, params);
                    tree_out.push(t);
                    patterns.push(pat);
                }
            }
        }
        let weights = &p[2];
        let inv_n = R::of(1.0) / R::of(shape.trees as f64);
        let mut out = Buf {
            rows: input.rows,
            cols: shape.out,
            data: vec![R::of(0.0); input.rows * shape.out],
        };
        for (i, t) in tree_out.iter().enumerate() {
            let w = weights[i] * inv_n;
            for (o, v) in out.data.iter_mut().zip(&t.data) {
                *o = *o + w * *v;
            }
        }
        BlockEval {
            x_b,
            tree_out,
            patterns,
            out,
        }
    }

    fn batch_norm(&self, x: &Buf<R>, gamma: &[R], beta: &[R]) -> Buf<R> {
        let m = R::of(x.rows as f64);
        let mut out = x.clone();
        for j in 0..x.cols {
            let mut mean = R::of(0.0);
            for r in 0..x.rows {
                mean = mean + x.at(r, j);
            }
            mean = mean / m;
            let mut var = R::of(0.0);
            for r in 0..x.rows {
                let d = x.at(r, j) - mean;
                var = var + d * d;
            }
            var = var / m;
            let denom = (var + R::of(BN_EPS)).sqrt();
            for r in 0..x.rows {
                out.data[r * x.cols + j] = gamma[j] * (x.at(r, j) - mean) / denom + beta[j];
            }
        }
        out
    }

    fn eval_tree(&self, shape: &BlockShape, i: usize, x_b: &Buf<R>, params: &[Vec<R>]) -> (Buf<R>, Vec<bool>) {
        let slot = shape.tree_slot(i);
        let mut pattern = Vec::new();
        let (x_p, m, at) = match shape.sel_dim {
            Some(d) => {
                let a = &params[slot];
                let n = shape.n_in;
                let mut proj = Vec::with_capacity(d * n);
                for r in 0..d {
                    let row = &a[r * n..(r + 1) * n];
                    let p = match self.sparse_fn {
                        SparseFn::Sparsemax => sparsemax(row),
                        SparseFn::Entmax => entmax15(row),
                    };
                    pattern.extend(p.iter().map(|&v| v > R::of(0.0)));
                    proj.extend(p);
                }
                let mut data = Vec::with_capacity(x_b.rows * d);
                for r in 0..x_b.rows {
                    for k in 0..d {
                        let mut acc = R::of(0.0);
                        for j in 0..n {
                            acc = acc + proj[k * n + j] * x_b.at(r, j);
                        }
                        data.push(acc);
                    }
                }
                (Buf { rows: x_b.rows, cols: d, data }, d, slot + 1)
            }
            None => (x_b.clone(), shape.n_in, slot),
        };
        let (s, w1, b1, w2, b2) = (&params[at], &params[at + 1], &params[at + 2], &params[at + 3], &params[at + 4]);
        let (h, o) = (shape.hidden, shape.out);
        let mut out = Vec::with_capacity(x_p.rows * o);
        let mut gates = vec![R::of(0.0); m];
        let mut act = vec![R::of(0.0); h];
        for r in 0..x_p.rows {
            for j in 0..m {
                gates[j] = sigmoid(x_p.at(r, j) - s[j]);
            }
            for u in 0..h {
                let mut acc = b1[u];
                for j in 0..m {
                    acc = acc + w1[u * m + j] * gates[j];
                }
                let on = acc > R::of(0.0);
                pattern.push(on);
                act[u] = if on { acc } else { R::of(0.0) };
            }
            for c in 0..o {
                let mut acc = b2[c];
                for u in 0..h {
                    acc = acc + w2[c * h + u] * act[u];
                }
                out.push(acc);
            }
        }
        (Buf { rows: x_p.rows, cols: o, data: out }, pattern)
    }

    fn loss_of(&self, out: &Buf<R>) -> Result<R> {
        let m = R::of(out.rows as f64);
        let mut total = R::of(0.0);
        match self.targets {
            Targets::Classes(y) => {
                if y.len() != out.rows {
                    return Err(shape_err("reference loss", out.rows, y.len()));
                }
                for (r, &t) in y.iter().enumerate() {
                    let row = &out.data[r * out.cols..(r + 1) * out.cols];
                    let top = row.iter().copied().fold(row[0], max);
                    let mut sum = R::of(0.0);
                    for &v in row {
                        sum = sum + (v - top).exp();
                    }
                    total = total + top + sum.ln() - row[t];
                }
                Ok(total / m)
            }
            Targets::Values(y) => {
                if y.shape() != (out.rows, out.cols) {
                    return Err(shape_err("reference loss", format!("{}x{}", out.rows, out.cols), format!("{:?}", y.shape())));
                }
                for (p, &t) in out.data.iter().zip(y.as_slice()) {
                    let d = *p - R::of(t);
                    total = total + d * d;
                }
                Ok(total / R::of(out.data.len() as f64))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{NcartConfig, Task};
    use crate::layers::Mode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn extended_exp_and_ln_are_accurate() {
        let e = DoubleDouble::of(1.0).exp();
        assert!(f64::from((e.0 - twofloat::consts::E).abs()) < 1e-28);
        for v in [1e-3, 0.7, 2.0, 55.0] {
            let x = DoubleDouble::of(v);
            assert!(f64::from((x.ln().exp() - x).0.abs()) / v < 1e-28);
        }
    }

    #[test]
    fn exact_entmax_matches_bisection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let d = rng.gen_range(1..8);
            let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let exact = entmax15(&z);
            let iterative = SparseFn::Entmax.forward(&z).unwrap();
            for (a, b) in exact.iter().zip(&iterative) {
                assert!((a - b).abs() < 1e-10, "{z:?}");
            }
            let sp = sparsemax(&z);
            let sp_ref = SparseFn::Sparsemax.forward(&z).unwrap();
            for (a, b) in sp.iter().zip(&sp_ref) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn f64_instance_matches_model_loss() {
        for (sparse_fn, task) in [(SparseFn::Sparsemax, Task::Multiclass), (SparseFn::Entmax, Task::Regression)] {
            let config = NcartConfig {
                blocks: 4,
                trees: 8,
                sel_dim: 3,
                hidden: Some(8),
                sparse_fn,
                ..NcartConfig::default()
            };
            let k = if task == Task::Regression { 2 } else { 3 };
            let model = NcartModel::init(&config, 5, k, task, 4).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let x = Matrix::from_fn(16, 5, |_, _| rng.gen_range(-3.0..3.0));
            let classes: Vec<usize> = (0..16).map(|i| i % 3).collect();
            let values = Matrix::from_fn(16, 2, |_, _| rng.gen_range(-1.0..1.0));
            let targets = match task {
                Task::Regression => Targets::Values(&values),
                _ => Targets::Classes(&classes),
            };
            let (out, _) = model.clone().forward(&x, Mode::Train).unwrap();
            let (loss, _) = model.loss(&out, targets).unwrap();
            let reference = ReferenceLoss::<f64>::new(&model, &x, targets).unwrap();
            assert!((reference.loss() - loss).abs() < 1e-12);
            let dd = ReferenceLoss::<DoubleDouble>::new(&model, &x, targets).unwrap();
            assert!((dd.loss().to_f64() - loss).abs() < 1e-12);
        }
    }

    #[test]
    fn probe_with_zero_shift_reproduces_loss() {
        let config = NcartConfig {
            trees: 8,
            sel_dim: 2,
            hidden: Some(8),
            ..NcartConfig::default()
        };
        let model = NcartModel::init(&config, 3, 2, Task::Binclass, 1).unwrap();
        let x = Matrix::from_fn(8, 3, |r, c| (r * 3 + c) as f64 * 0.37 - 2.0);
        let y: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let f = ReferenceLoss::<DoubleDouble>::new(&model, &x, Targets::Classes(&y)).unwrap();
        for t in 0..model.params().len() {
            let p = f.probe(t, 0, 0.0).unwrap();
            assert_eq!(p.loss, f.loss(), "tensor {t}");
            assert!(!p.crossed_kink);
        }
    }
}
