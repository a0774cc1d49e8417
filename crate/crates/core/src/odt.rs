//! Approximating an axis-aligned decision tree by the sum of two oblivious
//! trees.
//!
//! The tree is refined into the grid spanned by all of its thresholds, which
//! leaves the function unchanged. On a two-axis grid an oblivious tree over
//! axis 0 contributes `a_r` per row interval and one over axis 1 contributes
//! `b_c` per column interval; `a` and `b` minimize `Σ |a_r + b_c - v_rc|`.
//!
//! Routing uses `H(x - t)` with `H(0) = 1`: a point exactly on a threshold
//! goes right.

use std::fmt;
use std::str::FromStr;

use crate::error::{NcartError, Result};

pub const MAX_SWEEPS: usize = 200;
pub const MIN_DECREASE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum AxisTree {
    Leaf(f64),
    Split {
        axis: usize,
        threshold: f64,
        left: Box<AxisTree>,
        right: Box<AxisTree>,
    },
}

impl AxisTree {
    pub fn split(axis: usize, threshold: f64, left: AxisTree, right: AxisTree) -> Self {
        AxisTree::Split {
            axis,
            threshold,
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    pub fn eval(&self, point: &[f64]) -> f64 {
        match self {
            AxisTree::Leaf(v) => *v,
            AxisTree::Split {
                axis,
                threshold,
                left,
                right,
            } => {
                if point[*axis] >= *threshold {
                    right.eval(point)
                } else {
                    left.eval(point)
                }
            }
        }
    }

    /// One more than the largest axis used (at least 1).
    pub fn axes(&self) -> usize {
        match self {
            AxisTree::Leaf(_) => 1,
            AxisTree::Split { axis, left, right, .. } => (axis + 1).max(left.axes()).max(right.axes()),
        }
    }

    fn collect_thresholds(&self, out: &mut [Vec<f64>]) {
        if let AxisTree::Split {
            axis,
            threshold,
            left,
            right,
        } = self
        {
            out[*axis].push(*threshold);
            left.collect_thresholds(out);
            right.collect_thresholds(out);
        }
    }
}

impl fmt::Display for AxisTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AxisTree::Leaf(v) => write!(f, "leaf {v}"),
            AxisTree::Split {
                axis,
                threshold,
                left,
                right,
            } => write!(f, "split {axis} {threshold} {{ {left} }} {{ {right} }}"),
        }
    }
}

struct Parser<'a> {
    tokens: Vec<&'a str>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn next(&mut self) -> Result<&'a str> {
        let t = self
            .tokens
            .get(self.pos)
            .copied()
            .ok_or_else(|| NcartError::InvalidInput("tree description ends early".into()))?;
        self.pos += 1;
        Ok(t)
    }

    fn expect(&mut self, want: &str) -> Result<()> {
        let at = self.pos;
        let got = self.next()?;
        if got != want {
            return Err(NcartError::InvalidInput(format!("token {at}: expected `{want}`, found `{got}`")));
        }
        Ok(())
    }

    fn number<T: FromStr>(&mut self, what: &str) -> Result<T> {
        let at = self.pos;
        let t = self.next()?;
        t.parse()
            .map_err(|_| NcartError::InvalidInput(format!("token {at}: `{t}` is not a valid {what}")))
    }

    fn tree(&mut self) -> Result<AxisTree> {
        let at = self.pos;
        match self.next()? {
            "leaf" => {
                let v: f64 = self.number("leaf value")?;
                if !v.is_finite() {
                    return Err(NcartError::NonFinite(format!("leaf value at token {at}")));
                }
                Ok(AxisTree::Leaf(v))
            }
            "split" => {
                let axis = self.number("axis")?;
                let threshold: f64 = self.number("threshold")?;
                if !threshold.is_finite() {
                    return Err(NcartError::NonFinite(format!("threshold at token {at}")));
                }
                self.expect("{")?;
                let left = self.tree()?;
                self.expect("}")?;
                self.expect("{")?;
                let right = self.tree()?;
                self.expect("}")?;
                Ok(AxisTree::split(axis, threshold, left, right))
            }
            other => Err(NcartError::InvalidInput(format!(
                "token {at}: expected `split` or `leaf`, found `{other}`"
            ))),
        }
    }
}

/// Lines starting with `#` are comments.
impl FromStr for AxisTree {
    type Err = NcartError;

    fn from_str(s: &str) -> Result<Self> {
        let tokens = s
            .lines()
            .filter(|l| !l.trim_start().starts_with('#'))
            .flat_map(|l| l.split_whitespace())
            .flat_map(split_braces)
            .collect();
        let mut p = Parser { tokens, pos: 0 };
        let tree = p.tree()?;
        if p.pos != p.tokens.len() {
            return Err(NcartError::InvalidInput(format!("trailing input at token {}", p.pos)));
        }
        Ok(tree)
    }
}

/// Separates braces glued to neighbouring tokens, e.g. `{leaf` or `3}`.
fn split_braces(word: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, ch) in word.char_indices() {
        if ch == '{' || ch == '}' {
            if start < i {
                out.push(&word[start..i]);
            }
            out.push(&word[i..i + 1]);
            start = i + 1;
        }
    }
    if start < word.len() {
        out.push(&word[start..]);
    }
    out
}

/// Index of the interval holding `x` among sorted `thresholds`.
pub fn interval(thresholds: &[f64], x: f64) -> usize {
    thresholds.iter().take_while(|&&t| x >= t).count()
}

/// A piecewise-constant function on the product of per-axis intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    /// Strictly increasing thresholds per axis.
    pub thresholds: Vec<Vec<f64>>,
    /// Cell values, row-major over axes (the last axis varies fastest).
    pub values: Vec<f64>,
}

impl Grid {
    pub fn dims(&self) -> Vec<usize> {
        self.thresholds.iter().map(|t| t.len() + 1).collect()
    }

    fn flat(&self, cell: &[usize]) -> usize {
        cell.iter().zip(self.dims()).fold(0, |acc, (&i, d)| acc * d + i)
    }

    pub fn value(&self, cell: &[usize]) -> f64 {
        self.values[self.flat(cell)]
    }

    pub fn lookup(&self, point: &[f64]) -> f64 {
        let cell: Vec<usize> = self.thresholds.iter().zip(point).map(|(t, &x)| interval(t, x)).collect();
        self.value(&cell)
    }

    /// A representative interior point of every interval of `axis`.
    pub fn midpoints(&self, axis: usize) -> Vec<f64> {
        let t = &self.thresholds[axis];
        match t.len() {
            0 => vec![0.0],
            n => (0..=n)
                .map(|i| match i {
                    0 => t[0] - 1.0,
                    i if i == n => t[n - 1] + 1.0,
                    i => 0.5 * (t[i - 1] + t[i]),
                })
                .collect(),
        }
    }

    /// Value matrix of a two-axis grid.
    pub fn table(&self) -> Result<Vec<Vec<f64>>> {
        let dims = self.dims();
        match dims.as_slice() {
            [r, c] => Ok((0..*r).map(|i| self.values[i * c..(i + 1) * c].to_vec()).collect()),
            [r] => Ok((0..*r).map(|i| vec![self.values[i]]).collect()),
            _ => Err(NcartError::InvalidInput(format!("expected a 2-axis grid, got {} axes", dims.len()))),
        }
    }
}

/// The grid of all thresholds of `tree`, each cell holding the tree value
/// at its midpoint. At least `min_axes` axes are produced.
pub fn refine(tree: &AxisTree, min_axes: usize) -> Result<Grid> {
    let axes = tree.axes().max(min_axes);
    if axes > 3 {
        return Err(NcartError::InvalidInput(format!("refinement supports up to 3 axes, tree uses {axes}")));
    }
    let mut thresholds = vec![Vec::new(); axes];
    tree.collect_thresholds(&mut thresholds);
    for t in &mut thresholds {
        t.sort_by(f64::total_cmp);
        t.dedup();
    }
    let mut grid = Grid {
        thresholds,
        values: Vec::new(),
    };
    let mids: Vec<Vec<f64>> = (0..axes).map(|a| grid.midpoints(a)).collect();
    let dims = grid.dims();
    let total: usize = dims.iter().product();
    let mut point = vec![0.0; axes];
    for flat in 0..total {
        let mut rest = flat;
        for a in (0..axes).rev() {
            point[a] = mids[a][rest % dims[a]];
            rest /= dims[a];
        }
        grid.values.push(tree.eval(&point));
    }
    Ok(grid)
}

/// Median; the midpoint of the two central values for even counts.
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn l1_residual(table: &[Vec<f64>], a: &[f64], b: &[f64]) -> f64 {
    table
        .iter()
        .zip(a)
        .map(|(row, &ar)| row.iter().zip(b).map(|(&v, &bc)| (ar + bc - v).abs()).sum::<f64>())
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdtFit {
    /// One value per interval of axis 0.
    pub a: Vec<f64>,
    /// One value per interval of axis 1.
    pub b: Vec<f64>,
    pub residual: f64,
    /// Objective after the initialization and after every sweep.
    pub trace: Vec<f64>,
}

/// Alternating median descent on a value table: every `a_r` becomes the
/// median of its row of `v - b`, then every `b_c` the median of its column
/// of `v - a`, until a sweep gains less than [`MIN_DECREASE`] (a sweep that
/// raises the objective is discarded). The gauge
/// `(a + t, b - t)` is fixed by making the mean of `b` the median of all
/// cell values.
pub fn fit_table(table: &[Vec<f64>]) -> Result<OdtFit> {
    let rows = table.len();
    let cols = table.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Err(NcartError::InvalidInput("empty grid".into()));
    }
    if table.iter().any(|r| r.len() != cols) {
        return Err(NcartError::InvalidInput("ragged grid".into()));
    }
    if table.iter().flatten().any(|v| !v.is_finite()) {
        return Err(NcartError::NonFinite("grid value".into()));
    }
    let mut a = vec![0.0; rows];
    let mut b: Vec<f64> = (0..cols)
        .map(|c| median(&mut table.iter().map(|r| r[c]).collect::<Vec<_>>()))
        .collect();
    let mut trace = vec![l1_residual(table, &a, &b)];
    let mut scratch = Vec::with_capacity(rows.max(cols));
    for _ in 0..MAX_SWEEPS {
        let (prev_a, prev_b) = (a.clone(), b.clone());
        for r in 0..rows {
            scratch.clear();
            scratch.extend(table[r].iter().zip(&b).map(|(v, bc)| v - bc));
            a[r] = median(&mut scratch);
        }
        for c in 0..cols {
            scratch.clear();
            scratch.extend(table.iter().zip(&a).map(|(row, ar)| row[c] - ar));
            b[c] = median(&mut scratch);
        }
        let obj = l1_residual(table, &a, &b);
        let prev = *trace.last().expect("trace starts non-empty");
        if obj > prev {
            // Only rounding can raise the objective; keep the previous sweep.
            a = prev_a;
            b = prev_b;
            break;
        }
        trace.push(obj);
        if prev - obj < MIN_DECREASE {
            break;
        }
    }
    let target = median(&mut table.iter().flatten().copied().collect::<Vec<_>>());
    let shift = b.iter().sum::<f64>() / cols as f64 - target;
    b.iter_mut().for_each(|v| *v -= shift);
    a.iter_mut().for_each(|v| *v += shift);
    let residual = l1_residual(table, &a, &b);
    Ok(OdtFit { a, b, residual, trace })
}

/// Fits two oblivious trees to a grid with at most two axes.
pub fn fit_two_odts(grid: &Grid) -> Result<OdtFit> {
    if grid.thresholds.len() > 2 {
        return Err(NcartError::InvalidInput(format!(
            "two-tree fit needs a grid with at most 2 axes, got {}",
            grid.thresholds.len()
        )));
    }
    fit_table(&grid.table()?)
}

/// Value of the two-tree sum at `point`.
pub fn odt_eval(a: &[f64], b: &[f64], thresholds: &[Vec<f64>], point: &[f64]) -> f64 {
    let r = interval(&thresholds[0], point[0]);
    let c = thresholds.get(1).map_or(0, |t| interval(t, point[1]));
    a[r] + b[c]
}
