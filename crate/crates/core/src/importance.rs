//! Gini feature importance aggregated over every tree of every block.
//!
//! A tree splits coordinate `j` of its input at `s_j`; the impurity of that
//! split over a dataset is `1 - (m_left/M)² - (m_right/M)²`. Trees of the
//! residual blocks split stream coordinates, which are credited to the
//! feature with the same index. Trees of the final block split projected
//! coordinates `k`, whose impurity is spread over features by the selection
//! weights `h(A)_kj`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, NcartError, Result};
use crate::matrix::Matrix;
use crate::model::{NcartBlock, NcartModel};

pub fn gini_leaf(m_left: usize, m_right: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(NcartError::InvalidInput("gini impurity of an empty split".into()));
    }
    if m_left + m_right != total {
        return Err(NcartError::InvalidInput(format!("split {m_left} + {m_right} does not add up to {total}")));
    }
    let (l, r) = (m_left as f64 / total as f64, m_right as f64 / total as f64);
    Ok(1.0 - l * l - r * r)
}

/// Per tree, the score of every block input coordinate.
pub fn tree_scores(block: &NcartBlock, tallies: &[Vec<(usize, usize)>], samples: usize) -> Result<Vec<Vec<f64>>> {
    if tallies.len() != block.trees.len() {
        return Err(shape_err("block_importance", block.trees.len(), tallies.len()));
    }
    let n = block.in_dim();
    let mut out = Vec::with_capacity(tallies.len());
    for (t, counts) in tallies.iter().enumerate() {
        if counts.len() != block.trees[t].input_dim() {
            return Err(shape_err("block_importance", block.trees[t].input_dim(), counts.len()));
        }
        let gini = counts
            .iter()
            .map(|&(l, r)| gini_leaf(l, r, samples))
            .collect::<Result<Vec<f64>>>()?;
        let scores = match &block.selections {
            Some(sel) => {
                let p = block.projection(&sel[t])?;
                (0..n).map(|j| (0..p.rows()).map(|k| gini[k] * p[(k, j)]).sum()).collect()
            }
            None => gini,
        };
        out.push(scores);
    }
    Ok(out)
}

/// Sum over trees of [`tree_scores`].
pub fn block_importance(block: &NcartBlock, tallies: &[Vec<(usize, usize)>], samples: usize) -> Result<Vec<f64>> {
    let mut total = vec![0.0; block.in_dim()];
    for scores in tree_scores(block, tallies, samples)? {
        for (t, s) in total.iter_mut().zip(scores) {
            *t += s;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub raw: Vec<f64>,
    /// `raw` scaled to sum to 1 (all zeros when every score is zero).
    pub normalized: Vec<f64>,
}

/// Importance of every input feature on the rows of `x` (eval mode).
pub fn feature_importance(model: &NcartModel, x: &Matrix) -> Result<Importance> {
    if x.rows() == 0 {
        return Err(NcartError::InvalidInput("feature importance over an empty dataset".into()));
    }
    let counts = model.route_counts(x)?;
    let mut raw = vec![0.0; model.n_features];
    for (block, tallies) in model.blocks.iter().zip(&counts.blocks) {
        for (r, s) in raw.iter_mut().zip(block_importance(block, tallies, counts.samples)?) {
            *r += s;
        }
    }
    let total: f64 = raw.iter().sum();
    let normalized = if total > 0.0 {
        raw.iter().map(|v| v / total).collect()
    } else {
        vec![0.0; raw.len()]
    };
    Ok(Importance { raw, normalized })
}

/// Feature indices sorted by descending score, ties by index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}
