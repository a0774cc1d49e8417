//! Sparse probability mappings: sparsemax and α-entmax, with their
//! Jacobian-vector products.
//!
//! Both map a score vector onto the probability simplex and may assign exact
//! zeros. They are used row-wise to turn a learnable score matrix into a
//! soft feature-selection matrix.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{NcartError, Result};

/// Which sparse mapping a selection layer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SparseFn {
    Sparsemax,
    /// α-entmax with α = [`ENTMAX_ALPHA`].
    Entmax,
}

pub const ENTMAX_ALPHA: f64 = 1.5;

const BISECTION_ITERS: usize = 100;
const BISECTION_TOL: f64 = 1e-12;
const NEWTON_ITERS: usize = 50;

impl SparseFn {
    pub fn alpha(self) -> f64 {
        match self {
            SparseFn::Sparsemax => 2.0,
            SparseFn::Entmax => ENTMAX_ALPHA,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SparseFn::Sparsemax => "sparsemax",
            SparseFn::Entmax => "entmax",
        }
    }

    pub fn forward(self, z: &[f64]) -> Result<Vec<f64>> {
        match self {
            SparseFn::Sparsemax => sparsemax(z),
            SparseFn::Entmax => entmax(z, ENTMAX_ALPHA),
        }
    }

    /// Gradient w.r.t. the scores given the forward output `p` and cotangent `v`.
    pub fn backward(self, p: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        match self {
            SparseFn::Sparsemax => sparsemax_bwd(p, v),
            SparseFn::Entmax => entmax_bwd(p, ENTMAX_ALPHA, v),
        }
    }

    /// Distance (in score units) from `z` to the nearest change of support.
    /// The mapping is not differentiable where this is zero.
    pub fn support_margin(self, z: &[f64]) -> Result<f64> {
        let p = self.forward(z)?;
        let a = self.alpha();
        let scale = a - 1.0;
        // On the support (α-1)z_i - τ = p_i^(α-1); off it, τ - (α-1)z_i.
        let tau = p
            .iter()
            .zip(z)
            .find(|(&pi, _)| pi > 0.0)
            .map(|(&pi, &zi)| scale * zi - pow(pi, scale))
            .expect("simplex output has a nonempty support");
        let gap = p
            .iter()
            .zip(z)
            .map(|(&pi, &zi)| if pi > 0.0 { pow(pi, scale) } else { tau - scale * zi })
            .fold(f64::INFINITY, f64::min);
        Ok(gap / scale)
    }
}

impl std::str::FromStr for SparseFn {
    type Err = NcartError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sparsemax" => Ok(SparseFn::Sparsemax),
            "entmax" | "entmax15" | "entmax1.5" => Ok(SparseFn::Entmax),
            other => Err(NcartError::Config(format!("unknown sparse function `{other}`"))),
        }
    }
}

impl std::fmt::Display for SparseFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// `x^e` with exact shortcuts for the exponents the 1.5-entmax uses.
#[inline]
fn pow(x: f64, e: f64) -> f64 {
    if e == 2.0 {
        x * x
    } else if e == 1.0 {
        x
    } else if e == 0.5 {
        x.sqrt()
    } else {
        x.powf(e)
    }
}

fn validate(z: &[f64]) -> Result<()> {
    if z.is_empty() {
        return Err(NcartError::InvalidInput("empty score vector".into()));
    }
    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
        return Err(NcartError::NonFinite(format!("score vector entry {i}")));
    }
    Ok(())
}

/// Euclidean projection of `z` onto the probability simplex.
pub fn sparsemax(z: &[f64]) -> Result<Vec<f64>> {
    validate(z)?;
    let tau = sparsemax_threshold(z);
    Ok(z.iter().map(|&v| (v - tau).max(0.0)).collect())
}

/// The threshold τ with `sparsemax(z)_i = max(z_i - τ, 0)`.
fn sparsemax_threshold(z: &[f64]) -> f64 {
    let mut order: Vec<usize> = (0..z.len()).collect();
    // stable: equal scores keep their original index order
    order.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).unwrap_or(Ordering::Equal));
    let mut cumsum = 0.0;
    let mut support_sum = 0.0;
    let mut support = 0usize;
    for (k, &i) in order.iter().enumerate() {
        cumsum += z[i];
        let k1 = (k + 1) as f64;
        if 1.0 + k1 * z[i] > cumsum {
            support = k + 1;
            support_sum = cumsum;
        }
    }
    (support_sum - 1.0) / support as f64
}

pub fn sparsemax_bwd(p: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check_pair(p, v)?;
    let mut count = 0usize;
    let mut sum = 0.0;
    for (&pi, &vi) in p.iter().zip(v) {
        if pi > 0.0 {
            count += 1;
            sum += vi;
        }
    }
    if count == 0 {
        return Err(NcartError::InvalidInput("sparse output has empty support".into()));
    }
    let mean = sum / count as f64;
    Ok(p.iter().zip(v).map(|(&pi, &vi)| if pi > 0.0 { vi - mean } else { 0.0 }).collect())
}

/// α-entmax, `p_i = max((α-1) z_i - τ, 0)^(1/(α-1))` with τ chosen so that
/// `Σ p = 1`. Larger scores receive larger probabilities.
///
/// τ is bracketed by bisection, which also fixes the support; on that
/// support τ is then solved to machine precision by Newton's method so the
/// output is a smooth function of `z` away from support changes.
pub fn entmax(z: &[f64], alpha: f64) -> Result<Vec<f64>> {
    validate(z)?;
    if !(alpha > 1.0) || !alpha.is_finite() {
        return Err(NcartError::InvalidInput(format!("entmax needs alpha > 1, got {alpha}")));
    }
    let scale = alpha - 1.0;
    let power = 1.0 / scale;
    let u: Vec<f64> = z.iter().map(|v| v * scale).collect();
    let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let mass = |tau: f64| -> f64 { u.iter().map(|&ui| pow((ui - tau).max(0.0), power)).sum::<f64>() };

    let (mut lo, mut hi) = (max - 1.0, max);
    let mut tau = 0.5 * (lo + hi);
    for _ in 0..BISECTION_ITERS {
        tau = 0.5 * (lo + hi);
        let f = mass(tau) - 1.0;
        if f.abs() <= BISECTION_TOL {
            break;
        }
        if f > 0.0 {
            lo = tau;
        } else {
            hi = tau;
        }
        if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
            break;
        }
    }

    // Newton on the (now fixed) support; f is convex and decreasing in τ.
    let support: Vec<usize> = (0..u.len()).filter(|&i| u[i] > tau).collect();
    for _ in 0..NEWTON_ITERS {
        let mut f = -1.0;
        let mut df = 0.0;
        for &i in &support {
            let gap = u[i] - tau;
            f += pow(gap, power);
            df -= power * pow(gap, power - 1.0);
        }
        if df == 0.0 {
            break;
        }
        let next = tau - f / df;
        if !(next < max) || !next.is_finite() || next == tau {
            break;
        }
        tau = next;
        if f.abs() <= f64::EPSILON {
            break;
        }
    }

    Ok(u.iter().map(|&ui| pow((ui - tau).max(0.0), power)).collect())
}

pub fn entmax_bwd(p: &[f64], alpha: f64, v: &[f64]) -> Result<Vec<f64>> {
    check_pair(p, v)?;
    let g: Vec<f64> = p.iter().map(|&pi| if pi > 0.0 { pow(pi, 2.0 - alpha) } else { 0.0 }).collect();
    let g_sum: f64 = g.iter().sum();
    if g_sum == 0.0 {
        return Err(NcartError::InvalidInput("sparse output has empty support".into()));
    }
    let gv: f64 = g.iter().zip(v).map(|(a, b)| a * b).sum();
    let shift = gv / g_sum;
    Ok(g.iter().zip(v).map(|(&gi, &vi)| gi * vi - gi * shift).collect())
}

fn check_pair(p: &[f64], v: &[f64]) -> Result<()> {
    if p.len() != v.len() {
        return Err(crate::error::shape_err("sparse backward", p.len(), v.len()));
    }
    Ok(())
}
