//! α-entmax in the scaled form
//!
//! ```text
//! w_j = [ (α−1)/α · (ℓ_j − τ) ]₊ ^ (1/(α−1)),   Σ_j w_j = 1
//! ```
//!
//! The `(α−1)/α` factor sits inside the bracket, so compared with the more
//! common `[(α−1)·z − τ']₊` parameterization the logits are effectively
//! divided by α. At α = 2 this is sparsemax of `ℓ/2`; as α → 1 it tends to
//! softmax of `ℓ/α`.
//!
//! The threshold is found by bisection, which works for any α in (1, 2].
//! α = 1.5 additionally has a closed-form sort-based solver used on the hot
//! path; the two are checked against each other in the tests.
//!
//! Entries with `ℓ_j ≤ τ` receive exactly zero.

use crate::error::{Error, Result};

/// Output of [`entmax`].
#[derive(Clone, Debug, PartialEq)]
pub struct SparseWeights {
    pub weights: Vec<f64>,
    /// Indices with strictly positive weight, ascending.
    pub support: Vec<usize>,
    pub tau: f64,
}

impl SparseWeights {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

fn validate(logits: &[f64], alpha: f64) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::Dimension("entmax of an empty vector".into()));
    }
    if !(alpha > 1.0 && alpha <= 2.0) {
        return Err(Error::Config(format!(
            "entmax alpha {alpha} outside (1, 2]; use softmax for alpha = 1"
        )));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Contract("entmax of non-finite logits".into()));
    }
    Ok(())
}

#[inline]
fn bracket_pow(base: f64, power: f64) -> f64 {
    if base <= 0.0 {
        0.0
    } else if power == 1.0 {
        base
    } else if power == 2.0 {
        base * base
    } else {
        base.powf(power)
    }
}

fn mass(logits: &[f64], tau: f64, scale: f64, power: f64) -> f64 {
    logits.iter().map(|&l| bracket_pow(scale * (l - tau), power)).sum()
}

/// Threshold by monotone bisection on `[max ℓ − α/(α−1), max ℓ]`.
pub fn solve_tau(logits: &[f64], alpha: f64) -> Result<f64> {
    validate(logits, alpha)?;
    Ok(bisect_tau(logits, alpha))
}

fn bisect_tau(logits: &[f64], alpha: f64) -> f64 {
    let scale = (alpha - 1.0) / alpha;
    let power = 1.0 / (alpha - 1.0);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // mass(lo) ≥ 1 because the top entry alone contributes exactly 1
    let (mut lo, mut hi) = (max - 1.0 / scale, max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if mass(logits, mid, scale, power) >= 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (m_lo, m_hi) = (mass(logits, lo, scale, power), mass(logits, hi, scale, power));
    if (m_lo - 1.0).abs() <= (m_hi - 1.0).abs() {
        lo
    } else {
        hi
    }
}

/// Closed-form threshold for α = 1.5.
///
/// With `z = ℓ/3` the weights are `(z − t)₊²` and `τ = 3t`; for a candidate
/// support of the `k` largest entries `t` solves `Σ (z_i − t)² = 1`.
pub fn solve_tau_15(logits: &[f64]) -> Result<f64> {
    validate(logits, 1.5)?;
    Ok(exact_tau_15(logits))
}

fn exact_tau_15(logits: &[f64]) -> f64 {
    let mut z: Vec<f64> = logits.iter().map(|l| l / 3.0).collect();
    z.sort_by(|a, b| b.total_cmp(a));
    let (mut s1, mut s2) = (0.0, 0.0);
    let mut taus = Vec::with_capacity(z.len());
    let mut support = 0;
    for (i, &zi) in z.iter().enumerate() {
        let k = (i + 1) as f64;
        s1 += zi;
        s2 += zi * zi;
        let mean = s1 / k;
        let ss = s2 - k * mean * mean;
        let delta = ((1.0 - ss) / k).max(0.0);
        let t = mean - delta.sqrt();
        if t <= zi {
            support += 1;
        }
        taus.push(t);
    }
    3.0 * taus[support.max(1) - 1]
}

/// Closed-form threshold for α = 2 (sparsemax of `ℓ/2`, `τ = 2t`).
fn exact_tau_2(logits: &[f64]) -> f64 {
    let mut z: Vec<f64> = logits.iter().map(|l| l / 2.0).collect();
    z.sort_by(|a, b| b.total_cmp(a));
    let (mut cum, mut best) = (0.0, (1, z[0] - 1.0));
    for (i, &zi) in z.iter().enumerate() {
        cum += zi;
        let k = (i + 1) as f64;
        if 1.0 + k * zi > cum {
            best = (i + 1, (cum - 1.0) / k);
        }
    }
    2.0 * best.1
}

fn weights_at(logits: &[f64], tau: f64, alpha: f64) -> SparseWeights {
    let scale = (alpha - 1.0) / alpha;
    let power = 1.0 / (alpha - 1.0);
    let mut weights: Vec<f64> = logits.iter().map(|&l| bracket_pow(scale * (l - tau), power)).collect();
    let total: f64 = weights.iter().sum();
    // absorbs the last-ulp residue of the threshold solve
    for w in weights.iter_mut() {
        *w /= total;
    }
    let support = weights
        .iter()
        .enumerate()
        .filter(|(_, w)| **w > 0.0)
        .map(|(i, _)| i)
        .collect();
    SparseWeights { weights, support, tau }
}

/// α-entmax of one logit vector.
pub fn entmax(logits: &[f64], alpha: f64) -> Result<SparseWeights> {
    validate(logits, alpha)?;
    let tau = if alpha == 1.5 {
        exact_tau_15(logits)
    } else if alpha == 2.0 {
        exact_tau_2(logits)
    } else {
        bisect_tau(logits, alpha)
    };
    Ok(weights_at(logits, tau, alpha))
}

/// Same as [`entmax`] but always solving τ by bisection.
pub fn entmax_bisect(logits: &[f64], alpha: f64) -> Result<SparseWeights> {
    validate(logits, alpha)?;
    Ok(weights_at(logits, bisect_tau(logits, alpha), alpha))
}

/// Vector–Jacobian product `uᵀ ∂w/∂ℓ`.
///
/// On the support `∂w/∂ℓ = (1/α)(diag(s) − s sᵀ / Σs)` with `s = w^(2−α)`;
/// off the support the Jacobian rows and columns vanish.
pub fn entmax_vjp(out: &SparseWeights, upstream: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if upstream.len() != out.weights.len() {
        return Err(Error::Dimension(format!(
            "entmax_vjp: upstream length {} vs {}",
            upstream.len(),
            out.weights.len()
        )));
    }
    Ok(vjp_row(&out.weights, upstream, alpha))
}

pub(crate) fn vjp_row(weights: &[f64], upstream: &[f64], alpha: f64) -> Vec<f64> {
    let exponent = 2.0 - alpha;
    let s: Vec<f64> = weights
        .iter()
        .map(|&w| {
            if w <= 0.0 {
                0.0
            } else if exponent == 0.5 {
                w.sqrt()
            } else {
                w.powf(exponent)
            }
        })
        .collect();
    let s_sum: f64 = s.iter().sum();
    let su: f64 = s.iter().zip(upstream).map(|(a, b)| a * b).sum();
    let mean = if s_sum > 0.0 { su / s_sum } else { 0.0 };
    s.iter()
        .zip(upstream)
        .map(|(si, ui)| si * (ui - mean) / alpha)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bisection_oracle(logits: &[f64], alpha: f64) -> Vec<f64> {
        // plain interval halving on the raw sum, no shortcuts
        let f = |t: f64| -> f64 {
            logits
                .iter()
                .map(|l| (((alpha - 1.0) / alpha) * (l - t)).max(0.0).powf(1.0 / (alpha - 1.0)))
                .sum()
        };
        let (mut lo, mut hi) = (-1e3, 1e3);
        for _ in 0..400 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        logits
            .iter()
            .map(|l| (((alpha - 1.0) / alpha) * (l - lo)).max(0.0).powf(1.0 / (alpha - 1.0)))
            .collect()
    }

    #[test]
    fn uniform_logits() {
        let w = entmax(&[0.3; 4], 1.5).unwrap();
        for x in &w.weights {
            assert!((x - 0.25).abs() < 1e-15);
        }
        assert_eq!(w.support, vec![0, 1, 2, 3]);
    }

    #[test]
    fn dominant_logit_is_one_hot() {
        let w = entmax(&[10.0, 0.0, 0.0], 1.5).unwrap();
        assert_eq!(w.weights, vec![1.0, 0.0, 0.0]);
        // ((α−1)/α · (10 − τ))² = 1
        assert!((w.tau - 7.0).abs() < 1e-12);
        assert!((solve_tau(&[10.0, 0.0, 0.0], 1.5).unwrap() - 7.0).abs() < 1e-12);
    }

    #[test]
    fn four_logit_case_against_oracle() {
        let l = [1.0, 0.5, 0.1, -2.0];
        let w = entmax(&l, 1.5).unwrap();
        let oracle = bisection_oracle(&l, 1.5);
        assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        assert_eq!(w.weights[3], 0.0);
        assert!(w.weights[0] > w.weights[1] && w.weights[1] > w.weights[2]);
        for (a, b) in w.weights.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn symmetric_tau_closed_form() {
        for &alpha in &[1.2, 1.5, 2.0] {
            for n in [1usize, 3, 7] {
                let c = 0.4;
                let tau = solve_tau(&vec![c; n], alpha).unwrap();
                let expect = c - alpha / (alpha - 1.0) * (1.0 / n as f64).powf(alpha - 1.0);
                assert!((tau - expect).abs() < 1e-12, "alpha {alpha} n {n}: {tau} vs {expect}");
            }
        }
        assert_eq!(entmax(&[2.5], 1.7).unwrap().weights, vec![1.0]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(entmax(&[], 1.5), Err(Error::Dimension(_))));
        assert!(matches!(entmax(&[1.0], 1.0), Err(Error::Config(_))));
        assert!(matches!(entmax(&[1.0], 2.5), Err(Error::Config(_))));
        let w = entmax(&[1.0, 2.0], 1.5).unwrap();
        assert!(matches!(entmax_vjp(&w, &[1.0], 1.5), Err(Error::Dimension(_))));
    }

    #[test]
    fn vjp_trivial_cases() {
        let w = entmax(&[0.2, -0.4, 1.1, 0.9, 0.0], 1.5).unwrap();
        let g = entmax_vjp(&w, &[3.0; 5], 1.5).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-15));
        let g = entmax_vjp(&w, &[0.0; 5], 1.5).unwrap();
        assert!(g.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn exact_and_bisection_solvers_agree() {
        let cases: [&[f64]; 4] = [&[1.0, 0.5, 0.1, -2.0], &[0.0, 0.0], &[5.0, -5.0, 4.9, 1.0, 2.0], &[0.3]];
        for l in cases {
            let a = entmax(l, 1.5).unwrap();
            let b = entmax_bisect(l, 1.5).unwrap();
            assert_eq!(a.support, b.support);
            for (x, y) in a.weights.iter().zip(&b.weights) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
