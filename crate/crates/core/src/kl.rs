//! Bernoulli KL divergence, its inverse, and the grouped diagonal-Gaussian KL.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper end of the bisection interval for [`kl_inverse`].
pub const KL_INV_P_MAX: f64 = 1.0 - 1e-15;
/// Absolute tolerance of the bisection in [`kl_inverse`].
pub const KL_INV_TOL: f64 = 1e-12;
const KL_INV_MAX_ITER: usize = 200;

/// A pair of Bernoulli means: `q` is the estimate, `p` the true mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BernoulliPair {
    pub q: f64,
    pub p: f64,
}

impl BernoulliPair {
    pub fn kl(&self) -> Result<f64> {
        bernoulli_kl(self.q, self.p)
    }
}

fn xlogy_ratio(a: f64, b: f64) -> f64 {
    // a * log(a / b) with 0 log 0 = 0
    if a == 0.0 {
        0.0
    } else {
        a * (a / b).ln()
    }
}

/// kl(q || p) with the endpoint conventions kl(q || 1) = +inf unless q = 1
/// and kl(q || 0) = +inf unless q = 0. Never returns NaN for inputs in [0,1].
pub fn kl_extended(q: f64, p: f64) -> f64 {
    if p <= 0.0 {
        return if q <= 0.0 { 0.0 } else { f64::INFINITY };
    }
    if p >= 1.0 {
        return if q >= 1.0 { 0.0 } else { f64::INFINITY };
    }
    let v = xlogy_ratio(q, p) + xlogy_ratio(1.0 - q, 1.0 - p);
    v.max(0.0)
}

/// Bernoulli KL divergence kl(q || p).
///
/// Returns [`Error::InfiniteDivergence`] when the divergence is infinite.
pub fn bernoulli_kl(q: f64, p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) || !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("kl arguments must lie in [0,1], got q={q}, p={p}")));
    }
    let v = kl_extended(q, p);
    if v.is_infinite() {
        Err(Error::InfiniteDivergence { q, p })
    } else {
        Ok(v)
    }
}

/// sup{p in [0,1] : kl(q || p) <= c}, by bisection on [q, 1 - 1e-15].
///
/// The returned value is the upper end of the final bracket, so it never
/// understates the supremum by more than rounding.
pub fn kl_inverse(q: f64, c: f64) -> f64 {
    let q = q.clamp(0.0, 1.0);
    if c.is_nan() {
        return f64::NAN;
    }
    if c <= 0.0 {
        return q;
    }
    if q >= KL_INV_P_MAX {
        return 1.0;
    }
    if c >= kl_extended(q, KL_INV_P_MAX) {
        return 1.0;
    }
    let mut lo = q;
    let mut hi = KL_INV_P_MAX;
    for _ in 0..KL_INV_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if kl_extended(q, mid) <= c {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= KL_INV_TOL && (kl_extended(q, hi) - c).abs() <= KL_INV_TOL {
            break;
        }
    }
    hi
}

/// Pinsker upper bound q + sqrt(c/2) on the KL inverse. May exceed 1.
pub fn pinsker_upper(q: f64, c: f64) -> f64 {
    q + (c / 2.0).sqrt()
}

/// Implicit derivatives (d/dq, d/dc) of `kl_inverse(q, c)`.
///
/// Requires q in (0,1) and c > 0. When the inverse saturates at 1 both
/// derivatives are 0.
pub fn kl_inverse_grad(q: f64, c: f64) -> Result<(f64, f64)> {
    if !(q > 0.0 && q < 1.0) || !(c > 0.0) {
        return Err(Error::NonDifferentiable { q, c });
    }
    let p = kl_inverse(q, c);
    Ok(kl_inverse_grad_at(q, p))
}

/// Implicit derivatives at a known p = kl_inverse(q, c).
pub fn kl_inverse_grad_at(q: f64, p: f64) -> (f64, f64) {
    if p >= KL_INV_P_MAX || p <= q {
        return (0.0, 0.0);
    }
    let dc = p * (1.0 - p) / (p - q);
    let dq = dc * ((p / q).ln() + ((1.0 - q) / (1.0 - p)).ln());
    (dq, dc)
}

/// A disjoint cover of the weight indices 0..p by J groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub groups: Vec<Vec<usize>>,
}

impl Partition {
    /// Consecutive blocks of the given sizes.
    pub fn from_sizes(sizes: &[usize]) -> Self {
        let mut start = 0;
        let groups = sizes
            .iter()
            .map(|&n| {
                let g: Vec<usize> = (start..start + n).collect();
                start += n;
                g
            })
            .collect();
        Partition { groups }
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_weights(&self) -> usize {
        self.groups.iter().map(|g| g.len()).sum()
    }

    /// Group index of every weight; errors if the groups are not a disjoint cover.
    pub fn group_of(&self) -> Result<Vec<usize>> {
        let p = self.n_weights();
        let mut out = vec![usize::MAX; p];
        for (j, g) in self.groups.iter().enumerate() {
            for &i in g {
                if i >= p || out[i] != usize::MAX {
                    return Err(Error::Domain(format!(
                        "partition is not a disjoint cover (index {i})"
                    )));
                }
                out[i] = j;
            }
        }
        Ok(out)
    }
}

/// Posterior N(w, diag s) against prior N(w0, diag of per-group lambda).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedGaussianSpec {
    pub w: Vec<f64>,
    pub s: Vec<f64>,
    pub w0: Vec<f64>,
    pub partition: Partition,
    pub lambda: Vec<f64>,
}

impl GroupedGaussianSpec {
    pub fn validate(&self) -> Result<Vec<usize>> {
        let p = self.w.len();
        if self.s.len() != p || self.w0.len() != p {
            return Err(Error::Domain("w, s, w0 lengths differ".into()));
        }
        if self.partition.n_weights() != p {
            return Err(Error::Domain(format!(
                "partition covers {} weights, expected {p}",
                self.partition.n_weights()
            )));
        }
        if self.lambda.len() != self.partition.n_groups() {
            return Err(Error::Domain("lambda length differs from group count".into()));
        }
        if let Some(v) = self.s.iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain(format!("posterior variance must be positive, got {v}")));
        }
        if let Some(v) = self.lambda.iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain(format!("prior variance must be positive, got {v}")));
        }
        self.partition.group_of()
    }
}

/// KL(N(w, diag s) || N(w0, diag lambda_{group(i)})).
pub fn gaussian_kl_grouped(spec: &GroupedGaussianSpec) -> Result<f64> {
    spec.validate()?;
    let p = spec.w.len() as f64;
    let sum_log_s: f64 = spec.s.iter().map(|v| v.ln()).sum();
    let mut acc = 0.0;
    for (j, g) in spec.partition.groups.iter().enumerate() {
        let lam = spec.lambda[j];
        let mut s1 = 0.0;
        let mut d2 = 0.0;
        for &i in g {
            s1 += spec.s[i];
            let d = spec.w[i] - spec.w0[i];
            d2 += d * d;
        }
        acc += s1 / lam + d2 / lam + g.len() as f64 * lam.ln();
    }
    Ok((-0.5 * (p + sum_log_s) + 0.5 * acc).max(0.0))
}
