//! Monte Carlo calibration of a trained posterior into risk and quantile certificates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{kl_inverse_budget, quantile_from_grid, Certificate, ConfidenceLedger, Method, QuantileBound};
use crate::error::{Error, Result};
use crate::fixed_point::{metric_value, Certification, MetricId, NonFinitePolicy};
use crate::kl::kl_inverse;
use crate::learned::{sample_weights, LearnedOptimizer, PosteriorSpec};
use crate::problems::Instance;
use crate::rng::Stream;

pub const DEFAULT_H: usize = 2000;

/// A metric with its ascending tolerance grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricGrid {
    pub metric: MetricId,
    pub tolerances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationConfig {
    pub h: usize,
    pub delta: f64,
    pub omega: f64,
    pub metrics: Vec<MetricGrid>,
    /// Iterations to certify; may exceed the training horizon.
    pub ks: Vec<usize>,
    pub seed: u64,
    pub policy: NonFinitePolicy,
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 {
            return Err(Error::Domain("H must be at least 1".into()));
        }
        for (name, v) in [("delta", self.delta), ("omega", self.omega)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Domain(format!("{name} must be in (0,1), got {v}")));
            }
        }
        if !(self.delta + self.omega < 1.0) {
            return Err(Error::Domain("delta + omega must be below 1".into()));
        }
        if self.ks.is_empty() || self.metrics.is_empty() {
            return Err(Error::Domain("calibration needs at least one iteration and one metric".into()));
        }
        for m in &self.metrics {
            if m.tolerances.is_empty() {
                return Err(Error::Domain(format!("empty tolerance grid for {}", m.metric)));
            }
            if m.tolerances.windows(2).any(|w| !(w[0] <= w[1])) {
                return Err(Error::Domain(format!("tolerances for {} must be ascending", m.metric)));
            }
        }
        Ok(())
    }

    pub fn k_max(&self) -> usize {
        self.ks.iter().copied().max().unwrap_or(0)
    }
}

/// Failure counts over (k, epsilon) for one metric, aggregated over N instances
/// and H weight samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskGrid {
    pub metric: MetricId,
    pub ks: Vec<usize>,
    pub tolerances: Vec<f64>,
    /// Row-major [k index][tolerance index].
    pub failures: Vec<u64>,
    pub n: usize,
    pub h: usize,
}

impl RiskGrid {
    pub fn failures_at(&self, ki: usize, ti: usize) -> u64 {
        self.failures[ki * self.tolerances.len() + ti]
    }

    /// (1 / NH) sum_j sum_i e_{theta_j}(x_i).
    pub fn r_hat(&self, ki: usize, ti: usize) -> f64 {
        self.failures_at(ki, ti) as f64 / (self.n * self.h) as f64
    }
}

/// Per-metric histograms: bucket c counts pairs whose value meets exactly the
/// first c tolerances.
struct Hist {
    counts: Vec<Vec<u64>>,
}

fn bucket(v: f64, tolerances: &[f64], policy: NonFinitePolicy) -> Result<usize> {
    if v.is_nan() || v == f64::INFINITY {
        return match policy {
            NonFinitePolicy::Abort => Err(Error::NonFinite(format!("metric value {v}"))),
            NonFinitePolicy::CountAsFailure => Ok(tolerances.len()),
        };
    }
    Ok(tolerances.partition_point(|&e| e <= v))
}

/// Draws H weight samples and records failures at every (metric, k, epsilon).
pub fn mc_empirical_risk(
    posterior: &PosteriorSpec,
    model: &dyn LearnedOptimizer,
    instances: &[Instance],
    cal: &CalibrationConfig,
) -> Result<Vec<RiskGrid>> {
    cal.validate()?;
    if instances.is_empty() {
        return Err(Error::Precondition("calibration needs at least one instance".into()));
    }
    if posterior.w.len() != model.n_params() {
        return Err(Error::Precondition("posterior does not match the architecture".into()));
    }
    for m in &cal.metrics {
        if m.metric.needs_truth() && instances.iter().any(|i| i.truth.is_none()) {
            return Err(Error::Precondition(format!("{} needs ground truths", m.metric)));
        }
    }
    let k_max = cal.k_max();
    let nk = cal.ks.len();
    let root = Stream::new(cal.seed).derive("calibration", 0);
    let dim = model.dim();
    let per_j: Vec<Hist> = (0..cal.h)
        .into_par_iter()
        .map(|j| {
            let theta = sample_weights(posterior, &mut root.derive("weights", j as u64));
            let mut hist = Hist {
                counts: cal.metrics.iter().map(|m| vec![0u64; nk * (m.tolerances.len() + 1)]).collect(),
            };
            let mut traj = vec![0.0; (k_max + 2) * dim];
            for (i, inst) in instances.iter().enumerate() {
                model.rollout(&theta, &inst.x, k_max + 1, &mut |k, z| {
                    traj[k * dim..(k + 1) * dim].copy_from_slice(z);
                });
                for (mi, mg) in cal.metrics.iter().enumerate() {
                    let width = mg.tolerances.len() + 1;
                    for (ki, &k) in cal.ks.iter().enumerate() {
                        let z = &traj[k * dim..(k + 1) * dim];
                        let tz = &traj[(k + 1) * dim..(k + 2) * dim];
                        let v = if z.iter().all(|v| v.is_finite()) {
                            metric_value(mg.metric, z, tz, inst.truth.as_deref())?
                        } else {
                            f64::NAN
                        };
                        let c = bucket(v, &mg.tolerances, cal.policy)
                            .map_err(|e| Error::NonFinite(format!("sample {j}, instance {i}, k {k}: {e}")))?;
                        hist.counts[mi][ki * width + c] += 1;
                    }
                }
            }
            Ok(hist)
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(cal.metrics.len());
    for (mi, mg) in cal.metrics.iter().enumerate() {
        let nt = mg.tolerances.len();
        let width = nt + 1;
        let mut total = vec![0u64; nk * width];
        for h in &per_j {
            for (a, b) in total.iter_mut().zip(&h.counts[mi]) {
                *a += b;
            }
        }
        let mut failures = vec![0u64; nk * nt];
        for ki in 0..nk {
            // failures at tolerance t: values meeting more than t tolerances
            let mut acc = 0u64;
            for t in (0..nt).rev() {
                acc += total[ki * width + t + 1];
                failures[ki * nt + t] = acc;
            }
        }
        out.push(RiskGrid {
            metric: mg.metric,
            ks: cal.ks.clone(),
            tolerances: mg.tolerances.clone(),
            failures,
            n: instances.len(),
            h: cal.h,
        });
    }
    Ok(out)
}

/// Per cell: R_bar = kl_inverse(R_hat, log(2/omega)/H), R* = kl_inverse(R_bar, B*).
pub fn calibrate_bound(grid: &RiskGrid, b_star: f64, omega: f64, confidence: f64) -> Result<Vec<Certificate>> {
    if !(b_star >= 0.0) {
        return Err(Error::Domain(format!("B* must be nonnegative, got {b_star}")));
    }
    let c_mc = kl_inverse_budget(omega, grid.h)?;
    let mut out = Vec::with_capacity(grid.failures.len());
    for (ki, &k) in grid.ks.iter().enumerate() {
        for (ti, &eps) in grid.tolerances.iter().enumerate() {
            let r_hat = grid.r_hat(ki, ti);
            let r_bar = kl_inverse(r_hat, c_mc);
            let bound = kl_inverse(r_bar, b_star);
            out.push(Certificate {
                method: Method::PacBayes,
                metric: grid.metric,
                k,
                epsilon: eps,
                n_samples: grid.n,
                h_samples: grid.h,
                empirical: r_hat,
                r_bar,
                bound,
                confidence,
            });
        }
    }
    Ok(out)
}

/// Monte Carlo risk, calibrated certificates and quantile bounds for a trained
/// posterior. `n_btargets` is the number of B_target values tried in training.
pub fn certify_learned(
    posterior: &PosteriorSpec,
    model: &dyn LearnedOptimizer,
    instances: &[Instance],
    cal: &CalibrationConfig,
    quantiles: &[f64],
    b_star: f64,
    n_btargets: usize,
) -> Result<Certification> {
    let grids = mc_empirical_risk(posterior, model, instances, cal)?;
    certify_from_grids(&grids, cal, quantiles, b_star, n_btargets)
}

/// Certificates from precomputed risk grids.
pub fn certify_from_grids(
    grids: &[RiskGrid],
    cal: &CalibrationConfig,
    quantiles: &[f64],
    b_star: f64,
    n_btargets: usize,
) -> Result<Certification> {
    if n_btargets == 0 {
        return Err(Error::Precondition("at least one B_target".into()));
    }
    let risk_ledger = ConfidenceLedger::for_learned(cal.delta, cal.omega, n_btargets, 1);
    let risk_conf = risk_ledger.confidence()?;
    let n_tol_max = grids.iter().map(|g| g.tolerances.len()).max().unwrap_or(1);
    let quantile_ledger = ConfidenceLedger::for_learned(cal.delta, cal.omega, n_btargets, n_tol_max);
    quantile_ledger.confidence()?;
    let mut certificates = Vec::new();
    let mut qrows = Vec::new();
    for g in grids {
        let certs = calibrate_bound(g, b_star, cal.omega, risk_conf)?;
        let nt = g.tolerances.len();
        let qconf = ConfidenceLedger::for_learned(cal.delta, cal.omega, n_btargets, nt).confidence()?;
        for (ki, &k) in g.ks.iter().enumerate() {
            let bounds: Vec<f64> = certs[ki * nt..(ki + 1) * nt].iter().map(|c| c.bound).collect();
            for &q in quantiles {
                qrows.push(QuantileBound {
                    metric: g.metric,
                    k,
                    quantile: q,
                    epsilon_bound: quantile_from_grid(&g.tolerances, &bounds, q)?,
                    confidence: qconf,
                });
            }
        }
        certificates.extend(certs);
    }
    Ok(Certification { certificates, quantiles: qrows, risk_ledger, quantile_ledger })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucket_counts_met_tolerances() {
        let t = [1.0, 2.0, 3.0];
        assert_eq!(bucket(0.5, &t, NonFinitePolicy::Abort).unwrap(), 0);
        assert_eq!(bucket(2.0, &t, NonFinitePolicy::Abort).unwrap(), 2);
        assert_eq!(bucket(9.0, &t, NonFinitePolicy::Abort).unwrap(), 3);
        assert!(bucket(f64::NAN, &t, NonFinitePolicy::Abort).is_err());
        assert_eq!(bucket(f64::NAN, &t, NonFinitePolicy::CountAsFailure).unwrap(), 3);
    }
}
