//! Certificate mathematics: sample convergence and PAC-Bayes bounds, the
//! prior grid, worst-case rates, quantile construction and confidence
//! accounting.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixed_point::MetricId;
use crate::kl::{gaussian_kl_grouped, kl_inverse, GroupedGaussianSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SampleConvergence,
    PacBayes,
    WorstCase,
    Combined,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::SampleConvergence => "sample_convergence",
            Method::PacBayes => "pac_bayes",
            Method::WorstCase => "worst_case",
            Method::Combined => "combined",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sample_convergence" => Some(Method::SampleConvergence),
            "pac_bayes" => Some(Method::PacBayes),
            "worst_case" => Some(Method::WorstCase),
            "combined" => Some(Method::Combined),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One certified statement P(metric after k steps >= epsilon) <= bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub method: Method,
    pub metric: MetricId,
    pub k: usize,
    pub epsilon: f64,
    pub n_samples: usize,
    pub h_samples: usize,
    pub empirical: f64,
    /// Monte Carlo upper bound on the expected empirical risk; equals
    /// `empirical` for classical certificates.
    pub r_bar: f64,
    pub bound: f64,
    pub confidence: f64,
}

/// A row of the quantile table; `epsilon_bound` is `None` when no tolerance
/// on the grid qualifies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileBound {
    pub metric: MetricId,
    pub k: usize,
    pub quantile: f64,
    pub epsilon_bound: Option<f64>,
    pub confidence: f64,
}

/// Prior variance grid lambda = lambda_max * exp(-a / b), a = 1, 2, ...
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorGridSpec {
    pub lambda_max: f64,
    pub b: f64,
}

impl Default for PriorGridSpec {
    fn default() -> Self {
        PriorGridSpec { lambda_max: 100.0, b: 100.0 }
    }
}

impl PriorGridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_max > 0.0 && self.b > 0.0) || !self.lambda_max.is_finite() || !self.b.is_finite() {
            return Err(Error::Domain(format!(
                "prior grid needs positive lambda_max and b, got {} and {}",
                self.lambda_max, self.b
            )));
        }
        Ok(())
    }

    /// b log(lambda_max / lambda), the (possibly fractional) grid index.
    pub fn index_of(&self, lambda: f64) -> f64 {
        self.b * (self.lambda_max / lambda).ln()
    }

    pub fn value_at(&self, a: f64) -> f64 {
        self.lambda_max * (-a / self.b).exp()
    }

    /// Integer grid indices of an on-grid lambda vector.
    pub fn indices(&self, lambda: &[f64]) -> Result<Vec<u64>> {
        lambda
            .iter()
            .map(|&l| {
                let a = self.index_of(l);
                let r = a.round();
                if (a - r).abs() > 1e-6 {
                    Err(Error::Domain(format!("lambda {l} is off the prior grid (index {a})")))
                } else if r < 1.0 {
                    Err(Error::Domain(format!(
                        "lambda {l} has grid index {r}; indices must be at least 1"
                    )))
                } else {
                    Ok(r as u64)
                }
            })
            .collect()
    }
}

/// kl_inverse(r_hat, log(2/delta)/n).
pub fn sample_convergence_bound(r_hat: f64, n: usize, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    if n == 0 {
        return Err(Error::Precondition("sample convergence bound needs n >= 1".into()));
    }
    Ok(kl_inverse(r_hat, (2.0 / delta).ln() / n as f64))
}

/// kl_inverse(r_hat, (kl_div + log(2 sqrt(n)/delta))/n); valid for n >= 8.
pub fn maurer_bound(r_hat: f64, n: usize, kl_div: f64, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    if n < 8 {
        return Err(Error::Precondition(format!("Maurer bound needs n >= 8, got {n}")));
    }
    if !(kl_div >= 0.0) {
        return Err(Error::Domain(format!("KL divergence must be nonnegative, got {kl_div}")));
    }
    let n_f = n as f64;
    Ok(kl_inverse(r_hat, (kl_div + (2.0 * n_f.sqrt() / delta).ln()) / n_f))
}

/// The regularizer with lambda treated as continuous:
/// (1/n)[kl + sum_j 2 log(b log(lmax/lambda_j)) + J log(pi^2/6) + log(2 sqrt(n)/delta)].
pub fn regularizer_b_relaxed(kl: f64, lambda: &[f64], grid: &PriorGridSpec, n: usize, delta: f64) -> f64 {
    let n_f = n as f64;
    let mut acc = kl;
    for &l in lambda {
        acc += 2.0 * grid.index_of(l).ln();
    }
    acc += lambda.len() as f64 * (PI * PI / 6.0).ln();
    acc += (2.0 * n_f.sqrt() / delta).ln();
    acc / n_f
}

/// B(w, s, lambda) for an on-grid prior.
pub fn regularizer_b(spec: &GroupedGaussianSpec, grid: &PriorGridSpec, n: usize, delta: f64) -> Result<f64> {
    grid.validate()?;
    check_delta(delta)?;
    if n < 8 {
        return Err(Error::Precondition(format!("regularizer needs n >= 8, got {n}")));
    }
    if let Some(&l) = spec.lambda.iter().find(|&&l| l > grid.lambda_max) {
        return Err(Error::Domain(format!("lambda {l} exceeds lambda_max {}", grid.lambda_max)));
    }
    grid.indices(&spec.lambda)?;
    let kl = gaussian_kl_grouped(spec)?;
    Ok(regularizer_b_relaxed(kl, &spec.lambda, grid, n, delta))
}

/// Per-prior failure budget delta_a = delta * prod_j 6 / (pi^2 a_j^2).
pub fn delta_a(a: &[u64], delta: f64) -> f64 {
    a.iter().fold(delta, |acc, &aj| acc * 6.0 / (PI * PI * (aj as f64).powi(2)))
}

/// Rounds each lambda to the nearest grid point with index at least 1.
/// Values above lambda_max are mapped to index 1 with a warning.
pub fn round_prior(lambda: &[f64], grid: &PriorGridSpec) -> Vec<f64> {
    lambda
        .iter()
        .map(|&l| {
            if l > grid.lambda_max {
                log::warn!("prior variance {l} exceeds lambda_max {}; clamped to grid index 1", grid.lambda_max);
                return grid.value_at(1.0);
            }
            let a = grid.index_of(l).round().max(1.0);
            grid.value_at(a)
        })
        .collect()
}

/// Monte Carlo budget log(2/omega)/H for the inner KL inverse.
pub fn kl_inverse_budget(omega: f64, h: usize) -> Result<f64> {
    check_delta(omega)?;
    if h == 0 {
        return Err(Error::Precondition("H must be at least 1".into()));
    }
    Ok((2.0 / omega).ln() / h as f64)
}

/// Final bound kl_inverse(r_bar, B).
pub fn generalization_bound(r_bar: f64, b: f64) -> f64 {
    kl_inverse(r_bar, b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub label: String,
    pub budget: f64,
}

/// Explicit record of every failure budget spent by a certificate set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceLedger {
    pub entries: Vec<LedgerEntry>,
}

impl ConfidenceLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, label: impl Into<String>, budget: f64) -> &mut Self {
        self.entries.push(LedgerEntry { label: label.into(), budget });
        self
    }

    pub fn total_budget(&self) -> f64 {
        self.entries.iter().map(|e| e.budget).sum()
    }

    pub fn confidence(&self) -> Result<f64> {
        let t = self.total_budget();
        if !(t < 1.0) {
            return Err(Error::Budget(t));
        }
        Ok(1.0 - t)
    }

    /// Ledger for a learned certificate family: the per-statement budget
    /// (delta + omega) multiplied by the B-target and tolerance multiplicities.
    pub fn for_learned(delta: f64, omega: f64, n_btargets: usize, n_tolerances: usize) -> Self {
        let mut l = Self::new();
        let per = (n_btargets * n_tolerances) as f64;
        l.push(format!("delta (PAC-Bayes) x {n_btargets} B-targets x {n_tolerances} tolerances"), delta * per);
        if omega > 0.0 {
            l.push(format!("omega (Monte Carlo) x {n_btargets} B-targets x {n_tolerances} tolerances"), omega * per);
        }
        l
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("{}\t{:.12e}\n", e.label, e.budget));
        }
        out.push_str(&format!("total\t{:.12e}\n", self.total_budget()));
        match self.confidence() {
            Ok(c) => out.push_str(&format!("confidence\t{c:.12}\n")),
            Err(_) => out.push_str("confidence\tinvalid\n"),
        }
        out
    }
}

/// (risk confidence, quantile confidence) for the given multiplicities.
pub fn confidence_ledger(delta: f64, omega: f64, n_btargets: usize, n_tolerances: usize) -> Result<(f64, f64)> {
    if !(delta >= 0.0 && omega >= 0.0) {
        return Err(Error::Domain("delta and omega must be nonnegative".into()));
    }
    let risk = ConfidenceLedger::for_learned(delta, omega, n_btargets, 1).confidence()?;
    let quant = ConfidenceLedger::for_learned(delta, omega, n_btargets, n_tolerances).confidence()?;
    Ok((risk, quant))
}

/// Smallest tolerance whose risk bound is at most 1 - q.
pub fn quantile_from_grid(tolerances: &[f64], bounds: &[f64], q: f64) -> Result<Option<f64>> {
    if tolerances.is_empty() {
        return Err(Error::Precondition("empty tolerance grid".into()));
    }
    if tolerances.len() != bounds.len() {
        return Err(Error::Precondition("tolerance and bound lengths differ".into()));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Domain(format!("quantile must be in (0,1), got {q}")));
    }
    if tolerances.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Precondition("tolerances must be sorted ascending".into()));
    }
    Ok(tolerances.iter().zip(bounds).find(|(_, &b)| b <= 1.0 - q).map(|(&e, _)| e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateKind {
    Linear,
    Averaged,
}

/// Worst-case ratio ||z^{k+1} - z^k|| / ||z* - z^0|| for the operator class.
pub fn worst_case_rate(kind: RateKind, param: f64, k: usize) -> Result<f64> {
    match kind {
        RateKind::Linear => {
            if !(param > 0.0 && param < 1.0) {
                return Err(Error::Domain(format!("linear rate needs beta in (0,1), got {param}")));
            }
            Ok(2.0 * param.powi(k as i32))
        }
        RateKind::Averaged => {
            if !(0.5..1.0).contains(&param) {
                return Err(Error::Domain(format!("averaged rate needs alpha in [1/2,1), got {param}")));
            }
            let kf = k as f64;
            let ratio = kf / (kf + 1.0);
            let boundary = 0.5 * (1.0 + ratio.sqrt());
            if param <= boundary {
                // powi(0) of 0 is 1
                let v = ratio.powi(k as i32) / ((kf + 1.0) * param * (1.0 - param));
                Ok(v.sqrt())
            } else {
                Ok(2.0 * (2.0 * param - 1.0).powi(k as i32))
            }
        }
    }
}

/// Zero when the worst-case guarantee certifies the tolerance, otherwise the
/// probabilistic bound.
pub fn combine_with_worst_case(prob_bound: f64, worst_case_ratio: f64, dist_upper: f64, epsilon: f64) -> f64 {
    if worst_case_ratio * dist_upper < epsilon {
        0.0
    } else {
        prob_bound
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta must be in (0,1), got {delta}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sample_convergence_zero_risk() {
        let b = sample_convergence_bound(0.0, 100, 0.01).unwrap();
        assert_abs_diff_eq!(b, 1.0 - 200f64.powf(-0.01), epsilon = 1e-10);
    }

    #[test]
    fn maurer_zero_risk() {
        let b = maurer_bound(0.0, 100, 0.0, 0.05).unwrap();
        assert_abs_diff_eq!(b, 1.0 - 400f64.powf(-0.01), epsilon = 1e-10);
        assert!(maurer_bound(0.1, 7, 0.0, 0.05).is_err());
        assert!(maurer_bound(0.0, 100, 0.1, 0.05).unwrap() > b);
    }

    #[test]
    fn round_prior_examples() {
        let g = PriorGridSpec { lambda_max: 100.0, b: 100.0 };
        let on = g.value_at(3.0);
        assert_abs_diff_eq!(round_prior(&[on], &g)[0], on, epsilon = 1e-12);
        let r = round_prior(&[37.0], &g)[0];
        assert_abs_diff_eq!(r, 100.0 * (-0.99f64).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(r, 37.157, epsilon = 1e-3);
        assert_abs_diff_eq!(round_prior(&[150.0], &g)[0], g.value_at(1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(round_prior(&[99.9], &g)[0], g.value_at(1.0), epsilon = 1e-12);
    }

    #[test]
    fn ledger_paper_values() {
        let (r, _) = confidence_ledger(1e-5, 1e-5, 6, 1).unwrap();
        assert_abs_diff_eq!(r, 0.99988, epsilon = 1e-12);
        let (_, q) = confidence_ledger(1e-4, 0.0, 1, 81).unwrap();
        assert_abs_diff_eq!(q, 0.9919, epsilon = 1e-12);
        let (_, q) = confidence_ledger(1e-5, 1e-5, 6, 81).unwrap();
        assert_abs_diff_eq!(q, 0.99028, epsilon = 1e-12);
        assert!(confidence_ledger(0.02, 0.0, 1, 81).is_err());
    }

    #[test]
    fn quantile_examples() {
        let t = [0.1, 1.0, 10.0];
        let b = [0.5, 0.08, 0.01];
        assert_eq!(quantile_from_grid(&t, &b, 0.9).unwrap(), Some(1.0));
        assert_eq!(quantile_from_grid(&t, &[0.5, 0.5, 0.5], 0.9).unwrap(), None);
        assert!(quantile_from_grid(&[], &[], 0.9).is_err());
    }

    #[test]
    fn rate_examples() {
        assert_abs_diff_eq!(worst_case_rate(RateKind::Averaged, 0.5, 1).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(worst_case_rate(RateKind::Averaged, 0.5, 0).unwrap(), 2.0, epsilon = 1e-15);
        assert_eq!(worst_case_rate(RateKind::Linear, 0.9, 0).unwrap(), 2.0);
        assert!(worst_case_rate(RateKind::Linear, 1.0, 3).is_err());
        assert!(worst_case_rate(RateKind::Averaged, 0.4, 3).is_err());
    }

    #[test]
    fn combine_examples() {
        assert_eq!(combine_with_worst_case(0.05, 0.001, 10.0, 1.0), 0.0);
        assert_eq!(combine_with_worst_case(0.05, 1.0, 10.0, 1.0), 0.05);
    }
}
