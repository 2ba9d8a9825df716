//! Fixed-point iteration runner, metrics, trace tensors and the classical
//! certification pipeline.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{
    combine_with_worst_case, quantile_from_grid, sample_convergence_bound, Certificate, ConfidenceLedger, Method,
    QuantileBound, RateKind,
};
use crate::error::{Error, Result};
use crate::linalg::{dist2, norm2};
use crate::problems::Instance;
use crate::report::fmt_sig;

/// NMSE values are floored here so an exact match stays finite.
pub const NMSE_FLOOR_DB: f64 = -320.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricId {
    FpResidual,
    Mse,
    Nmse,
}

impl MetricId {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetricId::FpResidual => "fp_residual",
            MetricId::Mse => "mse",
            MetricId::Nmse => "nmse",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fp_residual" => Some(MetricId::FpResidual),
            "mse" => Some(MetricId::Mse),
            "nmse" => Some(MetricId::Nmse),
            _ => None,
        }
    }

    fn code(&self) -> u8 {
        match self {
            MetricId::FpResidual => 0,
            MetricId::Mse => 1,
            MetricId::Nmse => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(MetricId::FpResidual),
            1 => Some(MetricId::Mse),
            2 => Some(MetricId::Nmse),
            _ => None,
        }
    }

    pub fn needs_truth(&self) -> bool {
        !matches!(self, MetricId::FpResidual)
    }

    /// The default tolerance grid for this metric.
    pub fn default_grid(&self) -> ToleranceGrid {
        match self {
            MetricId::Nmse => ToleranceGrid { min: -80.0, max: 0.0, count: 81, scale: GridScale::Linear },
            _ => ToleranceGrid { min: 1e-6, max: 1e2, count: 81, scale: GridScale::Log },
        }
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridScale {
    Log,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToleranceGrid {
    pub min: f64,
    pub max: f64,
    pub count: usize,
    pub scale: GridScale,
}

impl ToleranceGrid {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Domain("tolerance grid needs at least one point".into()));
        }
        if !(self.min <= self.max) || !self.min.is_finite() || !self.max.is_finite() {
            return Err(Error::Domain(format!("bad tolerance range [{}, {}]", self.min, self.max)));
        }
        if self.scale == GridScale::Log && !(self.min > 0.0) {
            return Err(Error::Domain("log-spaced tolerance grid needs min > 0".into()));
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.min];
        }
        let last = (self.count - 1) as f64;
        (0..self.count)
            .map(|i| {
                let t = i as f64 / last;
                match self.scale {
                    GridScale::Linear => self.min + t * (self.max - self.min),
                    GridScale::Log => 10f64.powf(self.min.log10() + t * (self.max.log10() - self.min.log10())),
                }
            })
            .collect()
    }
}

/// Declared operator class, consumed by the worst-case rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OperatorClass {
    Contractive { beta: f64 },
    LinearlyConvergent { beta: f64 },
    Averaged { alpha: f64 },
}

impl OperatorClass {
    pub fn rate_kind(&self) -> (RateKind, f64) {
        match *self {
            OperatorClass::Contractive { beta } | OperatorClass::LinearlyConvergent { beta } => (RateKind::Linear, beta),
            OperatorClass::Averaged { alpha } => (RateKind::Averaged, alpha),
        }
    }

    /// Worst-case bound on ||z^{k+1} - z^k|| / ||z* - z^0||.
    pub fn rate(&self, k: usize) -> Result<f64> {
        let (kind, p) = self.rate_kind();
        crate::bounds::worst_case_rate(kind, p, k)
    }
}

/// z -> T(z, x) for a fixed parameter x.
pub trait FixedPointOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, z: &[f64], x: &[f64], out: &mut [f64]);
    fn class(&self) -> Option<OperatorClass> {
        None
    }
    /// Candidate solution read off the iterate; the iterate itself by default.
    fn extract(&self, z: &[f64], _x: &[f64]) -> Vec<f64> {
        z.to_vec()
    }
}

/// Provides a (warm-start) initialization for a parameter.
pub trait WarmStart: Sync {
    fn init(&self, x: &[f64]) -> Vec<f64>;
}

#[derive(Clone, Copy)]
pub enum Initialization<'a> {
    Zero,
    WarmStart(&'a dyn WarmStart),
}

impl Initialization<'_> {
    pub fn z0(&self, dim: usize, x: &[f64]) -> Vec<f64> {
        match self {
            Initialization::Zero => vec![0.0; dim],
            Initialization::WarmStart(w) => w.init(x),
        }
    }
}

/// What to do when an iterate or metric value stops being finite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NonFinitePolicy {
    #[default]
    Abort,
    /// Record +inf from the failing iteration on, which counts as an error
    /// at every tolerance.
    CountAsFailure,
}

/// Metric values indexed by [instance][weight sample][iteration 0..=k_max].
#[derive(Debug, Clone, PartialEq)]
pub struct TraceTensor {
    pub metric: MetricId,
    pub n: usize,
    pub h: usize,
    pub k_max: usize,
    pub values: Vec<f64>,
}

const TRACE_MAGIC: &[u8; 4] = b"FPTR";
const TRACE_VERSION: u32 = 1;

impl TraceTensor {
    pub fn zeros(metric: MetricId, n: usize, h: usize, k_max: usize) -> Self {
        TraceTensor { metric, n, h, k_max, values: vec![0.0; n * h * (k_max + 1)] }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.h + j) * (self.k_max + 1) + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.idx(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let id = self.idx(i, j, k);
        self.values[id] = v;
    }

    /// The (i, j) trajectory over iterations.
    pub fn series(&self, i: usize, j: usize) -> &[f64] {
        let s = self.idx(i, j, 0);
        &self.values[s..s + self.k_max + 1]
    }

    /// All N*H values at iteration k, in instance-major order.
    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.n * self.h).map(|r| self.values[r * (self.k_max + 1) + k]).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "instance,weight_sample,iteration,value")?;
        for i in 0..self.n {
            for j in 0..self.h {
                for k in 0..=self.k_max {
                    writeln!(w, "{i},{j},{k},{}", fmt_sig(self.get(i, j, k)))?;
                }
            }
        }
        Ok(())
    }

    /// Parses the flat CSV layout. Axis sizes are taken from the largest indices.
    pub fn read_csv<R: Read>(metric: MetricId, mut r: R) -> Result<Self> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse { offset: 0, msg: "empty trace CSV".into() })?;
        if header.trim() != "instance,weight_sample,iteration,value" {
            return Err(Error::Parse { offset: 0, msg: format!("unexpected header `{header}`") });
        }
        let mut rows = Vec::new();
        let (mut n, mut h, mut kk) = (0usize, 0usize, 0usize);
        for (ln, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Parse { offset: ln + 1, msg: format!("bad trace row `{line}`") };
            if f.len() != 4 {
                return Err(bad());
            }
            let i: usize = f[0].parse().map_err(|_| bad())?;
            let j: usize = f[1].parse().map_err(|_| bad())?;
            let k: usize = f[2].parse().map_err(|_| bad())?;
            let v: f64 = f[3].parse().map_err(|_| bad())?;
            n = n.max(i + 1);
            h = h.max(j + 1);
            kk = kk.max(k + 1);
            rows.push((i, j, k, v));
        }
        if rows.len() != n * h * kk {
            return Err(Error::Parse { offset: 0, msg: format!("expected {} rows, found {}", n * h * kk, rows.len()) });
        }
        let mut t = TraceTensor::zeros(metric, n, h, kk.saturating_sub(1));
        for (i, j, k, v) in rows {
            t.set(i, j, k, v);
        }
        Ok(t)
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(TRACE_MAGIC)?;
        w.write_all(&TRACE_VERSION.to_le_bytes())?;
        w.write_all(&[self.metric.code(), 0, 0, 0])?;
        w.write_all(&(self.n as u64).to_le_bytes())?;
        w.write_all(&(self.h as u64).to_le_bytes())?;
        w.write_all(&(self.k_max as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let err = |offset: usize, msg: &str| Error::Parse { offset, msg: msg.into() };
        if buf.len() < 36 {
            return Err(err(buf.len(), "truncated trace header"));
        }
        if &buf[0..4] != TRACE_MAGIC {
            return Err(err(0, "bad trace magic"));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != TRACE_VERSION {
            return Err(err(4, "unsupported trace version"));
        }
        let metric = MetricId::from_code(buf[8]).ok_or_else(|| err(8, "unknown metric code"))?;
        let rd = |o: usize| u64::from_le_bytes(buf[o..o + 8].try_into().unwrap()) as usize;
        let (n, h, k_max) = (rd(12), rd(20), rd(28));
        let count = n
            .checked_mul(h)
            .and_then(|v| v.checked_mul(k_max + 1))
            .ok_or_else(|| err(12, "trace dimensions overflow"))?;
        let need = 36 + count * 8;
        if buf.len() != need {
            return Err(err(buf.len().min(need), "payload length does not match header"));
        }
        let values = buf[36..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(TraceTensor { metric, n, h, k_max, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        if path.extension().is_some_and(|e| e == "bin") {
            self.write_binary(f)
        } else {
            self.write_csv(f)
        }
    }
}

/// Metric of an iterate. `tz` is T(z, x), needed only for the residual.
pub fn metric_value(metric: MetricId, z: &[f64], tz: &[f64], z_true: Option<&[f64]>) -> Result<f64> {
    match metric {
        MetricId::FpResidual => Ok(dist2(tz, z).sqrt()),
        MetricId::Mse => {
            let t = z_true.ok_or_else(|| Error::Precondition("mse needs a ground truth".into()))?;
            Ok(dist2(z, t))
        }
        MetricId::Nmse => {
            let t = z_true.ok_or_else(|| Error::Precondition("nmse needs a ground truth".into()))?;
            nmse_db(z, t)
        }
    }
}

/// 10 log10(||z - t||^2 / ||t||^2), floored at -320 dB.
pub fn nmse_db(z: &[f64], t: &[f64]) -> Result<f64> {
    let den = norm2(t).powi(2);
    if den == 0.0 {
        return Err(Error::Domain("nmse undefined for a zero ground truth".into()));
    }
    let num = dist2(z, t);
    if num == 0.0 {
        return Ok(NMSE_FLOOR_DB);
    }
    Ok((10.0 * (num / den).log10()).max(NMSE_FLOOR_DB))
}

/// Metric of iterate z for operator `op` at parameter x.
pub fn evaluate_metric(
    metric: MetricId,
    z: &[f64],
    x: &[f64],
    op: &dyn FixedPointOperator,
    z_true: Option<&[f64]>,
) -> Result<f64> {
    match metric {
        MetricId::FpResidual => {
            let mut tz = vec![0.0; op.dim()];
            op.apply(z, x, &mut tz);
            metric_value(metric, z, &tz, None)
        }
        _ => metric_value(metric, &op.extract(z, x), &[], z_true),
    }
}

/// Runs k_max steps from z0 and returns the metric at every k in 0..=k_max.
pub fn run_single(
    op: &dyn FixedPointOperator,
    inst: &Instance,
    z0: Vec<f64>,
    k_max: usize,
    metric: MetricId,
    policy: NonFinitePolicy,
) -> Result<Vec<f64>> {
    let n = op.dim();
    if z0.len() != n {
        return Err(Error::Precondition(format!("initial point has length {}, operator dim {n}", z0.len())));
    }
    let mut out = Vec::with_capacity(k_max + 1);
    let mut z = z0;
    let mut tz = vec![0.0; n];
    let truth = inst.truth.as_deref();
    for k in 0..=k_max {
        op.apply(&z, &inst.x, &mut tz);
        let v = if z.iter().all(|v| v.is_finite()) {
            match metric {
                MetricId::FpResidual => metric_value(metric, &z, &tz, None)?,
                _ => metric_value(metric, &op.extract(&z, &inst.x), &tz, truth)?,
            }
        } else {
            f64::NAN
        };
        if !v.is_finite() {
            match policy {
                NonFinitePolicy::Abort => {
                    return Err(Error::NonFinite(format!("metric at iteration {k} is {v}")));
                }
                NonFinitePolicy::CountAsFailure => {
                    out.resize(k_max + 1, f64::INFINITY);
                    return Ok(out);
                }
            }
        }
        out.push(v);
        std::mem::swap(&mut z, &mut tz);
    }
    Ok(out)
}

/// Runs every instance (in parallel) and assembles the trace with H = 1.
pub fn run_trace(
    op: &dyn FixedPointOperator,
    instances: &[Instance],
    init: Initialization<'_>,
    k_max: usize,
    metric: MetricId,
    policy: NonFinitePolicy,
) -> Result<TraceTensor> {
    if k_max < 1 {
        return Err(Error::Precondition("k_max must be at least 1".into()));
    }
    let rows: Vec<Vec<f64>> = instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            run_single(op, inst, init.z0(op.dim(), &inst.x), k_max, metric, policy).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("instance {i}: {m}")),
                other => other,
            })
        })
        .collect::<Result<_>>()?;
    let mut t = TraceTensor::zeros(metric, instances.len(), 1, k_max);
    for (i, row) in rows.into_iter().enumerate() {
        let s = t.idx(i, 0, 0);
        t.values[s..s + k_max + 1].copy_from_slice(&row);
    }
    Ok(t)
}

/// Fraction of (instance, weight sample) pairs with value >= epsilon at step k.
pub fn empirical_risk(trace: &TraceTensor, k: usize, epsilon: f64) -> f64 {
    let total = trace.n * trace.h;
    if total == 0 {
        return 0.0;
    }
    let fails = (0..total).filter(|&r| trace.values[r * (trace.k_max + 1) + k] >= epsilon).count();
    fails as f64 / total as f64
}

/// Failure counts at every tolerance for one iteration, using one sort.
pub fn failure_counts(values: &mut [f64], tolerances: &[f64]) -> Vec<usize> {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    tolerances.iter().map(|&e| n - values.partition_point(|&v| v < e)).collect()
}

/// Optional probability-one override from the operator's worst-case rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorstCaseSpec {
    pub class: OperatorClass,
    /// Almost-sure upper bound on ||z^0 - z*||.
    pub dist_upper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Certification {
    pub certificates: Vec<Certificate>,
    pub quantiles: Vec<QuantileBound>,
    pub risk_ledger: ConfidenceLedger,
    pub quantile_ledger: ConfidenceLedger,
}

/// Sample convergence certificates for every (k, epsilon) and quantile bounds per (k, q).
pub fn certify_classical(
    trace: &TraceTensor,
    tolerances: &[f64],
    delta: f64,
    quantiles: &[f64],
    worst_case: Option<WorstCaseSpec>,
) -> Result<Certification> {
    if trace.h != 1 {
        return Err(Error::Precondition(format!("classical certification needs H = 1, got {}", trace.h)));
    }
    if tolerances.is_empty() {
        return Err(Error::Precondition("empty tolerance grid".into()));
    }
    let mut risk_ledger = ConfidenceLedger::new();
    risk_ledger.push("delta (sample convergence, per statement)", delta);
    let mut quantile_ledger = ConfidenceLedger::new();
    quantile_ledger.push(format!("delta (sample convergence) x {} tolerances", tolerances.len()), delta * tolerances.len() as f64);
    let risk_conf = risk_ledger.confidence()?;
    let quant_conf = quantile_ledger.confidence()?;
    let n = trace.n;
    let mut certificates = Vec::with_capacity((trace.k_max + 1) * tolerances.len());
    let mut qrows = Vec::new();
    for k in 0..=trace.k_max {
        let mut col = trace.column(k);
        let fails = failure_counts(&mut col, tolerances);
        let wc_ratio = match worst_case {
            Some(w) => Some((w.class.rate(k)?, w.dist_upper)),
            None => None,
        };
        let mut bounds = Vec::with_capacity(tolerances.len());
        for (&eps, &f) in tolerances.iter().zip(&fails) {
            let r_hat = f as f64 / n as f64;
            let mut bound = sample_convergence_bound(r_hat, n, delta)?;
            let mut method = Method::SampleConvergence;
            if let Some((ratio, dist)) = wc_ratio {
                bound = combine_with_worst_case(bound, ratio, dist, eps);
                method = Method::Combined;
            }
            bounds.push(bound);
            certificates.push(Certificate {
                method,
                metric: trace.metric,
                k,
                epsilon: eps,
                n_samples: n,
                h_samples: 1,
                empirical: r_hat,
                r_bar: r_hat,
                bound,
                confidence: risk_conf,
            });
        }
        for &q in quantiles {
            qrows.push(QuantileBound {
                metric: trace.metric,
                k,
                quantile: q,
                epsilon_bound: quantile_from_grid(tolerances, &bounds, q)?,
                confidence: quant_conf,
            });
        }
    }
    Ok(Certification { certificates, quantiles: qrows, risk_ledger, quantile_ledger })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Half;
    impl FixedPointOperator for Half {
        fn dim(&self) -> usize {
            1
        }
        fn apply(&self, z: &[f64], _x: &[f64], out: &mut [f64]) {
            out[0] = 0.5 * z[0];
        }
    }

    struct Ident;
    impl FixedPointOperator for Ident {
        fn dim(&self) -> usize {
            2
        }
        fn apply(&self, z: &[f64], _x: &[f64], out: &mut [f64]) {
            out.copy_from_slice(z);
        }
    }

    struct One;
    impl WarmStart for One {
        fn init(&self, _x: &[f64]) -> Vec<f64> {
            vec![1.0]
        }
    }

    #[test]
    fn identity_has_zero_residual() {
        let inst = vec![Instance { x: vec![0.0], truth: None }; 3];
        let t = run_trace(&Ident, &inst, Initialization::Zero, 5, MetricId::FpResidual, NonFinitePolicy::Abort).unwrap();
        assert!(t.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_contraction_halves() {
        let inst = vec![Instance { x: vec![], truth: None }];
        let t = run_trace(&Half, &inst, Initialization::WarmStart(&One), 6, MetricId::FpResidual, NonFinitePolicy::Abort).unwrap();
        for k in 0..=6 {
            assert_eq!(t.get(0, 0, k), 0.5f64.powi(k as i32 + 1));
        }
    }

    #[test]
    fn nmse_conventions() {
        assert_eq!(nmse_db(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), NMSE_FLOOR_DB);
        assert!(nmse_db(&[0.0, 0.0], &[1.0, 0.0]).unwrap().abs() < 1e-12);
        assert!(nmse_db(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn grids() {
        let g = MetricId::FpResidual.default_grid().values();
        assert_eq!(g.len(), 81);
        assert!((g[0] - 1e-6).abs() < 1e-18 && (g[80] - 1e2).abs() < 1e-10);
        assert!((g[10] - 1e-5).abs() < 1e-15);
        let l = MetricId::Nmse.default_grid().values();
        assert_eq!(l[0], -80.0);
        assert_eq!(l[80], 0.0);
        assert_eq!(l[1], -79.0);
    }

    #[test]
    fn failure_counts_match_loop() {
        let vals = vec![0.3, 0.1, 0.5, 0.5, 2.0];
        let tol = [0.0, 0.1, 0.4, 0.5, 1.0, 3.0];
        let mut v = vals.clone();
        let c = failure_counts(&mut v, &tol);
        let naive: Vec<usize> = tol.iter().map(|&e| vals.iter().filter(|&&x| x >= e).count()).collect();
        assert_eq!(c, naive);
    }

    #[test]
    fn binary_roundtrip_and_errors() {
        let mut t = TraceTensor::zeros(MetricId::Mse, 2, 3, 4);
        for (i, v) in t.values.iter_mut().enumerate() {
            *v = i as f64 * 0.25;
        }
        let mut buf = Vec::new();
        t.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 36 + 2 * 3 * 5 * 8);
        assert_eq!(TraceTensor::read_binary(&buf[..]).unwrap(), t);
        assert!(TraceTensor::read_binary(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(TraceTensor::read_binary(&bad[..]).is_err());
    }
}
