//! Classical optimizers as fixed-point operators, the FISTA runner and
//! nearest-neighbor warm starts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixed_point::{
    metric_value, FixedPointOperator, Initialization, MetricId, NonFinitePolicy, OperatorClass, TraceTensor, WarmStart,
};
use crate::linalg::{dist2, Mat};
use crate::problems::Instance;

/// Soft threshold eta_psi(v) = sign(v) max(0, |v| - psi).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftThreshold {
    pub psi: f64,
}

impl SoftThreshold {
    pub fn new(psi: f64) -> Result<Self> {
        if !(psi >= 0.0) {
            return Err(Error::Domain(format!("threshold must be nonnegative, got {psi}")));
        }
        Ok(SoftThreshold { psi })
    }

    pub fn apply(&self, v: f64) -> f64 {
        soft_threshold(v, self.psi)
    }
}

#[inline]
pub fn soft_threshold(v: f64, psi: f64) -> f64 {
    let a = v.abs() - psi;
    if a > 0.0 {
        if v >= 0.0 {
            a
        } else {
            -a
        }
    } else {
        0.0
    }
}

/// T(z, x) = x + beta (z - x): a beta-contraction with fixed point x.
#[derive(Debug, Clone)]
pub struct ToyContraction {
    pub dim: usize,
    pub beta: f64,
}

impl FixedPointOperator for ToyContraction {
    fn dim(&self) -> usize {
        self.dim
    }
    fn apply(&self, z: &[f64], x: &[f64], out: &mut [f64]) {
        for ((o, zi), xi) in out.iter_mut().zip(z).zip(x) {
            *o = xi + self.beta * (zi - xi);
        }
    }
    fn class(&self) -> Option<OperatorClass> {
        Some(OperatorClass::Contractive { beta: self.beta })
    }
}

/// Gradient descent T(z, c) = z - gamma (P z + c).
#[derive(Debug, Clone)]
pub struct GdOperator {
    pub p: Mat,
    pub gamma: f64,
    pub beta: f64,
}

pub fn gd_operator(p: &Mat, gamma: f64) -> Result<GdOperator> {
    if p.rows != p.cols {
        return Err(Error::Domain("P must be square".into()));
    }
    let ev = p.symmetric_eigenvalues();
    let (lmin, lmax) = (ev[0], *ev.last().unwrap());
    if !(lmin > 0.0) {
        return Err(Error::Domain(format!("P must be positive definite (min eigenvalue {lmin})")));
    }
    if !(gamma > 0.0 && gamma < 2.0 / lmax) {
        return Err(Error::Domain(format!("step {gamma} outside (0, 2/{lmax})")));
    }
    let beta = ev.iter().map(|l| (1.0 - gamma * l).abs()).fold(0.0, f64::max);
    Ok(GdOperator { p: p.clone(), gamma, beta })
}

/// The step 2/(mu + L) from the extreme eigenvalues of P.
pub fn optimal_gd_step(p: &Mat) -> f64 {
    let ev = p.symmetric_eigenvalues();
    2.0 / (ev[0] + ev[ev.len() - 1])
}

impl FixedPointOperator for GdOperator {
    fn dim(&self) -> usize {
        self.p.rows
    }
    fn apply(&self, z: &[f64], c: &[f64], out: &mut [f64]) {
        self.p.matvec(z, out);
        for ((o, zi), ci) in out.iter_mut().zip(z).zip(c) {
            *o = zi - self.gamma * (*o + ci);
        }
    }
    fn class(&self) -> Option<OperatorClass> {
        Some(OperatorClass::LinearlyConvergent { beta: self.beta })
    }
}

/// Arithmetic used by [`IstaOperator`]; both forms compute the same map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IstaForm {
    /// z - (1/L) D^T (D z - b)
    #[default]
    Gradient,
    /// (I - D^T D / L) z + (D^T / L) b
    Affine,
}

/// ISTA T(z, b) = eta_{rho/L}(z - (1/L) D^T (D z - b)).
#[derive(Debug, Clone)]
pub struct IstaOperator {
    pub d: Mat,
    pub rho: f64,
    pub l: f64,
    pub form: IstaForm,
    w1: Mat,
    w2: Mat,
}

pub fn ista_operator(d: &Mat, rho: f64, l: f64) -> Result<IstaOperator> {
    ista_operator_with_form(d, rho, l, IstaForm::Gradient)
}

pub fn ista_operator_with_form(d: &Mat, rho: f64, l: f64, form: IstaForm) -> Result<IstaOperator> {
    if !(l > 0.0) || !(rho >= 0.0) {
        return Err(Error::Domain(format!("ISTA needs L > 0 and rho >= 0, got L={l}, rho={rho}")));
    }
    let (w1, w2) = match form {
        IstaForm::Gradient => (Mat::zeros(0, 0), Mat::zeros(0, 0)),
        IstaForm::Affine => ista_affine_weights(d, l),
    };
    Ok(IstaOperator { d: d.clone(), rho, l, form, w1, w2 })
}

/// (I - D^T D / L, D^T / L), the ISTA map written as an affine step.
pub fn ista_affine_weights(d: &Mat, l: f64) -> (Mat, Mat) {
    let n = d.cols;
    let inv_l = 1.0 / l;
    let g = d.gram();
    let w1 = Mat::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } - g.get(i, j) * inv_l);
    let w2 = Mat::from_fn(n, d.rows, |i, j| d.get(j, i) * inv_l);
    (w1, w2)
}

impl IstaOperator {
    pub fn threshold(&self) -> f64 {
        self.rho / self.l
    }

    pub fn step(&self) -> f64 {
        1.0 / self.l
    }

    /// Lasso objective (1/2)||Dz - b||^2 + rho ||z||_1.
    pub fn objective(&self, z: &[f64], b: &[f64]) -> f64 {
        let mut r = vec![0.0; self.d.rows];
        self.d.matvec(z, &mut r);
        let ls: f64 = r.iter().zip(b).map(|(ri, bi)| (ri - bi).powi(2)).sum::<f64>() * 0.5;
        ls + self.rho * z.iter().map(|v| v.abs()).sum::<f64>()
    }
}

impl FixedPointOperator for IstaOperator {
    fn dim(&self) -> usize {
        self.d.cols
    }
    fn apply(&self, z: &[f64], b: &[f64], out: &mut [f64]) {
        let psi = self.threshold();
        match self.form {
            IstaForm::Gradient => {
                let mut r = vec![0.0; self.d.rows];
                self.d.matvec(z, &mut r);
                for (ri, bi) in r.iter_mut().zip(b) {
                    *ri -= bi;
                }
                self.d.matvec_t(&r, out);
                let step = self.step();
                for (o, zi) in out.iter_mut().zip(z) {
                    *o = soft_threshold(zi - step * *o, psi);
                }
            }
            IstaForm::Affine => {
                let mut t = vec![0.0; self.w2.rows];
                self.w1.matvec(z, out);
                self.w2.matvec(b, &mut t);
                for (o, ti) in out.iter_mut().zip(&t) {
                    *o = soft_threshold(*o + ti, psi);
                }
            }
        }
    }
    fn class(&self) -> Option<OperatorClass> {
        // proximal gradient with step 1/L is 2/3-averaged
        Some(OperatorClass::Averaged { alpha: 2.0 / 3.0 })
    }
}

/// FISTA iterates z^0..z^{k_max}; with `momentum = false` every t_k is 1 and
/// the iterates are exactly those of ISTA.
pub fn fista_run(op: &IstaOperator, b: &[f64], z0: &[f64], k_max: usize, momentum: bool) -> Vec<Vec<f64>> {
    let n = op.dim();
    let mut out = Vec::with_capacity(k_max + 1);
    let mut z = z0.to_vec();
    let mut y = z.clone();
    let mut t = 1.0f64;
    let mut next = vec![0.0; n];
    out.push(z.clone());
    for _ in 0..k_max {
        op.apply(&y, b, &mut next);
        if momentum {
            let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            let coef = (t - 1.0) / t_next;
            for i in 0..n {
                y[i] = next[i] + coef * (next[i] - z[i]);
            }
            t = t_next;
        } else {
            y.copy_from_slice(&next);
        }
        std::mem::swap(&mut z, &mut next);
        out.push(z.clone());
    }
    out
}

/// Trace of FISTA with metrics evaluated at the primal iterates; the residual
/// is that of the underlying ISTA operator.
pub fn fista_trace(
    op: &IstaOperator,
    instances: &[Instance],
    init: Initialization<'_>,
    k_max: usize,
    metric: MetricId,
    policy: NonFinitePolicy,
) -> Result<TraceTensor> {
    let rows: Vec<Vec<f64>> = instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let iters = fista_run(op, &inst.x, &init.z0(op.dim(), &inst.x), k_max, true);
            let mut tz = vec![0.0; op.dim()];
            let mut row = Vec::with_capacity(k_max + 1);
            for (k, z) in iters.iter().enumerate() {
                op.apply(z, &inst.x, &mut tz);
                let v = if z.iter().all(|v| v.is_finite()) {
                    metric_value(metric, z, &tz, inst.truth.as_deref())?
                } else {
                    f64::NAN
                };
                if !v.is_finite() {
                    match policy {
                        NonFinitePolicy::Abort => {
                            return Err(Error::NonFinite(format!("instance {i}: metric at iteration {k} is {v}")))
                        }
                        NonFinitePolicy::CountAsFailure => {
                            row.resize(k_max + 1, f64::INFINITY);
                            break;
                        }
                    }
                }
                row.push(v);
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let mut t = TraceTensor::zeros(metric, instances.len(), 1, k_max);
    for (i, row) in rows.iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            t.set(i, 0, k, v);
        }
    }
    Ok(t)
}

/// Douglas-Rachford on min (1/2) u'Pu + q'u s.t. l <= u <= h, with
/// u1 = (P+I)^{-1}(z - q), u2 = clip(2 u1 - z), z+ = z + u2 - u1.
///
/// The parameter x maps to q either directly or through q = M x + q0.
#[derive(Debug, Clone)]
pub struct DrBoxQp {
    pub n: usize,
    pub p: Mat,
    inv: Mat,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub q_map: Option<(Mat, Vec<f64>)>,
}

pub fn dr_boxqp_operator(p: &Mat, lower: Vec<f64>, upper: Vec<f64>, q_map: Option<(Mat, Vec<f64>)>) -> Result<DrBoxQp> {
    let n = p.rows;
    if p.cols != n || lower.len() != n || upper.len() != n {
        return Err(Error::Domain("box-QP dimensions are inconsistent".into()));
    }
    if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
        return Err(Error::Domain("box lower bound exceeds upper bound".into()));
    }
    if let Some((m, q0)) = &q_map {
        if m.rows != n || q0.len() != n {
            return Err(Error::Domain("q map has the wrong shape".into()));
        }
    }
    let mut pi = p.clone();
    for i in 0..n {
        pi.data[i * n + i] += 1.0;
    }
    let inv = pi.spd_inverse()?;
    Ok(DrBoxQp { n, p: p.clone(), inv, lower, upper, q_map })
}

impl DrBoxQp {
    pub fn linear_term(&self, x: &[f64]) -> Vec<f64> {
        match &self.q_map {
            None => x.to_vec(),
            Some((m, q0)) => {
                let mut q = vec![0.0; self.n];
                m.matvec(x, &mut q);
                for (qi, c) in q.iter_mut().zip(q0) {
                    *qi += c;
                }
                q
            }
        }
    }

    pub fn param_dim(&self) -> usize {
        match &self.q_map {
            None => self.n,
            Some((m, _)) => m.cols,
        }
    }

    /// (u1, u2) for iterate z and linear term q.
    pub fn split(&self, z: &[f64], q: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let diff: Vec<f64> = z.iter().zip(q).map(|(a, b)| a - b).collect();
        let mut u1 = vec![0.0; self.n];
        self.inv.matvec(&diff, &mut u1);
        let u2 = (0..self.n).map(|i| (2.0 * u1[i] - z[i]).clamp(self.lower[i], self.upper[i])).collect();
        (u1, u2)
    }

    /// Runs from z = 0 until ||T(z) - z|| <= tol; returns the extracted solution.
    pub fn solve(&self, x: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
        let q = self.linear_term(x);
        let mut z = vec![0.0; self.n];
        for _ in 0..max_iter {
            let (u1, u2) = self.split(&z, &q);
            let mut res = 0.0;
            for i in 0..self.n {
                let d = u2[i] - u1[i];
                res += d * d;
                z[i] += d;
            }
            if !res.is_finite() {
                return Err(Error::NonFinite("Douglas-Rachford diverged".into()));
            }
            if res.sqrt() <= tol {
                return Ok(self.split(&z, &q).1);
            }
        }
        Err(Error::Precondition(format!("Douglas-Rachford did not reach residual {tol} in {max_iter} iterations")))
    }
}

impl FixedPointOperator for DrBoxQp {
    fn dim(&self) -> usize {
        self.n
    }
    fn apply(&self, z: &[f64], x: &[f64], out: &mut [f64]) {
        let q = self.linear_term(x);
        let (u1, u2) = self.split(z, &q);
        for i in 0..self.n {
            out[i] = z[i] + u2[i] - u1[i];
        }
    }
    fn class(&self) -> Option<OperatorClass> {
        Some(OperatorClass::Averaged { alpha: 0.5 })
    }
    fn extract(&self, z: &[f64], x: &[f64]) -> Vec<f64> {
        self.split(z, &self.linear_term(x)).1
    }
}

/// Warm start from the stored solution of the closest base parameter.
#[derive(Debug, Clone)]
pub struct NearestNeighbor {
    pub base: Vec<(Vec<f64>, Vec<f64>)>,
}

impl NearestNeighbor {
    pub fn new(base: Vec<(Vec<f64>, Vec<f64>)>) -> Result<Self> {
        if base.is_empty() {
            return Err(Error::Precondition("nearest-neighbor base set is empty".into()));
        }
        Ok(NearestNeighbor { base })
    }

    /// Index of the nearest base parameter, lowest index on ties.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, (xb, _)) in self.base.iter().enumerate() {
            let d = dist2(xb, x);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }
}

pub fn nn_warmstart(base: &NearestNeighbor, x: &[f64]) -> Vec<f64> {
    base.base[base.nearest(x)].1.clone()
}

impl WarmStart for NearestNeighbor {
    fn init(&self, x: &[f64]) -> Vec<f64> {
        nn_warmstart(self, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_threshold_cases() {
        assert!((soft_threshold(1.2, 0.5) - 0.7).abs() < 1e-15);
        assert_eq!(soft_threshold(-0.3, 0.5), 0.0);
        assert_eq!(soft_threshold(-2.0, 0.5), -1.5);
        assert!(SoftThreshold::new(-1.0).is_err());
    }

    #[test]
    fn gd_step_on_l2ws_qp() {
        let p = Mat::diag(&[100.0, 100.0, 1.0, 1.0]);
        let g = optimal_gd_step(&p);
        let op = gd_operator(&p, g).unwrap();
        assert!((op.beta - 99.0 / 101.0).abs() < 1e-12);
        let c = [1.0, -2.0, 3.0, 0.5];
        let mut out = [0.0; 4];
        op.apply(&[0.0; 4], &c, &mut out);
        for i in 0..4 {
            assert_eq!(out[i], -g * c[i]);
        }
        assert!(gd_operator(&p, 0.03).is_err());
    }

    #[test]
    fn ista_without_l1_is_gradient_descent() {
        let d = Mat::from_fn(3, 4, |i, j| ((i + 2 * j) as f64).cos());
        let op = ista_operator(&d, 0.0, 10.0).unwrap();
        let z = [0.1, -0.2, 0.3, 0.4];
        let b = [1.0, 0.0, -1.0];
        let mut out = [0.0; 4];
        op.apply(&z, &b, &mut out);
        let mut r = [0.0; 3];
        d.matvec(&z, &mut r);
        for i in 0..3 {
            r[i] -= b[i];
        }
        let mut g = [0.0; 4];
        d.matvec_t(&r, &mut g);
        for i in 0..4 {
            assert_eq!(out[i], z[i] - 0.1 * g[i]);
        }
    }

    #[test]
    fn nearest_neighbor_ties_prefer_lowest_index() {
        let nn = NearestNeighbor::new(vec![(vec![1.0], vec![10.0]), (vec![-1.0], vec![20.0]), (vec![1.0], vec![30.0])]).unwrap();
        assert_eq!(nn_warmstart(&nn, &[0.0]), vec![10.0]);
        assert_eq!(nn_warmstart(&nn, &[-0.9]), vec![20.0]);
        assert!(NearestNeighbor::new(vec![]).is_err());
    }
}
