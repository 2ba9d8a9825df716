//! LISTA, TiLISTA and ALISTA unrolled iterations with hand-written
//! reverse-mode gradients.

use super::{soft_threshold_grads, ArchId, LearnedOptimizer, LossId, WeightLayout, WeightView};
use crate::error::{Error, Result};
use crate::kl::Partition;
use crate::linalg::{gemv, gemv_t, ger, Mat};
use crate::problems::Instance;
use crate::rng::Stream;
use crate::solvers::{ista_affine_weights, soft_threshold};

/// Tied step z+ = eta_psi(z - gamma W~^T (D z - b)); fills r, g, v and returns z+ in `out`.
#[allow(clippy::too_many_arguments)]
#[inline]
fn tied_step(
    d: &Mat,
    wt: &[f64],
    psi: f64,
    gamma: f64,
    z: &[f64],
    b: &[f64],
    r: &mut [f64],
    g: &mut [f64],
    v: &mut [f64],
    out: &mut [f64],
) {
    d.matvec(z, r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri -= bi;
    }
    gemv_t(wt, d.cols, r, g);
    for i in 0..z.len() {
        v[i] = z[i] - gamma * g[i];
        out[i] = soft_threshold(v[i], psi);
    }
}

fn tied_rollout(
    d: &Mat,
    wt: &[f64],
    psi: &[f64],
    gamma: &[f64],
    b: &[f64],
    k_max: usize,
    visit: &mut dyn FnMut(usize, &[f64]),
) {
    let (m, n) = (d.rows, d.cols);
    let kk = psi.len();
    let mut z = vec![0.0; n];
    let mut next = vec![0.0; n];
    let (mut r, mut g, mut v) = (vec![0.0; m], vec![0.0; n], vec![0.0; n]);
    visit(0, &z);
    for k in 0..k_max {
        if kk > 0 {
            let l = k.min(kk - 1);
            tied_step(d, wt, psi[l], gamma[l], &z, b, &mut r, &mut g, &mut v, &mut next);
            std::mem::swap(&mut z, &mut next);
        }
        visit(k + 1, &z);
    }
}

struct TiedTape {
    z: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

fn tied_forward_tape(d: &Mat, wt: &[f64], psi: &[f64], gamma: &[f64], b: &[f64]) -> TiedTape {
    let (m, n) = (d.rows, d.cols);
    let kk = psi.len();
    let mut t = TiedTape {
        z: vec![vec![0.0; n]; kk + 1],
        r: vec![vec![0.0; m]; kk],
        g: vec![vec![0.0; n]; kk],
        v: vec![vec![0.0; n]; kk],
    };
    for k in 0..kk {
        let (head, tail) = t.z.split_at_mut(k + 1);
        tied_step(d, wt, psi[k], gamma[k], &head[k], b, &mut t.r[k], &mut t.g[k], &mut t.v[k], &mut tail[0]);
    }
    t
}

/// Backpropagates `a = dl/dz^K` through the tape. Gradients are added,
/// scaled by `scale`, into the psi, gamma and (optionally) W~ slices.
#[allow(clippy::too_many_arguments)]
fn tied_backward(
    d: &Mat,
    wt: &[f64],
    psi: &[f64],
    gamma: &[f64],
    tape: &TiedTape,
    mut a: Vec<f64>,
    scale: f64,
    dpsi: &mut [f64],
    dgamma: &mut [f64],
    mut dwt: Option<&mut [f64]>,
) {
    let (m, n) = (d.rows, d.cols);
    let mut av = vec![0.0; n];
    let mut t = vec![0.0; m];
    let mut u = vec![0.0; n];
    for k in (0..psi.len()).rev() {
        let mut gp = 0.0;
        for i in 0..n {
            let (dv, dp) = soft_threshold_grads(tape.v[k][i], psi[k]);
            av[i] = a[i] * dv;
            gp += a[i] * dp;
        }
        dpsi[k] += scale * gp;
        let gg: f64 = av.iter().zip(&tape.g[k]).map(|(x, y)| x * y).sum();
        dgamma[k] -= scale * gg;
        if let Some(dw) = dwt.as_deref_mut() {
            ger(-scale * gamma[k], &tape.r[k], &av, dw);
        }
        gemv(wt, n, &av, &mut t);
        d.matvec_t(&t, &mut u);
        for i in 0..n {
            a[i] = av[i] - gamma[k] * u[i];
        }
    }
}

/// Starting (psi, gamma): gamma = 1 / ||W~^T D||_2 and psi = 0.1 gamma.
fn tied_init(d: &Mat, wt: &Mat) -> (f64, f64) {
    let g = 1.0 / wt.transpose().mul(d).spectral_norm().max(f64::MIN_POSITIVE);
    (0.1 * g, g)
}

fn regression_seed(z: &[f64], inst: &Instance) -> Result<(f64, Vec<f64>)> {
    let truth = inst
        .truth
        .as_deref()
        .ok_or_else(|| Error::Precondition("regression loss needs a ground truth".into()))?;
    let mut l = 0.0;
    let a = z
        .iter()
        .zip(truth)
        .map(|(zi, ti)| {
            let e = zi - ti;
            l += e * e;
            2.0 * e
        })
        .collect();
    Ok((l, a))
}

fn only_regression(loss: LossId, arch: ArchId) -> Result<()> {
    if loss != LossId::Regression {
        return Err(Error::Precondition(format!("{} supports only the regression loss", arch.as_str())));
    }
    Ok(())
}

/// ALISTA: learned thresholds and steps with a fixed W~.
/// theta = [psi^0..psi^{K-1}, gamma^0..gamma^{K-1}].
#[derive(Debug, Clone)]
pub struct Alista {
    pub d: Mat,
    pub w_tilde: Mat,
    pub k: usize,
    layout: WeightLayout,
}

impl Alista {
    pub fn new(d: Mat, w_tilde: Mat, k: usize) -> Result<Self> {
        if w_tilde.rows != d.rows || w_tilde.cols != d.cols {
            return Err(Error::Domain("W~ must have the shape of D".into()));
        }
        let layout = WeightLayout {
            n_params: 2 * k,
            views: vec![
                WeightView { name: "psi".into(), offset: 0, len: k },
                WeightView { name: "gamma".into(), offset: k, len: k },
            ],
            partition: Partition::from_sizes(&[k, k]),
        };
        Ok(Alista { d, w_tilde, k, layout })
    }
}

pub fn alista_forward(theta: &[f64], d: &Mat, w_tilde: &Mat, b: &[f64], k: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(k + 1);
    tied_rollout(d, &w_tilde.data, &theta[..k], &theta[k..2 * k], b, k, &mut |_, z| out.push(z.to_vec()));
    out
}

impl LearnedOptimizer for Alista {
    fn arch(&self) -> ArchId {
        ArchId::Alista
    }
    fn layout(&self) -> &WeightLayout {
        &self.layout
    }
    fn prior_mean(&self) -> Vec<f64> {
        vec![0.0; 2 * self.k]
    }
    fn init_mean(&self, _rng: &mut Stream) -> Vec<f64> {
        let (psi, gamma) = tied_init(&self.d, &self.w_tilde);
        let mut w = vec![psi; self.k];
        w.extend(std::iter::repeat_n(gamma, self.k));
        w
    }
    fn dim(&self) -> usize {
        self.d.cols
    }
    fn k_train(&self) -> usize {
        self.k
    }
    fn rollout(&self, theta: &[f64], x: &[f64], k_max: usize, visit: &mut dyn FnMut(usize, &[f64])) {
        let k = self.k;
        tied_rollout(&self.d, &self.w_tilde.data, &theta[..k], &theta[k..2 * k], x, k_max, visit);
    }
    fn loss_grad(
        &self,
        theta: &[f64],
        inst: &Instance,
        loss: LossId,
        grad: &mut [f64],
        scale: &dyn Fn(f64) -> f64,
    ) -> Result<f64> {
        only_regression(loss, self.arch())?;
        let k = self.k;
        let (psi, gamma) = theta.split_at(k);
        let tape = tied_forward_tape(&self.d, &self.w_tilde.data, psi, gamma, &inst.x);
        let (l, a) = regression_seed(&tape.z[k], inst)?;
        let (dpsi, dgamma) = grad.split_at_mut(k);
        tied_backward(&self.d, &self.w_tilde.data, psi, gamma, &tape, a, scale(l), dpsi, dgamma, None);
        Ok(l)
    }
    fn loss(&self, theta: &[f64], inst: &Instance, loss: LossId) -> Result<f64> {
        only_regression(loss, self.arch())?;
        regression_seed(&self.solve(theta, &inst.x, self.k), inst).map(|(l, _)| l)
    }
}

/// TiLISTA: ALISTA with a learned W~.
/// theta = [W~ (m x n, row-major), psi^0..psi^{K-1}, gamma^0..gamma^{K-1}].
#[derive(Debug, Clone)]
pub struct Tilista {
    pub d: Mat,
    /// Prior mean for W~ (the data-free solution).
    pub w_prior: Mat,
    pub k: usize,
    layout: WeightLayout,
}

impl Tilista {
    pub fn new(d: Mat, w_prior: Mat, k: usize) -> Result<Self> {
        if w_prior.rows != d.rows || w_prior.cols != d.cols {
            return Err(Error::Domain("W~ prior must have the shape of D".into()));
        }
        let mn = d.rows * d.cols;
        let layout = WeightLayout {
            n_params: mn + 2 * k,
            views: vec![
                WeightView { name: "w_tilde".into(), offset: 0, len: mn },
                WeightView { name: "psi".into(), offset: mn, len: k },
                WeightView { name: "gamma".into(), offset: mn + k, len: k },
            ],
            partition: Partition::from_sizes(&[mn, k, k]),
        };
        Ok(Tilista { d, w_prior, k, layout })
    }

    fn split<'a>(&self, theta: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64]) {
        let mn = self.d.rows * self.d.cols;
        (&theta[..mn], &theta[mn..mn + self.k], &theta[mn + self.k..mn + 2 * self.k])
    }
}

pub fn tilista_forward(theta: &[f64], d: &Mat, b: &[f64], k: usize) -> Vec<Vec<f64>> {
    let mn = d.rows * d.cols;
    let mut out = Vec::with_capacity(k + 1);
    tied_rollout(d, &theta[..mn], &theta[mn..mn + k], &theta[mn + k..mn + 2 * k], b, k, &mut |_, z| {
        out.push(z.to_vec())
    });
    out
}

impl LearnedOptimizer for Tilista {
    fn arch(&self) -> ArchId {
        ArchId::Tilista
    }
    fn layout(&self) -> &WeightLayout {
        &self.layout
    }
    fn prior_mean(&self) -> Vec<f64> {
        let mut w = self.w_prior.data.clone();
        w.extend(std::iter::repeat_n(0.0, 2 * self.k));
        w
    }
    fn init_mean(&self, _rng: &mut Stream) -> Vec<f64> {
        let (psi, gamma) = tied_init(&self.d, &self.w_prior);
        let mut w = self.w_prior.data.clone();
        w.extend(std::iter::repeat_n(psi, self.k));
        w.extend(std::iter::repeat_n(gamma, self.k));
        w
    }
    fn dim(&self) -> usize {
        self.d.cols
    }
    fn k_train(&self) -> usize {
        self.k
    }
    fn rollout(&self, theta: &[f64], x: &[f64], k_max: usize, visit: &mut dyn FnMut(usize, &[f64])) {
        let (wt, psi, gamma) = self.split(theta);
        tied_rollout(&self.d, wt, psi, gamma, x, k_max, visit);
    }
    fn loss_grad(
        &self,
        theta: &[f64],
        inst: &Instance,
        loss: LossId,
        grad: &mut [f64],
        scale: &dyn Fn(f64) -> f64,
    ) -> Result<f64> {
        only_regression(loss, self.arch())?;
        let (wt, psi, gamma) = self.split(theta);
        let tape = tied_forward_tape(&self.d, wt, psi, gamma, &inst.x);
        let (l, a) = regression_seed(&tape.z[self.k], inst)?;
        let mn = self.d.rows * self.d.cols;
        let (dw, rest) = grad.split_at_mut(mn);
        let (dpsi, dgamma) = rest.split_at_mut(self.k);
        tied_backward(&self.d, wt, psi, gamma, &tape, a, scale(l), dpsi, dgamma, Some(dw));
        Ok(l)
    }
    fn loss(&self, theta: &[f64], inst: &Instance, loss: LossId) -> Result<f64> {
        only_regression(loss, self.arch())?;
        regression_seed(&self.solve(theta, &inst.x, self.k), inst).map(|(l, _)| l)
    }
}

/// LISTA: z+ = eta_{psi^k}(W1^k z + W2^k b).
/// theta = per step k: [psi^k, W1^k (n x n), W2^k (n x m)], row-major.
#[derive(Debug, Clone)]
pub struct Lista {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    prior: Vec<f64>,
    layout: WeightLayout,
}

impl Lista {
    /// Prior mean is ISTA with the given rho and L.
    pub fn new(d: &Mat, k: usize, rho: f64, l: f64) -> Self {
        let (m, n) = (d.rows, d.cols);
        let block = 1 + n * n + n * m;
        let mut views = Vec::with_capacity(3 * k);
        let mut groups = vec![Vec::new(), Vec::new(), Vec::new()];
        for kk in 0..k {
            let o = kk * block;
            views.push(WeightView { name: format!("psi{kk}"), offset: o, len: 1 });
            views.push(WeightView { name: format!("w1_{kk}"), offset: o + 1, len: n * n });
            views.push(WeightView { name: format!("w2_{kk}"), offset: o + 1 + n * n, len: n * m });
            groups[0].push(o);
            groups[1].extend(o + 1..o + 1 + n * n);
            groups[2].extend(o + 1 + n * n..o + block);
        }
        let layout = WeightLayout { n_params: k * block, views, partition: Partition { groups } };
        let (w1, w2) = ista_affine_weights(d, l);
        let mut prior = Vec::with_capacity(k * block);
        for _ in 0..k {
            prior.push(rho / l);
            prior.extend_from_slice(&w1.data);
            prior.extend_from_slice(&w2.data);
        }
        Lista { m, n, k, prior, layout }
    }

    fn block(&self) -> usize {
        1 + self.n * self.n + self.n * self.m
    }

    fn layer<'a>(&self, theta: &'a [f64], k: usize) -> (f64, &'a [f64], &'a [f64]) {
        lista_layer(theta, self.m, self.n, k)
    }
}

fn lista_layer(theta: &[f64], m: usize, n: usize, k: usize) -> (f64, &[f64], &[f64]) {
    let o = k * (1 + n * n + n * m);
    (theta[o], &theta[o + 1..o + 1 + n * n], &theta[o + 1 + n * n..o + 1 + n * n + n * m])
}

#[allow(clippy::too_many_arguments)]
fn lista_rollout(
    m: usize,
    n: usize,
    kk: usize,
    theta: &[f64],
    b: &[f64],
    k_max: usize,
    visit: &mut dyn FnMut(usize, &[f64]),
    mut tape: Option<&mut Vec<(Vec<f64>, Vec<f64>)>>,
) -> Vec<f64> {
    let mut z = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut t = vec![0.0; n];
    visit(0, &z);
    for k in 0..k_max {
        if kk > 0 {
            let (psi, w1, w2) = lista_layer(theta, m, n, k.min(kk - 1));
            gemv(w1, n, &z, &mut v);
            gemv(w2, m, b, &mut t);
            for i in 0..n {
                v[i] += t[i];
            }
            if let Some(tp) = tape.as_deref_mut() {
                tp.push((z.clone(), v.clone()));
            }
            for i in 0..n {
                z[i] = soft_threshold(v[i], psi);
            }
        }
        visit(k + 1, &z);
    }
    z
}

pub fn lista_forward(theta: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(k + 1);
    lista_rollout(m, n, k, theta, b, k, &mut |_, z| out.push(z.to_vec()), None);
    out
}

impl LearnedOptimizer for Lista {
    fn arch(&self) -> ArchId {
        ArchId::Lista
    }
    fn layout(&self) -> &WeightLayout {
        &self.layout
    }
    fn prior_mean(&self) -> Vec<f64> {
        self.prior.clone()
    }
    fn dim(&self) -> usize {
        self.n
    }
    fn k_train(&self) -> usize {
        self.k
    }
    fn rollout(&self, theta: &[f64], x: &[f64], k_max: usize, visit: &mut dyn FnMut(usize, &[f64])) {
        lista_rollout(self.m, self.n, self.k, theta, x, k_max, visit, None);
    }
    fn loss_grad(
        &self,
        theta: &[f64],
        inst: &Instance,
        loss: LossId,
        grad: &mut [f64],
        scale: &dyn Fn(f64) -> f64,
    ) -> Result<f64> {
        only_regression(loss, self.arch())?;
        let (n, m) = (self.n, self.m);
        let mut tape = Vec::with_capacity(self.k);
        let z = lista_rollout(self.m, self.n, self.k, theta, &inst.x, self.k, &mut |_, _| {}, Some(&mut tape));
        let (l, mut a) = regression_seed(&z, inst)?;
        let sc = scale(l);
        let block = self.block();
        let mut av = vec![0.0; n];
        let mut prev = vec![0.0; n];
        for k in (0..self.k).rev() {
            let (psi, w1, _) = self.layer(theta, k);
            let (zk, vk) = &tape[k];
            let mut gp = 0.0;
            for i in 0..n {
                let (dv, dp) = soft_threshold_grads(vk[i], psi);
                av[i] = a[i] * dv;
                gp += a[i] * dp;
            }
            let o = k * block;
            grad[o] += sc * gp;
            ger(sc, &av, zk, &mut grad[o + 1..o + 1 + n * n]);
            ger(sc, &av, &inst.x, &mut grad[o + 1 + n * n..o + 1 + n * n + n * m]);
            gemv_t(w1, n, &av, &mut prev);
            a.copy_from_slice(&prev);
        }
        Ok(l)
    }
    fn loss(&self, theta: &[f64], inst: &Instance, loss: LossId) -> Result<f64> {
        only_regression(loss, self.arch())?;
        regression_seed(&self.solve(theta, &inst.x, self.k), inst).map(|(l, _)| l)
    }
}
