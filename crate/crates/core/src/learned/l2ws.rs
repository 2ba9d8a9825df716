//! Learned warm starts: an MLP initialization followed by gradient descent.

use super::{ArchId, LearnedOptimizer, LossId, PosteriorSpec, WeightLayout, WeightView};
use crate::error::{Error, Result};
use crate::fixed_point::FixedPointOperator;
use crate::kl::Partition;
use crate::linalg::{gemv, gemv_t, ger, norm2, Mat};
use crate::problems::Instance;
use crate::rng::Stream;
use crate::solvers::GdOperator;

fn mlp_layout(dims: &[usize]) -> WeightLayout {
    let mut views = Vec::new();
    let mut sizes = Vec::new();
    let mut o = 0;
    for i in 0..dims.len() - 1 {
        let (inp, out) = (dims[i], dims[i + 1]);
        views.push(WeightView { name: format!("w{i}"), offset: o, len: out * inp });
        o += out * inp;
        views.push(WeightView { name: format!("b{i}"), offset: o, len: out });
        o += out;
        sizes.push(out * inp);
        sizes.push(out);
    }
    WeightLayout { n_params: o, views, partition: Partition::from_sizes(&sizes) }
}

/// Forward pass; `tape` receives (input, pre-activation) per layer.
fn mlp_forward(theta: &[f64], dims: &[usize], x: &[f64], mut tape: Option<&mut Vec<(Vec<f64>, Vec<f64>)>>) -> Vec<f64> {
    let layers = dims.len() - 1;
    let mut a = x.to_vec();
    let mut o = 0;
    for i in 0..layers {
        let (inp, out) = (dims[i], dims[i + 1]);
        let w = &theta[o..o + out * inp];
        let b = &theta[o + out * inp..o + out * inp + out];
        o += out * inp + out;
        let mut pre = vec![0.0; out];
        gemv(w, inp, &a, &mut pre);
        for (p, bi) in pre.iter_mut().zip(b) {
            *p += bi;
        }
        let next = if i + 1 < layers { pre.iter().map(|&v| v.max(0.0)).collect() } else { pre.clone() };
        if let Some(t) = tape.as_deref_mut() {
            t.push((a, pre));
        }
        a = next;
    }
    a
}

/// h_theta(x) for theta = (W_0, b_0, ..., W_{L-1}, b_{L-1}) with ReLU between layers.
pub fn l2ws_forward(theta: &[f64], x: &[f64], layer_dims: &[usize]) -> Result<Vec<f64>> {
    if layer_dims.len() < 2 {
        return Err(Error::Domain("an MLP needs at least input and output widths".into()));
    }
    let layout = mlp_layout(layer_dims);
    if theta.len() != layout.n_params {
        return Err(Error::Domain(format!("theta has length {}, layout needs {}", theta.len(), layout.n_params)));
    }
    if x.len() != layer_dims[0] {
        return Err(Error::Domain(format!("input has length {}, expected {}", x.len(), layer_dims[0])));
    }
    Ok(mlp_forward(theta, layer_dims, x, None))
}

/// Learned warm start for gradient descent on (1/2) z'Pz + c'z, x = c.
#[derive(Debug, Clone)]
pub struct L2ws {
    pub layer_dims: Vec<usize>,
    pub gd: GdOperator,
    pub k: usize,
    layout: WeightLayout,
}

impl L2ws {
    pub fn new(layer_dims: Vec<usize>, gd: GdOperator, k: usize) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::Domain("an MLP needs at least input and output widths".into()));
        }
        if *layer_dims.last().unwrap() != gd.dim() || layer_dims[0] != gd.dim() {
            return Err(Error::Domain("MLP input and output widths must match the QP dimension".into()));
        }
        let layout = mlp_layout(&layer_dims);
        Ok(L2ws { layer_dims, gd, k, layout })
    }

    pub fn n_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }
}

impl LearnedOptimizer for L2ws {
    fn arch(&self) -> ArchId {
        ArchId::L2ws
    }
    fn layout(&self) -> &WeightLayout {
        &self.layout
    }
    fn prior_mean(&self) -> Vec<f64> {
        vec![0.0; self.layout.n_params]
    }
    fn init_mean(&self, rng: &mut Stream) -> Vec<f64> {
        // He-scaled weights, zero biases
        let mut w = vec![0.0; self.layout.n_params];
        let mut o = 0;
        for i in 0..self.n_layers() {
            let (inp, out) = (self.layer_dims[i], self.layer_dims[i + 1]);
            let sd = (2.0 / inp as f64).sqrt();
            for v in &mut w[o..o + out * inp] {
                *v = sd * rng.normal();
            }
            o += out * inp + out;
        }
        w
    }
    fn dim(&self) -> usize {
        self.gd.dim()
    }
    fn k_train(&self) -> usize {
        self.k
    }
    fn rollout(&self, theta: &[f64], x: &[f64], k_max: usize, visit: &mut dyn FnMut(usize, &[f64])) {
        let mut z = mlp_forward(theta, &self.layer_dims, x, None);
        let mut next = vec![0.0; z.len()];
        visit(0, &z);
        for k in 0..k_max {
            self.gd.apply(&z, x, &mut next);
            std::mem::swap(&mut z, &mut next);
            visit(k + 1, &z);
        }
    }
    fn loss_grad(
        &self,
        theta: &[f64],
        inst: &Instance,
        loss: LossId,
        grad: &mut [f64],
        scale: &dyn Fn(f64) -> f64,
    ) -> Result<f64> {
        let n = self.dim();
        let mut tape = Vec::with_capacity(self.n_layers());
        let mut z = mlp_forward(theta, &self.layer_dims, &inst.x, Some(&mut tape));
        let mut next = vec![0.0; n];
        for _ in 0..self.k {
            self.gd.apply(&z, &inst.x, &mut next);
            std::mem::swap(&mut z, &mut next);
        }
        let (l, mut a) = self.loss_seed(&z, inst, loss)?;
        let sc = scale(l);
        let gamma = self.gd.gamma;
        let mut pa = vec![0.0; n];
        for _ in 0..self.k {
            self.gd.p.matvec_t(&a, &mut pa);
            for i in 0..n {
                a[i] -= gamma * pa[i];
            }
        }
        // back through the MLP
        let layers = self.n_layers();
        let mut offsets = Vec::with_capacity(layers);
        let mut o = 0;
        for i in 0..layers {
            offsets.push(o);
            o += self.layer_dims[i + 1] * self.layer_dims[i] + self.layer_dims[i + 1];
        }
        for i in (0..layers).rev() {
            let (inp, out) = (self.layer_dims[i], self.layer_dims[i + 1]);
            let (input, pre) = &tape[i];
            if i + 1 < layers {
                for (ai, &p) in a.iter_mut().zip(pre) {
                    if p <= 0.0 {
                        *ai = 0.0;
                    }
                }
            }
            let o = offsets[i];
            ger(sc, &a, input, &mut grad[o..o + out * inp]);
            for (g, ai) in grad[o + out * inp..o + out * inp + out].iter_mut().zip(&a) {
                *g += sc * ai;
            }
            let mut prev = vec![0.0; inp];
            gemv_t(&theta[o..o + out * inp], inp, &a, &mut prev);
            a = prev;
        }
        Ok(l)
    }
    fn loss(&self, theta: &[f64], inst: &Instance, loss: LossId) -> Result<f64> {
        let z = self.solve(theta, &inst.x, self.k);
        self.loss_seed(&z, inst, loss).map(|(l, _)| l)
    }
}

impl L2ws {
    /// Loss at z^K and its gradient with respect to z^K.
    fn loss_seed(&self, z: &[f64], inst: &Instance, loss: LossId) -> Result<(f64, Vec<f64>)> {
        match loss {
            LossId::Regression => {
                let t = inst
                    .truth
                    .as_deref()
                    .ok_or_else(|| Error::Precondition("regression loss needs a ground truth".into()))?;
                let e: Vec<f64> = z.iter().zip(t).map(|(a, b)| a - b).collect();
                Ok((e.iter().map(|v| v * v).sum(), e.iter().map(|v| 2.0 * v).collect()))
            }
            LossId::FpResidual => {
                let n = z.len();
                let mut tz = vec![0.0; n];
                self.gd.apply(z, &inst.x, &mut tz);
                let r: Vec<f64> = tz.iter().zip(z).map(|(a, b)| a - b).collect();
                let l = norm2(&r);
                if l == 0.0 {
                    return Ok((0.0, vec![0.0; n]));
                }
                // r = -gamma (P z + c), so dl/dz = -gamma P^T r / ||r||
                let mut a = vec![0.0; n];
                self.gd.p.matvec_t(&r, &mut a);
                a.iter_mut().for_each(|v| *v *= -self.gd.gamma / l);
                Ok((l, a))
            }
        }
    }
}

/// Bound z_bar + a*_L on dist(h_theta(x), fix T) holding with probability
/// at least 1 - delta over theta ~ N(w, diag s).
pub fn l2ws_distance_bound(posterior: &PosteriorSpec, layer_dims: &[usize], x_bar: f64, z_bar: f64, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta must be in (0,1), got {delta}")));
    }
    if layer_dims.len() < 2 {
        return Err(Error::Domain("an MLP needs at least input and output widths".into()));
    }
    let layout = mlp_layout(layer_dims);
    if posterior.w.len() != layout.n_params || posterior.s.len() != layout.n_params {
        return Err(Error::Domain("posterior does not match the layer dimensions".into()));
    }
    let layers = (layer_dims.len() - 1) as f64;
    let mut a = x_bar;
    let mut o = 0;
    for i in 0..layer_dims.len() - 1 {
        let (inp, out) = (layer_dims[i], layer_dims[i + 1]);
        let wmean = Mat { rows: out, cols: inp, data: posterior.w[o..o + out * inp].to_vec() };
        let bmean = &posterior.w[o + out * inp..o + out * inp + out];
        let wvar = &posterior.s[o..o + out * inp];
        let bvar = &posterior.s[o + out * inp..o + out * inp + out];
        // [sqrt(Sigma) | sqrt(sigma)] is out x (inp + 1); squared row and column sums
        let mut v2: f64 = 0.0;
        for r in 0..out {
            let row: f64 = wvar[r * inp..(r + 1) * inp].iter().sum::<f64>() + bvar[r];
            v2 = v2.max(row);
        }
        for c in 0..inp {
            let col: f64 = (0..out).map(|r| wvar[r * inp + c]).sum();
            v2 = v2.max(col);
        }
        v2 = v2.max(bvar.iter().sum());
        let tau = v2.sqrt() * (2.0 * (layers * (out + inp + 1) as f64 / delta).ln()).sqrt();
        a = (wmean.spectral_norm() + norm2(bmean) + tau) * (a + 1.0);
        o += out * inp + out;
    }
    Ok(z_bar + a)
}
