//! Learned optimizers (LISTA family, L2WS), stochastic weights and the L2WS
//! warm-start distance bound.

mod datafree;
mod l2ws;
mod lista;

pub use datafree::datafree_w;
pub use l2ws::{l2ws_distance_bound, l2ws_forward, L2ws};
pub use lista::{alista_forward, lista_forward, tilista_forward, Alista, Lista, Tilista};

use serde::{Deserialize, Serialize};

use crate::bounds::PriorGridSpec;
use crate::error::{Error, Result};
use crate::kl::{GroupedGaussianSpec, Partition};
use crate::problems::Instance;
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchId {
    Alista,
    Tilista,
    Lista,
    L2ws,
}

impl ArchId {
    pub fn as_str(&self) -> &'static str {
        match self {
            ArchId::Alista => "alista",
            ArchId::Tilista => "tilista",
            ArchId::Lista => "lista",
            ArchId::L2ws => "l2ws",
        }
    }
}

/// Training loss l_theta(x).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossId {
    /// ||z^K - z*||^2
    Regression,
    /// ||T(z^K) - z^K|| for the downstream operator
    FpResidual,
}

/// A named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightView {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Flat parameter layout with named views and the prior group partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightLayout {
    pub n_params: usize,
    pub views: Vec<WeightView>,
    pub partition: Partition,
}

impl WeightLayout {
    pub fn view<'a>(&self, theta: &'a [f64], name: &str) -> Option<&'a [f64]> {
        self.views.iter().find(|v| v.name == name).map(|v| &theta[v.offset..v.offset + v.len])
    }

    /// Views tile 0..n_params and the partition covers it.
    pub fn validate(&self) -> Result<()> {
        let mut covered = vec![false; self.n_params];
        for v in &self.views {
            for c in covered.iter_mut().skip(v.offset).take(v.len) {
                if *c {
                    return Err(Error::Domain(format!("view {} overlaps another view", v.name)));
                }
                *c = true;
            }
        }
        if covered.iter().any(|c| !c) || self.views.iter().any(|v| v.offset + v.len > self.n_params) {
            return Err(Error::Domain("views do not tile the parameter vector".into()));
        }
        if self.partition.n_weights() != self.n_params {
            return Err(Error::Domain("partition size differs from parameter count".into()));
        }
        self.partition.group_of().map(|_| ())
    }
}

/// A learned optimizer with K trainable steps (or a learned initialization).
pub trait LearnedOptimizer: Sync {
    fn arch(&self) -> ArchId;
    fn layout(&self) -> &WeightLayout;
    fn prior_mean(&self) -> Vec<f64>;
    /// Dimension of the iterates.
    fn dim(&self) -> usize;
    /// Number of trained steps K.
    fn k_train(&self) -> usize;

    /// Starting posterior mean for training; the prior mean unless that is
    /// a stationary point of the loss.
    fn init_mean(&self, _rng: &mut Stream) -> Vec<f64> {
        self.prior_mean()
    }

    /// Calls `visit(k, z^k)` for k = 0..=k_max. Steps beyond the trained
    /// horizon reuse the last trained step (LISTA family) or continue the
    /// downstream operator (L2WS).
    fn rollout(&self, theta: &[f64], x: &[f64], k_max: usize, visit: &mut dyn FnMut(usize, &[f64]));

    /// Returns l_theta(x) after `k_train` steps and adds
    /// `scale(l) * d l / d theta` to `grad`.
    fn loss_grad(
        &self,
        theta: &[f64],
        inst: &Instance,
        loss: LossId,
        grad: &mut [f64],
        scale: &dyn Fn(f64) -> f64,
    ) -> Result<f64>;

    /// l_theta(x) without gradients.
    fn loss(&self, theta: &[f64], inst: &Instance, loss: LossId) -> Result<f64>;

    fn n_params(&self) -> usize {
        self.layout().n_params
    }

    /// Final iterate z^k.
    fn solve(&self, theta: &[f64], x: &[f64], k: usize) -> Vec<f64> {
        let mut last = Vec::new();
        self.rollout(theta, x, k, &mut |kk, z| {
            if kk == k {
                last = z.to_vec();
            }
        });
        last
    }
}

/// Gaussian posterior N(w, diag s) with prior N(w0, diag lambda per group).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSpec {
    pub w: Vec<f64>,
    pub s: Vec<f64>,
    pub w0: Vec<f64>,
    pub partition: Partition,
    pub lambda: Vec<f64>,
    pub grid: PriorGridSpec,
}

impl PosteriorSpec {
    pub fn grouped(&self) -> GroupedGaussianSpec {
        GroupedGaussianSpec {
            w: self.w.clone(),
            s: self.s.clone(),
            w0: self.w0.clone(),
            partition: self.partition.clone(),
            lambda: self.lambda.clone(),
        }
    }

    /// Posterior with zero variance is not a valid Gaussian; this is the
    /// "mean weights only" limit used for deterministic comparisons.
    pub fn deterministic(&self) -> bool {
        self.s.iter().all(|&v| v == 0.0)
    }
}

/// w + xi * sqrt(s) with xi standard normal.
pub fn sample_weights(posterior: &PosteriorSpec, rng: &mut Stream) -> Vec<f64> {
    posterior.w.iter().zip(&posterior.s).map(|(w, s)| w + rng.normal() * s.sqrt()).collect()
}

/// Serialized trained weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsRecord {
    pub arch: ArchId,
    /// Architecture dimensions: (m, n) for the LISTA family, layer widths for L2WS.
    pub dims: Vec<usize>,
    pub k: usize,
    pub w: Vec<f64>,
    pub s: Vec<f64>,
    pub w0: Vec<f64>,
    pub lambda: Vec<f64>,
    pub partition: Partition,
    pub grid: PriorGridSpec,
}

impl WeightsRecord {
    pub fn posterior(&self) -> PosteriorSpec {
        PosteriorSpec {
            w: self.w.clone(),
            s: self.s.clone(),
            w0: self.w0.clone(),
            partition: self.partition.clone(),
            lambda: self.lambda.clone(),
            grid: self.grid,
        }
    }
}

/// d eta_psi(v) / dv and d eta_psi(v) / d psi; both 0 at the kink |v| = psi.
#[inline]
pub(crate) fn soft_threshold_grads(v: f64, psi: f64) -> (f64, f64) {
    if v.abs() > psi {
        (1.0, if v >= 0.0 { -1.0 } else { 1.0 })
    } else {
        (0.0, 0.0)
    }
}
