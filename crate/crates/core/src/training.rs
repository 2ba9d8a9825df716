//! Penalized PAC-Bayes training: kl_inverse(q, B) + mu (B - B_target)^2
//! minimized over the posterior mean, log-variances and log prior variances.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{regularizer_b, regularizer_b_relaxed, round_prior, PriorGridSpec};
use crate::error::{Error, Result};
use crate::kl::{gaussian_kl_grouped, kl_inverse, kl_inverse_grad_at, GroupedGaussianSpec, Partition};
use crate::learned::{LearnedOptimizer, LossId, PosteriorSpec};
use crate::problems::Instance;
use crate::rng::Stream;

/// Instances per gradient chunk; chunk sums are reduced in index order.
const CHUNK: usize = 64;
const ZETA_MIN: f64 = -20.0;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

pub const DEFAULT_BTARGETS: [f64; 6] = [0.01, 0.03, 0.05, 0.1, 0.2, 0.3];

fn default_mu() -> f64 {
    1e3
}
fn default_lr() -> f64 {
    1e-3
}
fn default_s0() -> f64 {
    1e-4
}
fn default_loss() -> LossId {
    LossId::Regression
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub b_target: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    pub epochs: usize,
    /// 0 means the full training set.
    #[serde(default)]
    pub batch_size: usize,
    #[serde(default)]
    pub grid: PriorGridSpec,
    pub delta: f64,
    pub k_train: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_loss")]
    pub loss: LossId,
    /// Initial posterior variance.
    #[serde(default = "default_s0")]
    pub s0: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Domain(format!("{name} must be positive and finite, got {v}")))
            }
        };
        pos("b_target", self.b_target)?;
        pos("mu", self.mu)?;
        pos("learning_rate", self.learning_rate)?;
        pos("s0", self.s0)?;
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Domain(format!("delta must be in (0,1), got {}", self.delta)));
        }
        if self.k_train == 0 {
            return Err(Error::Domain("k_train must be at least 1".into()));
        }
        self.grid.validate()
    }
}

/// Optimization variables: w, zeta = log s, nu = log lambda, plus Adam moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub w: Vec<f64>,
    pub zeta: Vec<f64>,
    pub nu: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub epoch: usize,
    pub step: u64,
}

impl TrainState {
    pub fn init(model: &dyn LearnedOptimizer, config: &TrainConfig, rng: &mut Stream) -> Self {
        let p = model.n_params();
        let j = model.layout().partition.n_groups();
        let g = config.grid;
        let nu0 = g.lambda_max.ln() - 1.0 / g.b;
        let dim = 2 * p + j;
        TrainState {
            w: model.init_mean(rng),
            zeta: vec![config.s0.ln(); p],
            nu: vec![nu0; j],
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            epoch: 0,
            step: 0,
        }
    }

    pub fn s(&self) -> Vec<f64> {
        self.zeta.iter().map(|z| z.exp()).collect()
    }

    pub fn lambda(&self) -> Vec<f64> {
        self.nu.iter().map(|v| v.exp()).collect()
    }

    /// w' = w + xi * sqrt(s).
    pub fn perturbed(&self, xi: &[f64]) -> Vec<f64> {
        self.w.iter().zip(&self.zeta).zip(xi).map(|((w, z), x)| w + x * (0.5 * z).exp()).collect()
    }

    fn is_finite(&self) -> bool {
        self.w.iter().chain(&self.zeta).chain(&self.nu).all(|v| v.is_finite())
    }
}

/// Components of the penalized objective at one state and one xi.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveParts {
    pub sampled_risk: f64,
    pub b_value: f64,
    pub kl_inverse_term: f64,
    pub penalty_term: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub dw: Vec<f64>,
    pub dzeta: Vec<f64>,
    pub dnu: Vec<f64>,
}

#[inline]
fn sigmoid(l: f64) -> f64 {
    1.0 / (1.0 + (-l).exp())
}

/// Mean over the batch of 1 / (1 + exp(-l_theta(x))).
pub fn logistic_risk(model: &dyn LearnedOptimizer, theta: &[f64], batch: &[Instance], loss: LossId) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let vals: Vec<f64> = batch.par_iter().map(|inst| model.loss(theta, inst, loss).map(sigmoid)).collect::<Result<_>>()?;
    Ok(vals.iter().sum::<f64>() / batch.len() as f64)
}

fn grouped_spec(model: &dyn LearnedOptimizer, state: &TrainState) -> GroupedGaussianSpec {
    GroupedGaussianSpec {
        w: state.w.clone(),
        s: state.s(),
        w0: model.prior_mean(),
        partition: model.layout().partition.clone(),
        lambda: state.lambda(),
    }
}

/// B(w, s, lambda) with lambda continuous.
pub fn regularizer_relaxed_at(model: &dyn LearnedOptimizer, state: &TrainState, grid: &PriorGridSpec, n: usize, delta: f64) -> Result<f64> {
    let spec = grouped_spec(model, state);
    let kl = gaussian_kl_grouped(&spec)?;
    Ok(regularizer_b_relaxed(kl, &spec.lambda, grid, n, delta))
}

/// dB/dw, dB/dzeta, dB/dnu with lambda continuous.
fn regularizer_grads(
    w: &[f64],
    zeta: &[f64],
    nu: &[f64],
    w0: &[f64],
    partition: &Partition,
    grid: &PriorGridSpec,
    n: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n_f = n as f64;
    let mut dw = vec![0.0; w.len()];
    let mut dz = vec![0.0; w.len()];
    let mut dn = vec![0.0; nu.len()];
    let ln_max = grid.lambda_max.ln();
    for (j, g) in partition.groups.iter().enumerate() {
        let lam = nu[j].exp();
        let mut acc = 0.0;
        for &i in g {
            let s = zeta[i].exp();
            let d = w[i] - w0[i];
            acc += s + d * d;
            dw[i] = d / (lam * n_f);
            dz[i] = (-0.5 + s / (2.0 * lam)) / n_f;
        }
        dn[j] = (0.5 * (g.len() as f64 - acc / lam) - 2.0 / (ln_max - nu[j])) / n_f;
    }
    (dw, dz, dn)
}

fn parts(q: f64, b: f64, config: &TrainConfig) -> ObjectiveParts {
    let kinv = kl_inverse(q, b);
    let pen = config.mu * (b - config.b_target).powi(2);
    ObjectiveParts { sampled_risk: q, b_value: b, kl_inverse_term: kinv, penalty_term: pen, objective: kinv + pen }
}

/// kl_inverse(logistic risk at w', B) + mu (B - B_target)^2 for a given xi.
/// `n_train` is the training set size N entering B.
pub fn penalized_objective(
    model: &dyn LearnedOptimizer,
    state: &TrainState,
    batch: &[Instance],
    config: &TrainConfig,
    n_train: usize,
    xi: &[f64],
) -> Result<ObjectiveParts> {
    let q = logistic_risk(model, &state.perturbed(xi), batch, config.loss)?;
    let b = regularizer_relaxed_at(model, state, &config.grid, n_train, config.delta)?;
    Ok(parts(q, b, config))
}

/// The objective and its gradient with respect to (w, zeta, nu).
pub fn grad_penalized(
    model: &dyn LearnedOptimizer,
    state: &TrainState,
    batch: &[Instance],
    config: &TrainConfig,
    n_train: usize,
    xi: &[f64],
) -> Result<(ObjectiveParts, Gradient)> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let p = model.n_params();
    let theta = state.perturbed(xi);
    let nb = batch.len() as f64;
    let scale = |l: f64| {
        let s = sigmoid(l);
        s * (1.0 - s) / nb
    };
    let chunks: Vec<(Vec<f64>, f64)> = batch
        .par_chunks(CHUNK)
        .map(|c| {
            let mut g = vec![0.0; p];
            let mut qs = 0.0;
            for inst in c {
                let l = model.loss_grad(&theta, inst, config.loss, &mut g, &scale)?;
                qs += sigmoid(l);
            }
            Ok((g, qs))
        })
        .collect::<Result<_>>()?;
    let mut gq = vec![0.0; p];
    let mut qsum = 0.0;
    for (g, qs) in &chunks {
        for (a, b) in gq.iter_mut().zip(g) {
            *a += b;
        }
        qsum += qs;
    }
    let q = qsum / nb;
    let b = regularizer_relaxed_at(model, state, &config.grid, n_train, config.delta)?;
    let out = parts(q, b, config);
    let (dq, dc) = kl_inverse_grad_at(q, out.kl_inverse_term);
    let db = dc + 2.0 * config.mu * (b - config.b_target);
    let (bw, bz, bn) = regularizer_grads(
        &state.w,
        &state.zeta,
        &state.nu,
        &model.prior_mean(),
        &model.layout().partition,
        &config.grid,
        n_train,
    );
    let dw = (0..p).map(|i| dq * gq[i] + db * bw[i]).collect();
    let dzeta = (0..p).map(|i| dq * gq[i] * 0.5 * xi[i] * (0.5 * state.zeta[i]).exp() + db * bz[i]).collect();
    let dnu = bn.iter().map(|v| db * v).collect();
    Ok((out, Gradient { dw, dzeta, dnu }))
}

fn adam_step(state: &mut TrainState, grad: &Gradient, lr: f64, grid: &PriorGridSpec) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let p = state.w.len();
    let g_all = grad.dw.iter().chain(&grad.dzeta).chain(&grad.dnu);
    for (idx, &g) in g_all.enumerate() {
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let upd = lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        if idx < p {
            state.w[idx] -= upd;
        } else if idx < 2 * p {
            state.zeta[idx - p] -= upd;
        } else {
            state.nu[idx - 2 * p] -= upd;
        }
    }
    let ln_max = grid.lambda_max.ln();
    for z in &mut state.zeta {
        *z = z.clamp(ZETA_MIN, ln_max);
    }
    for v in &mut state.nu {
        *v = v.min(ln_max - 1.0 / grid.b);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub sampled_risk: f64,
    pub b_value: f64,
    pub kl_inverse_term: f64,
    pub penalty_term: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Posterior with the rounded prior lambda*.
    pub posterior: PosteriorSpec,
    pub lambda_continuous: Vec<f64>,
    /// B at the final state with the continuous lambda.
    pub b_continuous: f64,
    /// B at (w*, s*, lambda*).
    pub b_star: f64,
    pub log: Vec<TrainLogRow>,
    pub state: TrainState,
    /// Set when training stopped on a non-finite value; the returned state
    /// is the last finite one.
    pub aborted: Option<String>,
}

/// Runs `epochs` epochs of Adam on the penalized objective with one xi per epoch.
pub fn train_pacbayes(model: &dyn LearnedOptimizer, train: &[Instance], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let n = train.len();
    if n < 8 {
        return Err(Error::Precondition(format!("training needs at least 8 instances, got {n}")));
    }
    if config.k_train != model.k_train() {
        return Err(Error::Precondition(format!(
            "k_train {} differs from the architecture's {}",
            config.k_train,
            model.k_train()
        )));
    }
    model.layout().validate()?;
    let root = Stream::new(config.seed).derive("training", 0);
    let mut state = TrainState::init(model, config, &mut root.derive("init", 0));
    let batch = if config.batch_size == 0 || config.batch_size >= n { n } else { config.batch_size };
    let p = model.n_params();
    let mut log = Vec::with_capacity(config.epochs);
    let mut aborted = None;
    'epochs: for epoch in 0..config.epochs {
        let mut xr = root.derive("xi", epoch as u64);
        let xi: Vec<f64> = (0..p).map(|_| xr.normal()).collect();
        let mut acc = [0.0f64; 5];
        let mut nb = 0usize;
        for chunk in train.chunks(batch) {
            let prev = state.clone();
            let (o, g) = match grad_penalized(model, &state, chunk, config, n, &xi) {
                Ok(v) => v,
                Err(Error::NonFinite(m)) => {
                    aborted = Some(format!("epoch {epoch}: {m}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let grads_ok = g.dw.iter().chain(&g.dzeta).chain(&g.dnu).all(|v| v.is_finite());
            if !o.objective.is_finite() || !grads_ok {
                aborted = Some(format!("epoch {epoch}: non-finite objective or gradient"));
                break 'epochs;
            }
            adam_step(&mut state, &g, config.learning_rate, &config.grid);
            if !state.is_finite() {
                state = prev;
                aborted = Some(format!("epoch {epoch}: non-finite parameters after the update"));
                break 'epochs;
            }
            for (a, v) in acc.iter_mut().zip([o.sampled_risk, o.b_value, o.kl_inverse_term, o.penalty_term, o.objective]) {
                *a += v;
            }
            nb += 1;
        }
        let d = nb as f64;
        log.push(TrainLogRow {
            epoch,
            sampled_risk: acc[0] / d,
            b_value: acc[1] / d,
            kl_inverse_term: acc[2] / d,
            penalty_term: acc[3] / d,
            objective: acc[4] / d,
        });
        state.epoch = epoch + 1;
    }
    if let Some(m) = &aborted {
        log::warn!("training aborted: {m}");
    }
    finish(model, state, config, n, log, aborted)
}

fn finish(
    model: &dyn LearnedOptimizer,
    state: TrainState,
    config: &TrainConfig,
    n: usize,
    log: Vec<TrainLogRow>,
    aborted: Option<String>,
) -> Result<TrainOutcome> {
    let lambda_continuous = state.lambda();
    let b_continuous = regularizer_relaxed_at(model, &state, &config.grid, n, config.delta)?;
    let lambda = round_prior(&lambda_continuous, &config.grid);
    let posterior = PosteriorSpec {
        w: state.w.clone(),
        s: state.s(),
        w0: model.prior_mean(),
        partition: model.layout().partition.clone(),
        lambda,
        grid: config.grid,
    };
    let b_star = regularizer_b(&posterior.grouped(), &config.grid, n, config.delta)?;
    Ok(TrainOutcome { posterior, lambda_continuous, b_continuous, b_star, log, state, aborted })
}

#[derive(Debug, Clone)]
pub struct Crossval {
    pub outcomes: Vec<TrainOutcome>,
    pub scores: Vec<f64>,
    pub best: usize,
    /// Union-bound multiplicity charged to the ledger.
    pub multiplicity: usize,
}

/// Trains one model per B_target and keeps the one with the smallest score
/// (lowest index on ties).
pub fn crossval_btarget(
    model: &dyn LearnedOptimizer,
    train: &[Instance],
    base: &TrainConfig,
    btargets: &[f64],
    score: &dyn Fn(&TrainOutcome) -> Result<f64>,
) -> Result<Crossval> {
    if btargets.is_empty() {
        return Err(Error::Precondition("empty B_target grid".into()));
    }
    let mut outcomes = Vec::with_capacity(btargets.len());
    let mut scores = Vec::with_capacity(btargets.len());
    for &bt in btargets {
        let cfg = TrainConfig { b_target: bt, ..base.clone() };
        let out = train_pacbayes(model, train, &cfg)?;
        scores.push(score(&out)?);
        outcomes.push(out);
    }
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if s < &scores[best] {
            best = i;
        }
    }
    Ok(Crossval { outcomes, scores, best, multiplicity: btargets.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_saturates() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(sigmoid(1e4), 1.0);
    }

    #[test]
    fn regularizer_grad_zero_at_prior_mean() {
        let part = Partition::from_sizes(&[2, 3]);
        let w = vec![0.3, -0.1, 1.0, 2.0, 0.0];
        let (dw, _, _) =
            regularizer_grads(&w, &[0.0; 5], &[1.0, 2.0], &w, &part, &PriorGridSpec::default(), 100);
        assert!(dw.iter().all(|&v| v == 0.0));
    }
}
