//! Stage orchestration behind the CLI: gen, run, certify, train, calibrate,
//! quantiles, report. Every stage reads the artifacts of the previous ones
//! from the output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bounds::{delta_a, quantile_from_grid, Certificate, ConfidenceLedger, QuantileBound};
use crate::calibration::{certify_learned, CalibrationConfig, MetricGrid};
use crate::config::{ArchConfig, ClassicalConfig, FamilyConfig, InitConfig, LearnedConfig, OperatorConfig, OptimizerConfig, RunConfig};
use crate::error::{Error, Result};
use crate::fixed_point::{certify_classical, run_trace, FixedPointOperator, Initialization, MetricId, NonFinitePolicy, TraceTensor, WorstCaseSpec};
use crate::learned::{datafree_w, Alista, L2ws, LearnedOptimizer, Lista, Tilista, WeightsRecord};
use crate::linalg::{dist2, power_iteration_gram, Mat};
use crate::problems::{DeblurFamily, Instance, ParametricFamily, QpFamily, SparseCodingFamily, ToyFamily};
use crate::report::{self, fmt_sig, Curve};
use crate::solvers::{fista_trace, gd_operator, ista_operator_with_form, optimal_gd_step, IstaOperator, NearestNeighbor, ToyContraction};
use crate::training::{crossval_btarget, TrainConfig, TrainOutcome};

const WARM_TOL: f64 = 1e-10;
const WARM_MAX_ITER: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Gen,
    Run,
    Certify,
    Train,
    Calibrate,
    Quantiles,
    Report,
    All,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Run => "run",
            Stage::Certify => "certify",
            Stage::Train => "train",
            Stage::Calibrate => "calibrate",
            Stage::Quantiles => "quantiles",
            Stage::Report => "report",
            Stage::All => "all",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub policy: NonFinitePolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub status: String,
    pub stages: Vec<String>,
    pub error: Option<String>,
    pub delta: f64,
    pub omega: Option<f64>,
    pub n_btargets: usize,
    pub n_tolerances: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSets {
    pub train: Vec<Instance>,
    pub test: Vec<Instance>,
    pub warm: Vec<Instance>,
}

/// Trained weights plus the quantities the calibration stage needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedArtifact {
    pub record: WeightsRecord,
    pub b_target: f64,
    pub b_star: f64,
    pub n_btargets: usize,
}

pub enum Family {
    Toy(ToyFamily),
    SparseCoding(SparseCodingFamily),
    Qp(QpFamily),
    Deblur(Box<DeblurFamily>),
}

impl Family {
    pub fn build(cfg: &FamilyConfig, seed: u64) -> Result<Self> {
        Ok(match cfg {
            FamilyConfig::Toy(s) => Family::Toy(ToyFamily::new(*s, seed)),
            FamilyConfig::SparseCoding(s) => Family::SparseCoding(SparseCodingFamily::new(*s, seed)),
            FamilyConfig::UnconstrainedQp(s) => Family::Qp(QpFamily::new(*s, seed)),
            FamilyConfig::Deblurring(s) => Family::Deblur(Box::new(DeblurFamily::new(s.clone(), seed)?)),
        })
    }

    pub fn as_dyn(&self) -> &dyn ParametricFamily {
        match self {
            Family::Toy(f) => f,
            Family::SparseCoding(f) => f,
            Family::Qp(f) => f,
            Family::Deblur(f) => f.as_ref(),
        }
    }
}

pub enum Classical {
    Op(Box<dyn FixedPointOperator>),
    Fista(IstaOperator),
}

impl Classical {
    fn op(&self) -> &dyn FixedPointOperator {
        match self {
            Classical::Op(o) => o.as_ref(),
            Classical::Fista(o) => o,
        }
    }
}

pub fn build_classical(family: &Family, c: &ClassicalConfig) -> Result<Classical> {
    Ok(match (family, &c.operator) {
        (Family::Toy(f), OperatorConfig::ToyContraction { beta }) => {
            Classical::Op(Box::new(ToyContraction { dim: f.spec.dim, beta: *beta }))
        }
        (Family::Qp(f), OperatorConfig::Gd { gamma }) => {
            let p = Mat::diag(&f.p_diag);
            let g = gamma.unwrap_or_else(|| optimal_gd_step(&p));
            Classical::Op(Box::new(gd_operator(&p, g)?))
        }
        (Family::SparseCoding(f), OperatorConfig::Ista { rho, form }) => {
            let l = power_iteration_gram(&f.dictionary);
            Classical::Op(Box::new(ista_operator_with_form(&f.dictionary, *rho, l, *form)?))
        }
        (Family::SparseCoding(f), OperatorConfig::Fista { rho }) => {
            let l = power_iteration_gram(&f.dictionary);
            Classical::Fista(ista_operator_with_form(&f.dictionary, *rho, l, Default::default())?)
        }
        (Family::Deblur(f), OperatorConfig::DrBoxqp) => {
            Classical::Op(Box::new(f.operator.clone()))
        }
        _ => return Err(Error::Config { path: "optimizer.operator".into(), msg: "operator does not apply to this problem family".into() }),
    })
}

pub fn build_learned(family: &Family, l: &LearnedConfig) -> Result<Box<dyn LearnedOptimizer>> {
    Ok(match (family, &l.arch) {
        (Family::SparseCoding(f), ArchConfig::Alista { k }) => {
            Box::new(Alista::new(f.dictionary.clone(), datafree_w(&f.dictionary)?, *k)?)
        }
        (Family::SparseCoding(f), ArchConfig::Tilista { k }) => {
            Box::new(Tilista::new(f.dictionary.clone(), datafree_w(&f.dictionary)?, *k)?)
        }
        (Family::SparseCoding(f), ArchConfig::Lista { k, rho }) => {
            Box::new(Lista::new(&f.dictionary, *k, *rho, power_iteration_gram(&f.dictionary)))
        }
        (Family::Qp(f), ArchConfig::L2ws { k, hidden, gamma }) => {
            let p = Mat::diag(&f.p_diag);
            let gd = gd_operator(&p, gamma.unwrap_or_else(|| optimal_gd_step(&p)))?;
            let n = f.spec.n;
            let mut dims = vec![n];
            dims.extend_from_slice(hidden);
            dims.push(n);
            Box::new(L2ws::new(dims, gd, *k)?)
        }
        _ => return Err(Error::Config { path: "optimizer.arch".into(), msg: "architecture does not apply to this problem family".into() }),
    })
}

/// Iterates T from zero until the residual is at most `tol`.
pub fn fixed_point_of(op: &dyn FixedPointOperator, x: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = op.dim();
    let mut z = vec![0.0; n];
    let mut tz = vec![0.0; n];
    for _ in 0..max_iter {
        op.apply(&z, x, &mut tz);
        let r = dist2(&z, &tz).sqrt();
        std::mem::swap(&mut z, &mut tz);
        if !r.is_finite() {
            return Err(Error::NonFinite("fixed-point iteration diverged".into()));
        }
        if r <= tol {
            return Ok(z);
        }
    }
    Err(Error::Precondition(format!("no fixed point to {tol} within {max_iter} iterations")))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, hint: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e} (run `{hint}` first)", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { offset: e.column(), msg: format!("{}: {e}", path.display()) })
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub policy: NonFinitePolicy,
    family: Family,
}

impl Pipeline {
    pub fn new(mut cfg: RunConfig, opts: &RunOptions) -> Result<Self> {
        if let Some(s) = opts.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        let out = opts.out.clone().or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("out"));
        let family = Family::build(&cfg.family, cfg.seed)?;
        Ok(Pipeline { cfg, out, policy: opts.policy, family })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn metrics(&self) -> Vec<MetricGrid> {
        self.cfg.bounds.metrics.iter().map(|m| MetricGrid { metric: m.metric, tolerances: m.tolerances() }).collect()
    }

    fn needs_truth(&self) -> bool {
        self.cfg.bounds.metrics.iter().any(|m| m.metric.needs_truth())
    }

    /// Runs one stage (or all of them) and records the outcome in the manifest.
    pub fn run(&self, stage: Stage) -> Result<()> {
        fs::create_dir_all(&self.out)?;
        let stages: Vec<Stage> = match (stage, &self.cfg.optimizer) {
            (Stage::All, OptimizerConfig::Classical(_)) => {
                vec![Stage::Gen, Stage::Run, Stage::Certify, Stage::Quantiles, Stage::Report]
            }
            (Stage::All, OptimizerConfig::Learned(_)) => {
                vec![Stage::Gen, Stage::Train, Stage::Calibrate, Stage::Quantiles, Stage::Report]
            }
            (s, _) => vec![s],
        };
        for s in stages {
            let res = self.run_one(s);
            self.update_manifest(s, res.as_ref().err())?;
            res?;
        }
        Ok(())
    }

    fn run_one(&self, stage: Stage) -> Result<()> {
        log::info!("stage {}", stage.as_str());
        match (stage, &self.cfg.optimizer) {
            (Stage::Gen, _) => self.gen(),
            (Stage::Run, OptimizerConfig::Classical(c)) => self.run_classical(c),
            (Stage::Certify, OptimizerConfig::Classical(c)) => self.certify(c),
            (Stage::Train, OptimizerConfig::Learned(l)) => self.train(l),
            (Stage::Calibrate, OptimizerConfig::Learned(l)) => self.calibrate(l),
            (Stage::Quantiles, _) => self.quantiles(),
            (Stage::Report, _) => self.report(),
            (s, _) => Err(Error::Config {
                path: "optimizer.kind".into(),
                msg: format!("stage `{}` does not apply to this optimizer", s.as_str()),
            }),
        }
    }

    fn manifest_base(&self) -> Manifest {
        let learned = matches!(self.cfg.optimizer, OptimizerConfig::Learned(_));
        Manifest {
            config_hash: self.cfg.hash(),
            seed: self.cfg.seed,
            status: "partial".into(),
            stages: Vec::new(),
            error: None,
            delta: self.cfg.bounds.delta,
            omega: learned.then_some(self.cfg.bounds.omega),
            n_btargets: self.cfg.n_btargets(),
            n_tolerances: self.metrics().iter().map(|m| (m.metric.as_str().to_string(), m.tolerances.len())).collect(),
        }
    }

    fn update_manifest(&self, stage: Stage, err: Option<&Error>) -> Result<()> {
        let path = self.path("manifest.json");
        let base = self.manifest_base();
        let mut m = match read_json::<Manifest>(&path, "gen") {
            Ok(m) if m.config_hash == base.config_hash => m,
            _ => base,
        };
        if stage == Stage::Gen {
            m.stages.clear();
        }
        if !m.stages.iter().any(|s| s == stage.as_str()) {
            m.stages.push(stage.as_str().into());
        }
        match err {
            Some(e) => {
                m.status = "partial".into();
                m.error = Some(format!("{}: {e}", stage.as_str()));
            }
            None => {
                m.error = None;
                m.status = if stage == Stage::Report { "complete".into() } else { "partial".into() };
            }
        }
        write_json(&path, &m)
    }

    fn gen(&self) -> Result<()> {
        let f = self.family.as_dyn();
        let n = self.cfg.n_samples;
        let nt = self.cfg.n_test;
        let nw = match &self.cfg.optimizer {
            OptimizerConfig::Classical(c) if c.init == InitConfig::NearestNeighbor => c.n_warmstart,
            _ => 0,
        };
        let mut sets = InstanceSets {
            train: f.sample_range(0, n),
            test: f.sample_range(n as u64, nt),
            warm: f.sample_range((n + nt) as u64, nw),
        };
        if self.needs_truth() {
            f.attach_solutions(&mut sets.train)?;
            f.attach_solutions(&mut sets.test)?;
        }
        write_json(&self.path("instances.json"), &sets)
    }

    fn instances(&self) -> Result<InstanceSets> {
        read_json(&self.path("instances.json"), "gen")
    }

    fn trace_path(&self, m: MetricId) -> PathBuf {
        self.path(&format!("trace_{m}.bin"))
    }

    fn run_classical(&self, c: &ClassicalConfig) -> Result<()> {
        let sets = self.instances()?;
        let alg = build_classical(&self.family, c)?;
        let nn = if c.init == InitConfig::NearestNeighbor {
            let base = sets
                .warm
                .iter()
                .map(|inst| Ok((inst.x.clone(), fixed_point_of(alg.op(), &inst.x, WARM_TOL, WARM_MAX_ITER)?)))
                .collect::<Result<Vec<_>>>()?;
            Some(NearestNeighbor::new(base)?)
        } else {
            None
        };
        let init = match &nn {
            Some(nn) => Initialization::WarmStart(nn),
            None => Initialization::Zero,
        };
        for m in self.metrics() {
            let trace = match &alg {
                Classical::Op(op) => run_trace(op.as_ref(), &sets.train, init, c.k_max, m.metric, self.policy)?,
                Classical::Fista(op) => fista_trace(op, &sets.train, init, c.k_max, m.metric, self.policy)?,
            };
            trace.save(&self.trace_path(m.metric))?;
        }
        Ok(())
    }

    fn worst_case(&self, c: &ClassicalConfig) -> Result<Option<WorstCaseSpec>> {
        let Some(w) = &c.worst_case else { return Ok(None) };
        let alg = build_classical(&self.family, c)?;
        let class = alg.op().class().ok_or_else(|| Error::Config {
            path: "optimizer.worst_case".into(),
            msg: "operator has no declared class".into(),
        })?;
        Ok(Some(WorstCaseSpec { class, dist_upper: w.dist_upper }))
    }

    fn certify(&self, c: &ClassicalConfig) -> Result<()> {
        let ks = self.cfg.ks();
        let wc = self.worst_case(c)?;
        let mut certs = Vec::new();
        let mut quants = Vec::new();
        let mut ledger = String::new();
        for m in self.metrics() {
            let file = fs::File::open(self.trace_path(m.metric))
                .map_err(|e| Error::Io(format!("{}: {e} (run `run` first)", self.trace_path(m.metric).display())))?;
            let trace = TraceTensor::read_binary(std::io::BufReader::new(file))?;
            let cert = certify_classical(&trace, &m.tolerances, self.cfg.bounds.delta, &self.cfg.bounds.quantiles, wc)?;
            certs.extend(cert.certificates.into_iter().filter(|c| ks.contains(&c.k)));
            quants.extend(cert.quantiles.into_iter().filter(|q| ks.contains(&q.k)));
            if ledger.is_empty() {
                ledger.push_str("# risk certificates (each statement)\n");
                ledger.push_str(&cert.risk_ledger.render());
            }
            ledger.push_str(&format!("# quantile bounds, {}\n", m.metric));
            ledger.push_str(&cert.quantile_ledger.render());
        }
        report::write_certificates(&certs, &quants, &self.out)?;
        write_text(&self.path("ledger.txt"), &ledger)
    }

    fn train_config(&self, l: &LearnedConfig, b_target: f64) -> TrainConfig {
        TrainConfig {
            b_target,
            mu: l.mu,
            learning_rate: l.learning_rate,
            epochs: l.epochs,
            batch_size: l.batch_size,
            grid: l.grid,
            delta: self.cfg.bounds.delta,
            k_train: l.arch.k(),
            seed: self.cfg.seed,
            loss: l.loss,
            s0: l.s0,
        }
    }

    fn cal_config(&self, l: &LearnedConfig, metrics: Vec<MetricGrid>, ks: Vec<usize>) -> CalibrationConfig {
        CalibrationConfig {
            h: l.h,
            delta: self.cfg.bounds.delta,
            omega: self.cfg.bounds.omega,
            metrics,
            ks,
            seed: self.cfg.seed,
            policy: self.policy,
        }
    }

    fn train(&self, l: &LearnedConfig) -> Result<()> {
        let sets = self.instances()?;
        let model = build_learned(&self.family, l)?;
        let nb = l.btargets.len();
        let select = l.select.clone().unwrap_or_else(|| crate::config::SelectConfig {
            metric: self.cfg.bounds.metrics[0].metric,
            k: *self.cfg.ks().last().unwrap(),
            quantile: self.cfg.bounds.quantiles.first().copied().unwrap_or(0.9),
        });
        let sel_grid: Vec<MetricGrid> = self.metrics().into_iter().filter(|m| m.metric == select.metric).collect();
        let cal = self.cal_config(l, sel_grid, vec![select.k]);
        let score = |o: &TrainOutcome| -> Result<f64> {
            if nb == 1 {
                return Ok(0.0);
            }
            let c = certify_learned(&o.posterior, model.as_ref(), &sets.train, &cal, &[select.quantile], o.b_star, nb)?;
            Ok(c.quantiles[0].epsilon_bound.unwrap_or(f64::INFINITY))
        };
        let base = self.train_config(l, l.btargets[0]);
        let cv = crossval_btarget(model.as_ref(), &sets.train, &base, &l.btargets, &score)?;
        let best = &cv.outcomes[cv.best];
        let mut rows = String::from("b_target,b_continuous,b_star,score,selected,aborted\n");
        for (i, (o, s)) in cv.outcomes.iter().zip(&cv.scores).enumerate() {
            rows.push_str(&format!(
                "{},{},{},{},{},{}\n",
                fmt_sig(l.btargets[i]),
                fmt_sig(o.b_continuous),
                fmt_sig(o.b_star),
                fmt_sig(*s),
                u8::from(i == cv.best),
                u8::from(o.aborted.is_some())
            ));
        }
        write_text(&self.path("crossval.csv"), &rows)?;
        report::write_training_log(&best.log, &self.out)?;
        let p = &best.posterior;
        let dims = match &l.arch {
            ArchConfig::L2ws { hidden, .. } => {
                let n = model.dim();
                let mut d = vec![n];
                d.extend_from_slice(hidden);
                d.push(n);
                d
            }
            _ => match &self.family {
                Family::SparseCoding(f) => vec![f.spec.m, f.spec.n],
                _ => vec![],
            },
        };
        let art = TrainedArtifact {
            record: WeightsRecord {
                arch: model.arch(),
                dims,
                k: model.k_train(),
                w: p.w.clone(),
                s: p.s.clone(),
                w0: p.w0.clone(),
                lambda: p.lambda.clone(),
                partition: p.partition.clone(),
                grid: p.grid,
            },
            b_target: l.btargets[cv.best],
            b_star: best.b_star,
            n_btargets: nb,
        };
        write_json(&self.path("weights.json"), &art)?;
        if let Some(msg) = cv.outcomes.iter().find_map(|o| o.aborted.clone()) {
            if self.policy == NonFinitePolicy::Abort {
                return Err(Error::NonFinite(format!("training aborted: {msg}")));
            }
            log::warn!("training aborted early, continuing with the last finite state: {msg}");
        }
        Ok(())
    }

    fn calibrate(&self, l: &LearnedConfig) -> Result<()> {
        let sets = self.instances()?;
        let model = build_learned(&self.family, l)?;
        let art: TrainedArtifact = read_json(&self.path("weights.json"), "train")?;
        if art.record.w.len() != model.n_params() {
            return Err(Error::Precondition("weights.json does not match the configured architecture".into()));
        }
        let post = art.record.posterior();
        let cal = self.cal_config(l, self.metrics(), self.cfg.ks());
        let cert = certify_learned(&post, model.as_ref(), &sets.train, &cal, &self.cfg.bounds.quantiles, art.b_star, art.n_btargets)?;
        report::write_certificates(&cert.certificates, &cert.quantiles, &self.out)?;
        let mut ledger = String::from("# risk certificates (each statement)\n");
        ledger.push_str(&cert.risk_ledger.render());
        for m in self.metrics() {
            ledger.push_str(&format!("# quantile bounds, {}\n", m.metric));
            ledger.push_str(&ConfidenceLedger::for_learned(cal.delta, cal.omega, art.n_btargets, m.tolerances.len()).render());
        }
        let a = post.grid.indices(&post.lambda)?;
        ledger.push_str("# prior grid (union over lambda = lambda_max exp(-a/b))\n");
        ledger.push_str(&format!("a\t{}\n", a.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")));
        ledger.push_str(&format!("delta_a\t{:.12e}\n", delta_a(&a, cal.delta)));
        ledger.push_str(&format!("B_star\t{}\nB_target\t{}\n", fmt_sig(art.b_star), fmt_sig(art.b_target)));
        write_text(&self.path("ledger.txt"), &ledger)
    }

    /// (risk confidence, quantile confidence per metric) implied by the config.
    pub fn confidences(&self) -> Result<(f64, BTreeMap<MetricId, f64>)> {
        let b = &self.cfg.bounds;
        let metrics = self.metrics();
        match &self.cfg.optimizer {
            OptimizerConfig::Classical(_) => {
                let risk = 1.0 - b.delta;
                let q = metrics
                    .iter()
                    .map(|m| {
                        let mut l = ConfidenceLedger::new();
                        l.push("delta", b.delta * m.tolerances.len() as f64);
                        Ok((m.metric, l.confidence()?))
                    })
                    .collect::<Result<_>>()?;
                Ok((risk, q))
            }
            OptimizerConfig::Learned(l) => {
                let nb = l.btargets.len();
                let risk = ConfidenceLedger::for_learned(b.delta, b.omega, nb, 1).confidence()?;
                let q = metrics
                    .iter()
                    .map(|m| Ok((m.metric, ConfidenceLedger::for_learned(b.delta, b.omega, nb, m.tolerances.len()).confidence()?)))
                    .collect::<Result<_>>()?;
                Ok((risk, q))
            }
        }
    }

    fn certificates(&self) -> Result<Vec<Certificate>> {
        let path = self.path("certificates.csv");
        let text = fs::read_to_string(&path).map_err(|e| Error::Io(format!("{}: {e} (run `certify` or `calibrate` first)", path.display())))?;
        report::parse_certificates(&text)
    }

    /// Recomputes quantiles.csv from the certified risk bounds.
    fn quantiles(&self) -> Result<()> {
        let certs = self.certificates()?;
        let (_, qconf) = self.confidences()?;
        let mut rows = Vec::new();
        for m in self.metrics() {
            let mut ks: Vec<usize> = certs.iter().filter(|c| c.metric == m.metric).map(|c| c.k).collect();
            ks.dedup();
            for k in ks {
                let cells: Vec<&Certificate> = certs.iter().filter(|c| c.metric == m.metric && c.k == k).collect();
                let eps: Vec<f64> = cells.iter().map(|c| c.epsilon).collect();
                let bounds: Vec<f64> = cells.iter().map(|c| c.bound).collect();
                for &q in &self.cfg.bounds.quantiles {
                    rows.push(QuantileBound {
                        metric: m.metric,
                        k,
                        quantile: q,
                        epsilon_bound: quantile_from_grid(&eps, &bounds, q)?,
                        confidence: qconf[&m.metric],
                    });
                }
            }
        }
        write_text(&self.path("quantiles.csv"), &report::quantiles_csv(&rows))
    }

    /// Audits the emitted confidences against the ledger and writes plot data.
    fn report(&self) -> Result<()> {
        let certs = self.certificates()?;
        let qpath = self.path("quantiles.csv");
        let quants = report::parse_quantiles(&fs::read_to_string(&qpath).map_err(|e| Error::Io(format!("{}: {e}", qpath.display())))?)?;
        let (risk, qconf) = self.confidences()?;
        let same = |a: f64, b: f64| fmt_sig(a) == fmt_sig(b);
        if let Some(c) = certs.iter().find(|c| !same(c.confidence, risk)) {
            return Err(Error::Precondition(format!(
                "audit: certificate ({}, k={}, eps={}) has confidence {} but the ledger gives {}",
                c.metric, c.k, c.epsilon, c.confidence, risk
            )));
        }
        if let Some(q) = quants.iter().find(|q| qconf.get(&q.metric).is_none_or(|&v| !same(q.confidence, v))) {
            return Err(Error::Precondition(format!("audit: quantile row ({}, k={}) has confidence {}", q.metric, q.k, q.confidence)));
        }
        let mut curves = Vec::new();
        if let OptimizerConfig::Classical(c) = &self.cfg.optimizer {
            if let Some(wc) = self.worst_case(c)? {
                let points = self.cfg.ks().into_iter().map(|k| Ok((k, wc.class.rate(k)? * wc.dist_upper))).collect::<Result<_>>()?;
                curves.push(Curve { metric: MetricId::FpResidual, points });
            }
        }
        report::emit_plotdata(&certs, &quants, &curves, &self.out)?;
        Ok(())
    }
}

/// Loads a config and runs every stage. Returns the output directory.
pub fn run_config(path: &Path, opts: &RunOptions) -> Result<PathBuf> {
    let cfg = RunConfig::load(path)?;
    let p = Pipeline::new(cfg, opts)?;
    p.run(Stage::All)?;
    Ok(p.out.clone())
}
