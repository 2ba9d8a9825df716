use serde::{Deserialize, Serialize};

use super::{FamilyId, Instance, ParametricFamily};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QpSpec {
    #[serde(default = "default_n")]
    pub n: usize,
}

fn default_n() -> usize {
    20
}

/// minimize (1/2) z'Pz + c'z with P = diag(100 (first n/2), 1 (rest)); x = c.
#[derive(Debug, Clone)]
pub struct QpFamily {
    pub spec: QpSpec,
    pub p_diag: Vec<f64>,
    scale: Vec<f64>,
    stream: Stream,
}

impl QpFamily {
    pub fn new(spec: QpSpec, seed: u64) -> Self {
        let half = spec.n / 2;
        let p_diag = (0..spec.n).map(|i| if i < half { 100.0 } else { 1.0 }).collect();
        let scale = (0..spec.n).map(|i| if i < half { 1e4 } else { 1.0 }).collect();
        QpFamily { spec, p_diag, scale, stream: Stream::new(seed).derive("unconstrained_qp", 0) }
    }

    pub fn solution(&self, c: &[f64]) -> Vec<f64> {
        c.iter().zip(&self.p_diag).map(|(ci, pi)| -ci / pi).collect()
    }
}

impl ParametricFamily for QpFamily {
    fn id(&self) -> FamilyId {
        FamilyId::UnconstrainedQp
    }
    fn param_dim(&self) -> usize {
        self.spec.n
    }
    fn solution_dim(&self) -> usize {
        self.spec.n
    }
    fn sample(&self, index: u64) -> Instance {
        let mut s = self.stream.derive("instance", index);
        let c: Vec<f64> = self.scale.iter().map(|mu| mu * s.uniform_range(-10.0, 10.0)).collect();
        Instance { truth: Some(self.solution(&c)), x: c }
    }
}
