use serde::{Deserialize, Serialize};

use super::{FamilyId, Instance, ParametricFamily};
use crate::rng::Stream;

/// Parameters x uniform on [-1, 1]^dim; the reference solution is x itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct ToyFamily {
    pub spec: ToySpec,
    stream: Stream,
}

impl ToyFamily {
    pub fn new(spec: ToySpec, seed: u64) -> Self {
        ToyFamily { spec, stream: Stream::new(seed).derive("toy", 0) }
    }
}

impl ParametricFamily for ToyFamily {
    fn id(&self) -> FamilyId {
        FamilyId::Toy
    }
    fn param_dim(&self) -> usize {
        self.spec.dim
    }
    fn solution_dim(&self) -> usize {
        self.spec.dim
    }
    fn sample(&self, index: u64) -> Instance {
        let mut s = self.stream.derive("instance", index);
        let x: Vec<f64> = (0..self.spec.dim).map(|_| s.uniform_range(-1.0, 1.0)).collect();
        Instance { truth: Some(x.clone()), x }
    }
}
