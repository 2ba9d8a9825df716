use serde::{Deserialize, Serialize};

use super::{FamilyId, Instance, ParametricFamily};
use crate::linalg::{dot, Mat};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparseCodingSpec {
    pub m: usize,
    pub n: usize,
    #[serde(default = "default_keep")]
    pub sparsity_keep_prob: f64,
    #[serde(default = "default_snr")]
    pub snr_db: f64,
}

fn default_keep() -> f64 {
    0.1
}

fn default_snr() -> f64 {
    40.0
}

/// b = D z + noise with a column-normalized Gaussian dictionary D (m x n).
#[derive(Debug, Clone)]
pub struct SparseCodingFamily {
    pub spec: SparseCodingSpec,
    pub dictionary: Mat,
    stream: Stream,
}

impl SparseCodingFamily {
    pub fn new(spec: SparseCodingSpec, seed: u64) -> Self {
        let root = Stream::new(seed).derive("sparse_coding", 0);
        let mut ds = root.derive("dictionary", 0);
        let std = 1.0 / (spec.m as f64).sqrt();
        let mut d = Mat::from_fn(spec.m, spec.n, |_, _| std * ds.normal());
        for j in 0..spec.n {
            let nrm = (0..spec.m).map(|i| d.get(i, j).powi(2)).sum::<f64>().sqrt();
            for i in 0..spec.m {
                d.set(i, j, d.get(i, j) / nrm);
            }
        }
        SparseCodingFamily { spec, dictionary: d, stream: root }
    }

    /// Noise standard deviation giving the configured SNR for a clean signal.
    pub fn noise_std(&self, clean: &[f64]) -> f64 {
        let power = dot(clean, clean) / self.spec.m as f64;
        (power / 10f64.powf(self.spec.snr_db / 10.0)).sqrt()
    }
}

impl ParametricFamily for SparseCodingFamily {
    fn id(&self) -> FamilyId {
        FamilyId::SparseCoding
    }
    fn param_dim(&self) -> usize {
        self.spec.m
    }
    fn solution_dim(&self) -> usize {
        self.spec.n
    }
    fn sample(&self, index: u64) -> Instance {
        let mut s = self.stream.derive("instance", index);
        let z = loop {
            let z: Vec<f64> = (0..self.spec.n)
                .map(|_| {
                    let v = s.normal();
                    if s.uniform() < self.spec.sparsity_keep_prob {
                        v
                    } else {
                        0.0
                    }
                })
                .collect();
            if z.iter().any(|&v| v != 0.0) {
                break z;
            }
        };
        let mut b = vec![0.0; self.spec.m];
        self.dictionary.matvec(&z, &mut b);
        let sigma = self.noise_std(&b);
        for bi in b.iter_mut() {
            *bi += sigma * s.normal();
        }
        Instance { x: b, truth: Some(z) }
    }
}
