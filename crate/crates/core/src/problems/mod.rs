//! Parametric problem families and image ingestion.

mod deblur;
mod idx;
mod qp;
mod sparse_coding;
mod toy;

pub use deblur::{blur_matrix_1d, gaussian_kernel, DeblurFamily, DeblurSpec, ImageSource};
pub use idx::{load_idx, parse_idx, write_idx};
pub use qp::{QpFamily, QpSpec};
pub use sparse_coding::{SparseCodingFamily, SparseCodingSpec};
pub use toy::{ToyFamily, ToySpec};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// A problem parameter x and, when known, the reference solution z*(x)
/// (for sparse coding, the ground-truth code).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub x: Vec<f64>,
    pub truth: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyId {
    Toy,
    SparseCoding,
    UnconstrainedQp,
    Deblurring,
}

/// A seeded distribution over problem instances plus fixed problem data.
/// Instance `i` depends only on the family seed and `i`.
pub trait ParametricFamily: Sync {
    fn id(&self) -> FamilyId;
    fn param_dim(&self) -> usize;
    fn solution_dim(&self) -> usize;
    fn sample(&self, index: u64) -> Instance;

    /// Reference solution for a parameter when it is not stored at sampling time.
    fn solve(&self, _x: &[f64]) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }

    /// Instances `offset .. offset + n`, materialized in parallel.
    fn sample_range(&self, offset: u64, n: usize) -> Vec<Instance> {
        (0..n as u64).into_par_iter().map(|i| self.sample(offset + i)).collect()
    }

    /// Fills in missing reference solutions.
    fn attach_solutions(&self, instances: &mut [Instance]) -> Result<()> {
        instances.par_iter_mut().try_for_each(|inst| {
            if inst.truth.is_none() {
                inst.truth = self.solve(&inst.x)?;
            }
            Ok(())
        })
    }
}
