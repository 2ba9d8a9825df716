use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{load_idx, FamilyId, Instance, ParametricFamily};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::rng::Stream;
use crate::solvers::{dr_boxqp_operator, DrBoxQp};

/// Tolerance and iteration cap for the on-demand reference solutions.
pub const SOLVE_TOL: f64 = 1e-10;
pub const SOLVE_MAX_ITER: usize = 2_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum ImageSource {
    /// Random Gaussian blobs, generated per instance.
    #[default]
    Synthetic,
    /// Images from an IDX file, block-averaged down to `side` when needed.
    Idx { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeblurSpec {
    pub side: usize,
    #[serde(default = "default_blur")]
    pub blur_size: usize,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default)]
    pub image_source: ImageSource,
}

fn default_blur() -> usize {
    8
}
fn default_noise() -> f64 {
    1e-3
}
fn default_rho() -> f64 {
    1e-4
}

/// Normalized Gaussian taps; tap t sits at offset t - size/2, std = size/4.
pub fn gaussian_kernel(size: usize) -> Vec<(isize, f64)> {
    let sigma = size as f64 / 4.0;
    let half = (size / 2) as isize;
    let raw: Vec<(isize, f64)> = (0..size as isize)
        .map(|t| {
            let o = t - half;
            (o, (-(o * o) as f64 / (2.0 * sigma * sigma)).exp())
        })
        .collect();
    let total: f64 = raw.iter().map(|(_, w)| w).sum();
    raw.into_iter().map(|(o, w)| (o, w / total)).collect()
}

/// 1-D zero-padded convolution matrix: (B y)_r = sum_t k_t y_{r + o_t}.
pub fn blur_matrix_1d(side: usize, size: usize) -> Mat {
    let mut b = Mat::zeros(side, side);
    for r in 0..side {
        for (o, w) in gaussian_kernel(size) {
            let c = r as isize + o;
            if c >= 0 && (c as usize) < side {
                b.set(r, c as usize, b.get(r, c as usize) + w);
            }
        }
    }
    b
}

/// Deblurring box-QP: minimize ||A y - x||^2 + rho 1'y over y in [0,1]^n,
/// i.e. P = 2 A'A and q(x) = -2 A'x + rho 1.
#[derive(Debug, Clone)]
pub struct DeblurFamily {
    pub spec: DeblurSpec,
    /// Row-major 2-D blur, kron(B, B).
    pub a: Mat,
    pub operator: DrBoxQp,
    images: Option<Vec<Mat>>,
    stream: Stream,
}

impl DeblurFamily {
    pub fn new(spec: DeblurSpec, seed: u64) -> Result<Self> {
        if spec.side == 0 || spec.blur_size == 0 {
            return Err(Error::Domain("deblurring needs positive side and blur size".into()));
        }
        let side = spec.side;
        let b1 = blur_matrix_1d(side, spec.blur_size);
        let n = side * side;
        let a = Mat::from_fn(n, n, |i, j| b1.get(i / side, j / side) * b1.get(i % side, j % side));
        let at = a.transpose();
        let mut p = at.mul(&a);
        p.data.iter_mut().for_each(|v| *v *= 2.0);
        let m = Mat { rows: n, cols: n, data: at.data.iter().map(|v| -2.0 * v).collect() };
        let operator = dr_boxqp_operator(&p, vec![0.0; n], vec![1.0; n], Some((m, vec![spec.rho; n])))?;
        let images = match &spec.image_source {
            ImageSource::Synthetic => None,
            ImageSource::Idx { path } => {
                let raw = load_idx(path)?;
                if raw.is_empty() {
                    return Err(Error::Domain(format!("IDX file {} has no images", path.display())));
                }
                Some(raw.iter().map(|img| resize_to(img, side)).collect::<Result<_>>()?)
            }
        };
        Ok(DeblurFamily { spec, a, operator, images, stream: Stream::new(seed).derive("deblurring", 0) })
    }

    /// Applies the blur to a row-major image.
    pub fn blur(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; y.len()];
        self.a.matvec(y, &mut out);
        out
    }

    fn synthetic_image(&self, s: &mut Stream) -> Vec<f64> {
        let side = self.spec.side as f64;
        let mut img = vec![0.0; self.spec.side * self.spec.side];
        let blobs = 1 + s.below(4);
        for _ in 0..blobs {
            let cr = s.uniform_range(0.0, side);
            let cc = s.uniform_range(0.0, side);
            let width = s.uniform_range(1.0, (side / 4.0).max(1.5));
            let amp = s.uniform_range(0.3, 1.0);
            for (idx, v) in img.iter_mut().enumerate() {
                let r = (idx / self.spec.side) as f64 + 0.5;
                let c = (idx % self.spec.side) as f64 + 0.5;
                let d2 = (r - cr).powi(2) + (c - cc).powi(2);
                *v += amp * (-d2 / (2.0 * width * width)).exp();
            }
        }
        img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        img
    }

    /// The clean image behind instance `index`.
    pub fn true_image(&self, index: u64) -> Vec<f64> {
        let mut s = self.stream.derive("instance", index);
        self.image_with(&mut s)
    }

    fn image_with(&self, s: &mut Stream) -> Vec<f64> {
        match &self.images {
            None => self.synthetic_image(s),
            Some(imgs) => imgs[s.below(imgs.len() as u64) as usize].data.clone(),
        }
    }
}

fn resize_to(img: &Mat, side: usize) -> Result<Mat> {
    if img.rows == side && img.cols == side {
        return Ok(img.clone());
    }
    if img.rows % side != 0 || img.cols % side != 0 {
        return Err(Error::Domain(format!(
            "IDX images are {}x{}, incompatible with side {side}",
            img.rows, img.cols
        )));
    }
    let (fr, fc) = (img.rows / side, img.cols / side);
    Ok(Mat::from_fn(side, side, |i, j| {
        let mut acc = 0.0;
        for a in 0..fr {
            for b in 0..fc {
                acc += img.get(i * fr + a, j * fc + b);
            }
        }
        acc / (fr * fc) as f64
    }))
}

impl ParametricFamily for DeblurFamily {
    fn id(&self) -> FamilyId {
        FamilyId::Deblurring
    }
    fn param_dim(&self) -> usize {
        self.a.rows
    }
    fn solution_dim(&self) -> usize {
        self.a.cols
    }
    fn sample(&self, index: u64) -> Instance {
        let mut s = self.stream.derive("instance", index);
        let y = self.image_with(&mut s);
        let mut x = self.blur(&y);
        for v in x.iter_mut() {
            *v += self.spec.noise_std * s.normal();
        }
        Instance { x, truth: None }
    }
    fn solve(&self, x: &[f64]) -> Result<Option<Vec<f64>>> {
        self.operator.solve(x, SOLVE_TOL, SOLVE_MAX_ITER).map(Some)
    }
}
