use crate::error::{Error, Result};
use crate::linalg::{dot, Mat};

/// Closed-form minimizer of ||W^T D||_F^2 subject to w_i^T d_i = 1 for every
/// column i: w_i = (D D^T)^{-1} d_i / (d_i^T (D D^T)^{-1} d_i).
pub fn datafree_w(d: &Mat) -> Result<Mat> {
    let (m, n) = (d.rows, d.cols);
    let ddt = d.mul(&d.transpose());
    let g_inv = ddt
        .spd_inverse()
        .map_err(|_| Error::Linalg("D D^T is singular; D needs full row rank".into()))?;
    let mut w = Mat::zeros(m, n);
    let mut col = vec![0.0; m];
    let mut u = vec![0.0; m];
    for i in 0..n {
        for r in 0..m {
            col[r] = d.get(r, i);
        }
        g_inv.matvec(&col, &mut u);
        let den = dot(&col, &u);
        if !(den > 0.0) {
            return Err(Error::Linalg(format!("column {i} has d_i^T (D D^T)^-1 d_i = {den}")));
        }
        for r in 0..m {
            w.set(r, i, u[r] / den);
        }
    }
    Ok(w)
}
