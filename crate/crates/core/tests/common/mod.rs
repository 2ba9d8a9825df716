#![allow(dead_code)]

use fpcert::linalg::Mat;
use fpcert::rng::Stream;

/// kl(q || p) written out directly, independent of the library.
pub fn kl_ref(q: f64, p: f64) -> f64 {
    let a = if q > 0.0 { q * (q / p).ln() } else { 0.0 };
    let b = if q < 1.0 { (1.0 - q) * ((1.0 - q) / (1.0 - p)).ln() } else { 0.0 };
    a + b
}

fn last_within(q: f64, c: f64, lo: f64, hi: f64, cells: usize) -> (f64, f64) {
    let h = (hi - lo) / cells as f64;
    let mut best = 0;
    for i in 0..=cells {
        let p = lo + h * i as f64;
        if p >= 1.0 || kl_ref(q, p) > c {
            break;
        }
        best = i;
    }
    let a = lo + h * best as f64;
    (a, (a + h).min(hi))
}

/// KL inverse by grid scan: the 10^7-point grid on [q, 1] searched in two
/// levels (10^4 coarse cells, 10^3 fine cells each), then the bracketing cell
/// scanned once more with 10^3 points. Returns the midpoint of the last cell.
pub fn kl_inverse_grid(q: f64, c: f64) -> f64 {
    if c <= 0.0 {
        return q;
    }
    let (a, b) = last_within(q, c, q, 1.0, 10_000);
    let (a, b) = last_within(q, c, a, b, 1_000);
    let (a, b) = last_within(q, c, a, b, 1_000);
    0.5 * (a + b)
}

pub fn random_mat(rows: usize, cols: usize, s: &mut Stream) -> Mat {
    Mat::from_fn(rows, cols, |_, _| s.normal())
}

pub fn random_vec(n: usize, s: &mut Stream) -> Vec<f64> {
    (0..n).map(|_| s.normal()).collect()
}

/// Random SPD matrix A'A + shift I.
pub fn random_spd(n: usize, shift: f64, s: &mut Stream) -> Mat {
    let a = random_mat(n, n, s);
    let mut p = a.transpose().mul(&a);
    for i in 0..n {
        p.data[i * n + i] += shift;
    }
    p
}

pub fn binomial_slack(p: f64, trials: usize) -> f64 {
    3.0 * (p * (1.0 - p) / trials as f64).sqrt()
}

pub fn quantile_sorted(v: &mut [f64], q: f64) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[((q * v.len() as f64).ceil() as usize).max(1) - 1]
}

/// Largest violation of 0 in D'(Dz - b) + rho * subdiff ||z||_1.
pub fn lasso_kkt_violation(d: &Mat, b: &[f64], rho: f64, z: &[f64]) -> f64 {
    let mut r = vec![0.0; d.rows];
    d.matvec(z, &mut r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri -= bi;
    }
    let mut g = vec![0.0; d.cols];
    d.matvec_t(&r, &mut g);
    let mut worst: f64 = 0.0;
    for (gi, zi) in g.iter().zip(z) {
        let v = if *zi != 0.0 { (gi + rho * zi.signum()).abs() } else { (gi.abs() - rho).max(0.0) };
        worst = worst.max(v);
    }
    worst
}

/// Box-QP minimizer by enumerating every (lower, upper, free) assignment and
/// keeping the one that satisfies the KKT conditions.
pub fn boxqp_active_set(p: &Mat, q: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    let n = q.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for code in 0..3usize.pow(n as u32) {
        let mut state = vec![0u8; n];
        let mut c = code;
        for s in state.iter_mut() {
            *s = (c % 3) as u8;
            c /= 3;
        }
        let mut u = vec![0.0; n];
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == 2).collect();
        for i in 0..n {
            match state[i] {
                0 => u[i] = lo[i],
                1 => u[i] = hi[i],
                _ => {}
            }
        }
        if !free.is_empty() {
            let sub = Mat::from_fn(free.len(), free.len(), |a, b| p.get(free[a], free[b]));
            let rhs: Vec<f64> = free
                .iter()
                .map(|&i| -(q[i] + (0..n).filter(|j| state[*j] != 2).map(|j| p.get(i, j) * u[j]).sum::<f64>()))
                .collect();
            let inv = sub.spd_inverse().unwrap();
            let mut uf = vec![0.0; free.len()];
            inv.matvec(&rhs, &mut uf);
            for (a, &i) in free.iter().enumerate() {
                u[i] = uf[a];
            }
        }
        let mut g = vec![0.0; n];
        p.matvec(&u, &mut g);
        let mut viol: f64 = 0.0;
        for i in 0..n {
            g[i] += q[i];
            viol = viol.max(lo[i] - u[i]).max(u[i] - hi[i]);
            match state[i] {
                0 => viol = viol.max(-g[i]),
                1 => viol = viol.max(g[i]),
                _ => {}
            }
        }
        if best.as_ref().is_none_or(|(v, _)| viol < *v) {
            best = Some((viol, u));
        }
    }
    let (viol, u) = best.unwrap();
    assert!(viol < 1e-9, "no KKT point found ({viol})");
    u
}
