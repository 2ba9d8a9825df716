mod common;

use common::{random_spd, random_vec};
use fpcert::fixed_point::*;
use fpcert::linalg::{norm2, Mat};
use fpcert::problems::*;
use fpcert::rng::Stream;
use fpcert::solvers::{gd_operator, optimal_gd_step};
use fpcert::Error;
use proptest::prelude::*;

struct Identity(usize);
impl FixedPointOperator for Identity {
    fn dim(&self) -> usize {
        self.0
    }
    fn apply(&self, z: &[f64], _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(z);
    }
}

struct Halve;
impl FixedPointOperator for Halve {
    fn dim(&self) -> usize {
        1
    }
    fn apply(&self, z: &[f64], _x: &[f64], out: &mut [f64]) {
        out[0] = 0.5 * z[0];
    }
}

struct Ones;
impl WarmStart for Ones {
    fn init(&self, x: &[f64]) -> Vec<f64> {
        vec![1.0; x.len().max(1)]
    }
}

fn inst(x: Vec<f64>) -> Instance {
    Instance { x, truth: None }
}

#[test]
fn identity_trace_is_zero() {
    let insts = vec![inst(vec![0.3, -1.0]), inst(vec![2.0, 0.5])];
    let t = run_trace(&Identity(2), &insts, Initialization::WarmStart(&Ones), 6, MetricId::FpResidual, NonFinitePolicy::Abort).unwrap();
    assert!(t.values.iter().all(|&v| v == 0.0));
}

#[test]
fn halving_contraction_trace() {
    let t = run_trace(&Halve, &[inst(vec![0.0])], Initialization::WarmStart(&Ones), 10, MetricId::FpResidual, NonFinitePolicy::Abort).unwrap();
    for k in 0..=10 {
        assert_eq!(t.get(0, 0, k), 0.5f64.powi(k as i32 + 1));
    }
}

#[test]
fn gd_trace_matches_straight_loop() {
    let mut s = Stream::new(3);
    let p = random_spd(5, 1.0, &mut s);
    let op = gd_operator(&p, optimal_gd_step(&p)).unwrap();
    let c = random_vec(5, &mut s);
    let t = run_trace(&op, &[inst(c.clone())], Initialization::Zero, 25, MetricId::FpResidual, NonFinitePolicy::Abort).unwrap();
    let mut z = vec![0.0; 5];
    for k in 0..=25 {
        let mut next = vec![0.0; 5];
        for i in 0..5 {
            let mut pz = 0.0;
            for j in 0..5 {
                pz += p.get(i, j) * z[j];
            }
            next[i] = z[i] - op.gamma * (pz + c[i]);
        }
        let r: f64 = next.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!((t.get(0, 0, k) - r).abs() <= 1e-14 * r.max(1.0), "k={k}");
        z = next;
    }
}

struct Blowup;
impl FixedPointOperator for Blowup {
    fn dim(&self) -> usize {
        1
    }
    fn apply(&self, z: &[f64], _x: &[f64], out: &mut [f64]) {
        out[0] = z[0] * 1e100;
    }
}

#[test]
fn non_finite_policies() {
    let insts = [inst(vec![0.0])];
    let e = run_trace(&Blowup, &insts, Initialization::WarmStart(&Ones), 5, MetricId::FpResidual, NonFinitePolicy::Abort);
    assert!(matches!(e, Err(Error::NonFinite(_))));
    let t = run_trace(&Blowup, &insts, Initialization::WarmStart(&Ones), 5, MetricId::FpResidual, NonFinitePolicy::CountAsFailure).unwrap();
    assert!(t.get(0, 0, 0).is_finite());
    assert_eq!(t.get(0, 0, 5), f64::INFINITY);
    assert_eq!(empirical_risk(&t, 5, 1e300), 1.0);
}

#[test]
fn metric_examples() {
    let t = [1.0, -2.0, 0.5];
    assert_eq!(metric_value(MetricId::Mse, &t, &[], Some(&t)).unwrap(), 0.0);
    assert_eq!(nmse_db(&t, &t).unwrap(), NMSE_FLOOR_DB);
    let z = [0.0, 0.0, 0.0];
    assert!(nmse_db(&z, &t).unwrap().abs() < 1e-12);
    assert!(matches!(nmse_db(&t, &[0.0; 3]), Err(Error::Domain(_))));
    assert!(metric_value(MetricId::Nmse, &t, &[], None).is_err());
    let mut s = Stream::new(8);
    let a = random_vec(6, &mut s);
    let b = random_vec(6, &mut s);
    let num: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    assert!((nmse_db(&a, &b).unwrap() - 10.0 * (num / den).log10()).abs() < 1e-12);
    assert!((metric_value(MetricId::Mse, &a, &[], Some(&b)).unwrap() - num).abs() < 1e-12);
    assert!((metric_value(MetricId::FpResidual, &a, &b, None).unwrap() - num.sqrt()).abs() < 1e-12);
}

#[test]
fn empirical_risk_examples() {
    let mut t = TraceTensor::zeros(MetricId::Mse, 4, 1, 1);
    for i in 0..4 {
        t.set(i, 0, 1, i as f64);
    }
    assert_eq!(empirical_risk(&t, 1, 10.0), 0.0);
    assert_eq!(empirical_risk(&t, 1, 2.0), 0.5);
    assert_eq!(empirical_risk(&t, 1, 0.0), 1.0);
}

#[test]
fn classical_quantile_confidence() {
    let mut t = TraceTensor::zeros(MetricId::FpResidual, 1000, 1, 2);
    let mut s = Stream::new(1);
    for v in t.values.iter_mut() {
        *v = s.uniform();
    }
    let tol = MetricId::FpResidual.default_grid().values();
    assert_eq!(tol.len(), 81);
    let c = certify_classical(&t, &tol, 1e-4, &[0.5, 0.9], None).unwrap();
    assert!(c.quantiles.iter().all(|q| format!("{:.10}", q.confidence) == "0.9919000000"));
    assert!(c.certificates.iter().all(|q| q.confidence == 1.0 - 1e-4));
    assert_eq!(c.certificates.len(), 3 * 81);
    let many: Vec<f64> = (0..10_001).map(|i| i as f64).collect();
    assert!(certify_classical(&t, &many, 1e-4, &[0.5], None).is_err());
}

#[test]
fn trace_files_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = TraceTensor::zeros(MetricId::Nmse, 3, 2, 4);
    let mut s = Stream::new(2);
    for v in t.values.iter_mut() {
        *v = s.normal() * 10.0;
    }
    t.values[5] = f64::INFINITY;
    let bin = dir.path().join("t.bin");
    t.save(&bin).unwrap();
    let bytes = std::fs::read(&bin).unwrap();
    assert_eq!(&bytes[0..4], b"FPTR");
    assert_eq!(bytes.len(), 36 + 3 * 2 * 5 * 8);
    assert_eq!(TraceTensor::read_binary(&bytes[..]).unwrap(), t);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(TraceTensor::read_binary(&bad[..]), Err(Error::Parse { offset: 0, .. })));
    assert!(matches!(TraceTensor::read_binary(&bytes[..bytes.len() - 3]), Err(Error::Parse { .. })));
    let csv = dir.path().join("t.csv");
    t.save(&csv).unwrap();
    let back = TraceTensor::read_csv(MetricId::Nmse, std::fs::File::open(&csv).unwrap()).unwrap();
    assert_eq!((back.n, back.h, back.k_max), (3, 2, 4));
    for (a, b) in back.values.iter().zip(&t.values) {
        assert!(a == b || (a - b).abs() <= 1e-11 * b.abs());
    }
}

#[test]
fn sparse_coding_family_properties() {
    let fam = SparseCodingFamily::new(SparseCodingSpec { m: 32, n: 64, sparsity_keep_prob: 0.1, snr_db: 40.0 }, 5);
    let d = &fam.dictionary;
    for j in 0..64 {
        let nrm = (0..32).map(|i| d.get(i, j).powi(2)).sum::<f64>().sqrt();
        assert!((nrm - 1.0).abs() < 1e-12);
    }
    let insts = fam.sample_range(0, 1600);
    let total = 1600 * 64;
    let nz = insts.iter().flat_map(|i| i.truth.as_ref().unwrap()).filter(|&&v| v != 0.0).count();
    let frac = nz as f64 / total as f64;
    // resampling all-zero codes biases the rate up by at most ~0.1^64
    assert!((frac - 0.1).abs() < 4.0 * (0.09 / total as f64).sqrt(), "{frac}");
    let mut snr = 0.0;
    for inst in insts.iter().take(1000) {
        let mut clean = vec![0.0; 32];
        d.matvec(inst.truth.as_ref().unwrap(), &mut clean);
        let sig: f64 = clean.iter().map(|v| v * v).sum();
        let noise: f64 = clean.iter().zip(&inst.x).map(|(a, b)| (a - b).powi(2)).sum();
        snr += 10.0 * (sig / noise).log10();
    }
    snr /= 1000.0;
    assert!((snr - 40.0).abs() < 0.5, "{snr}");
    assert_eq!(fam.sample(17), insts[17]);
}

#[test]
fn qp_family_properties() {
    let fam = QpFamily::new(QpSpec { n: 20 }, 9);
    let (mx, mn) = fam.p_diag.iter().fold((0.0f64, f64::MAX), |(a, b), &v| (a.max(v), b.min(v)));
    assert_eq!(mx / mn, 100.0);
    let mut lo = f64::MAX;
    let mut hi = f64::MIN;
    for i in 0..10_000 {
        let c = fam.sample(i).x[0];
        lo = lo.min(c);
        hi = hi.max(c);
    }
    assert!(lo >= -1e5 && hi <= 1e5 && hi - lo > 1.5e5);
    let inst = fam.sample(3);
    let z = inst.truth.unwrap();
    for i in 0..20 {
        assert!((fam.p_diag[i] * z[i] + inst.x[i]).abs() < 1e-9);
    }
}

fn conv2d(img: &[f64], side: usize, size: usize) -> Vec<f64> {
    let k = gaussian_kernel(size);
    let mut out = vec![0.0; side * side];
    for r in 0..side {
        for c in 0..side {
            let mut acc = 0.0;
            for &(or, wr) in &k {
                for &(oc, wc) in &k {
                    let (rr, cc) = (r as isize + or, c as isize + oc);
                    if rr >= 0 && cc >= 0 && (rr as usize) < side && (cc as usize) < side {
                        acc += wr * wc * img[rr as usize * side + cc as usize];
                    }
                }
            }
            out[r * side + c] = acc;
        }
    }
    out
}

#[test]
fn deblur_blur_matches_convolution() {
    let fam = DeblurFamily::new(DeblurSpec { side: 12, blur_size: 8, noise_std: 1e-3, rho: 1e-4, image_source: ImageSource::Synthetic }, 1).unwrap();
    let mut s = Stream::new(12);
    for _ in 0..5 {
        let img: Vec<f64> = (0..144).map(|_| s.uniform()).collect();
        let a = fam.blur(&img);
        let b = conv2d(&img, 12, 8);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-13);
        }
    }
    let k: f64 = gaussian_kernel(8).iter().map(|t| t.1).sum();
    assert!((k - 1.0).abs() < 1e-15);
}

#[test]
fn deblur_noiseless_recovers_image() {
    let fam = DeblurFamily::new(DeblurSpec { side: 8, blur_size: 2, noise_std: 0.0, rho: 0.0, image_source: ImageSource::Synthetic }, 1).unwrap();
    let mut s = Stream::new(13);
    let img: Vec<f64> = (0..64).map(|_| s.uniform_range(0.2, 0.8)).collect();
    let x = fam.blur(&img);
    let sol = fam.solve(&x).unwrap().unwrap();
    for (a, b) in sol.iter().zip(&img) {
        assert!((a - b).abs() < 1e-6);
    }
    let inst = fam.sample(4);
    assert_eq!(inst.x.len(), 64);
    assert!(fam.true_image(4).iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn deblur_from_idx_file() {
    let dir = tempfile::tempdir().unwrap();
    let imgs: Vec<Vec<u8>> = (0..3u8).map(|k| (0..16).map(|i| (i * 16 + k) as u8).collect()).collect();
    let path = dir.path().join("imgs.idx");
    std::fs::write(&path, write_idx(&imgs, 4, 4)).unwrap();
    let fam = DeblurFamily::new(DeblurSpec { side: 2, blur_size: 2, noise_std: 0.0, rho: 0.0, image_source: ImageSource::Idx { path: path.clone() } }, 1).unwrap();
    let y = fam.true_image(0);
    assert_eq!(y.len(), 4);
    let bad = DeblurFamily::new(DeblurSpec { side: 3, blur_size: 2, noise_std: 0.0, rho: 0.0, image_source: ImageSource::Idx { path } }, 1);
    assert!(matches!(bad, Err(Error::Domain(_))));
}

#[test]
fn idx_parsing() {
    let bytes = write_idx(&[vec![0, 255, 128, 1]], 2, 2);
    let m = parse_idx(&bytes).unwrap();
    assert_eq!(m.len(), 1);
    assert_eq!(m[0].data[1], 1.0);
    assert_eq!(m[0].data[0], 0.0);
    assert_eq!(m[0], Mat { rows: 2, cols: 2, data: vec![0.0, 1.0, 128.0 / 255.0, 1.0 / 255.0] });
    let mut bad = bytes.clone();
    bad[3] = 0x01;
    assert!(matches!(parse_idx(&bad), Err(Error::Parse { offset: 0, .. })));
    let two = write_idx(&[vec![1; 4], vec![2; 4]], 2, 2);
    // one full image then a partial one: the error points at the second image
    assert!(matches!(parse_idx(&two[..two.len() - 1]), Err(Error::Parse { offset: 20, .. })));
    assert!(matches!(parse_idx(&two[..10]), Err(Error::Parse { .. })));
}

#[test]
fn toy_family_solution_is_parameter() {
    let fam = ToyFamily::new(ToySpec { dim: 3 }, 2);
    let i = fam.sample(0);
    assert_eq!(i.truth.as_ref().unwrap(), &i.x);
    assert!(i.x.iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!(norm2(&i.x) > 0.0);
}

proptest! {
    #[test]
    fn risk_matches_double_loop(seed in 0u64..5000, eps in -1.0f64..3.0) {
        let mut s = Stream::new(seed);
        let (n, h, k) = (1 + s.below(6) as usize, 1 + s.below(4) as usize, 1 + s.below(5) as usize);
        let mut t = TraceTensor::zeros(MetricId::Mse, n, h, k);
        for v in t.values.iter_mut() {
            *v = s.uniform_range(0.0, 2.0);
        }
        for kk in 0..=k {
            let mut fails = 0;
            for i in 0..n {
                for j in 0..h {
                    if t.get(i, j, kk) >= eps {
                        fails += 1;
                    }
                }
            }
            prop_assert_eq!(empirical_risk(&t, kk, eps), fails as f64 / (n * h) as f64);
        }
    }

    #[test]
    fn family_sampling_is_order_free(seed in 0u64..1000, idx in 0u64..500) {
        let fam = SparseCodingFamily::new(SparseCodingSpec { m: 4, n: 8, sparsity_keep_prob: 0.3, snr_db: 20.0 }, seed);
        let batch = fam.sample_range(idx, 3);
        prop_assert_eq!(&batch[2], &fam.sample(idx + 2));
    }
}
