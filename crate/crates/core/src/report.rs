//! CSV writers and readers, plot data and the gnuplot script.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::bounds::{Certificate, Method, QuantileBound};
use crate::error::{Error, Result};
use crate::fixed_point::MetricId;
use crate::training::TrainLogRow;

pub const CERTIFICATES_HEADER: &str = "method,metric,k,epsilon,n_samples,h_samples,empirical,r_bar,bound,confidence";
pub const QUANTILES_HEADER: &str = "metric,k,quantile,epsilon_bound,confidence";
pub const TRAINING_LOG_HEADER: &str = "epoch,sampled_risk,B_value,kl_inverse_term,penalty_term,objective";

/// Formats with 12 significant digits, trimming trailing zeros.
pub fn fmt_sig(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..12).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let s = format!("{v:.11e}");
        let (mant, e) = s.split_once('e').unwrap();
        let mant = if mant.contains('.') { mant.trim_end_matches('0').trim_end_matches('.') } else { mant };
        format!("{mant}e{e}")
    }
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.parse().map_err(|_| Error::Parse { offset: line, msg: format!("bad number `{s}`") })
}

fn parse_usize(s: &str, line: usize) -> Result<usize> {
    s.parse().map_err(|_| Error::Parse { offset: line, msg: format!("bad count `{s}`") })
}

fn parse_metric(s: &str, line: usize) -> Result<MetricId> {
    MetricId::parse(s).ok_or_else(|| Error::Parse { offset: line, msg: format!("unknown metric `{s}`") })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Data lines of a CSV after checking the header. Offsets in errors are line numbers.
fn csv_rows<'a>(text: &'a str, header: &str) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == header => {}
        other => {
            return Err(Error::Parse { offset: 1, msg: format!("expected header `{header}`, found {other:?}") });
        }
    }
    let width = header.split(',').count();
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != width {
            return Err(Error::Parse { offset: i + 2, msg: format!("expected {width} fields, found {}", cols.len()) });
        }
        out.push((i + 2, cols));
    }
    Ok(out)
}

pub fn certificates_csv(certs: &[Certificate]) -> String {
    let mut s = String::from(CERTIFICATES_HEADER);
    s.push('\n');
    for c in certs {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            c.method,
            c.metric,
            c.k,
            fmt_sig(c.epsilon),
            c.n_samples,
            c.h_samples,
            fmt_sig(c.empirical),
            fmt_sig(c.r_bar),
            fmt_sig(c.bound),
            fmt_sig(c.confidence)
        );
    }
    s
}

pub fn parse_certificates(text: &str) -> Result<Vec<Certificate>> {
    csv_rows(text, CERTIFICATES_HEADER)?
        .into_iter()
        .map(|(ln, c)| {
            Ok(Certificate {
                method: Method::parse(c[0]).ok_or_else(|| Error::Parse { offset: ln, msg: format!("unknown method `{}`", c[0]) })?,
                metric: parse_metric(c[1], ln)?,
                k: parse_usize(c[2], ln)?,
                epsilon: parse_f64(c[3], ln)?,
                n_samples: parse_usize(c[4], ln)?,
                h_samples: parse_usize(c[5], ln)?,
                empirical: parse_f64(c[6], ln)?,
                r_bar: parse_f64(c[7], ln)?,
                bound: parse_f64(c[8], ln)?,
                confidence: parse_f64(c[9], ln)?,
            })
        })
        .collect()
}

/// Rows without a qualifying tolerance are omitted.
pub fn quantiles_csv(rows: &[QuantileBound]) -> String {
    let mut s = String::from(QUANTILES_HEADER);
    s.push('\n');
    for q in rows {
        if let Some(e) = q.epsilon_bound {
            let _ = writeln!(s, "{},{},{},{},{}", q.metric, q.k, fmt_sig(q.quantile), fmt_sig(e), fmt_sig(q.confidence));
        }
    }
    s
}

pub fn parse_quantiles(text: &str) -> Result<Vec<QuantileBound>> {
    csv_rows(text, QUANTILES_HEADER)?
        .into_iter()
        .map(|(ln, c)| {
            Ok(QuantileBound {
                metric: parse_metric(c[0], ln)?,
                k: parse_usize(c[1], ln)?,
                quantile: parse_f64(c[2], ln)?,
                epsilon_bound: Some(parse_f64(c[3], ln)?),
                confidence: parse_f64(c[4], ln)?,
            })
        })
        .collect()
}

pub fn training_log_csv(rows: &[TrainLogRow]) -> String {
    let mut s = String::from(TRAINING_LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epoch,
            fmt_sig(r.sampled_risk),
            fmt_sig(r.b_value),
            fmt_sig(r.kl_inverse_term),
            fmt_sig(r.penalty_term),
            fmt_sig(r.objective)
        );
    }
    s
}

pub fn parse_training_log(text: &str) -> Result<Vec<TrainLogRow>> {
    csv_rows(text, TRAINING_LOG_HEADER)?
        .into_iter()
        .map(|(ln, c)| {
            Ok(TrainLogRow {
                epoch: parse_usize(c[0], ln)?,
                sampled_risk: parse_f64(c[1], ln)?,
                b_value: parse_f64(c[2], ln)?,
                kl_inverse_term: parse_f64(c[3], ln)?,
                penalty_term: parse_f64(c[4], ln)?,
                objective: parse_f64(c[5], ln)?,
            })
        })
        .collect()
}

/// Writes certificates.csv and quantiles.csv into `dir`.
pub fn write_certificates(certs: &[Certificate], quantiles: &[QuantileBound], dir: &Path) -> Result<()> {
    if certs.is_empty() {
        return Err(Error::Precondition("no certificates to write".into()));
    }
    fs::create_dir_all(dir)?;
    write_file(&dir.join("certificates.csv"), &certificates_csv(certs))?;
    write_file(&dir.join("quantiles.csv"), &quantiles_csv(quantiles))
}

pub fn write_training_log(rows: &[TrainLogRow], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_file(&dir.join("training_log.csv"), &training_log_csv(rows))
}

/// A worst-case envelope curve (k, value) for one metric.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub metric: MetricId,
    pub points: Vec<(usize, f64)>,
}

fn tag(v: f64) -> String {
    fmt_sig(v).replace('-', "m").replace('.', "p")
}

fn dat(points: &[(usize, f64)]) -> String {
    let mut s = String::from("# k value\n");
    for (k, v) in points {
        let _ = writeln!(s, "{k} {}", fmt_sig(*v));
    }
    s
}

/// Tolerance indices that get a success-rate curve: every tenth grid point and the last.
fn curve_tolerances(eps: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = eps.iter().step_by(10).copied().collect();
    if let Some(&last) = eps.last() {
        if out.last() != Some(&last) {
            out.push(last);
        }
    }
    out
}

/// Writes the data behind success-rate-vs-k and quantile-vs-k plots plus a
/// gnuplot script. Returns the written file names.
pub fn emit_plotdata(
    certs: &[Certificate],
    quantiles: &[QuantileBound],
    worst_case: &[Curve],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    if certs.is_empty() {
        return Err(Error::Precondition("no certificates to plot".into()));
    }
    let pdir = dir.join("plots");
    fs::create_dir_all(&pdir)?;
    let mut files = Vec::new();
    let mut script = String::from("set terminal pngcairo size 900,600\nset key outside\nset xlabel 'k'\n");
    let mut metrics: Vec<MetricId> = certs.iter().map(|c| c.metric).collect();
    metrics.sort();
    metrics.dedup();
    for m in metrics {
        let mut eps: Vec<f64> = certs.iter().filter(|c| c.metric == m).map(|c| c.epsilon).collect();
        eps.sort_by(|a, b| a.total_cmp(b));
        eps.dedup();
        let mut plot_lines = Vec::new();
        for e in curve_tolerances(&eps) {
            let mut pts: Vec<(usize, f64)> =
                certs.iter().filter(|c| c.metric == m && c.epsilon == e).map(|c| (c.k, 1.0 - c.bound)).collect();
            pts.sort_by_key(|p| p.0);
            let name = format!("success_{m}_eps{}.dat", tag(e));
            write_file(&pdir.join(&name), &dat(&pts))?;
            plot_lines.push(format!("'{name}' using 1:2 with lines title 'eps = {}'", fmt_sig(e)));
            files.push(pdir.join(name));
        }
        let _ = writeln!(script, "set output 'success_{m}.png'\nset ylabel 'certified success rate'");
        let _ = writeln!(script, "plot {}", plot_lines.join(", \\\n     "));
        let mut qs: Vec<f64> = quantiles.iter().filter(|q| q.metric == m).map(|q| q.quantile).collect();
        qs.sort_by(|a, b| a.total_cmp(b));
        qs.dedup();
        let mut qlines = Vec::new();
        for q in qs {
            let mut pts: Vec<(usize, f64)> = quantiles
                .iter()
                .filter(|r| r.metric == m && r.quantile == q)
                .filter_map(|r| r.epsilon_bound.map(|e| (r.k, e)))
                .collect();
            pts.sort_by_key(|p| p.0);
            let name = format!("quantile_{m}_q{}.dat", tag(q));
            write_file(&pdir.join(&name), &dat(&pts))?;
            qlines.push(format!("'{name}' using 1:2 with lines title 'q = {}'", fmt_sig(q)));
            files.push(pdir.join(name));
        }
        for c in worst_case.iter().filter(|c| c.metric == m) {
            let name = format!("worst_case_{m}.dat");
            write_file(&pdir.join(&name), &dat(&c.points))?;
            qlines.push(format!("'{name}' using 1:2 with lines dashtype 2 title 'worst case'"));
            files.push(pdir.join(name));
        }
        if !qlines.is_empty() {
            let log = if m == MetricId::Nmse { "unset logscale y" } else { "set logscale y" };
            let _ = writeln!(script, "set output 'quantile_{m}.png'\nset ylabel '{m}'\n{log}");
            let _ = writeln!(script, "plot {}\nunset logscale y", qlines.join(", \\\n     "));
        }
    }
    write_file(&pdir.join("plots.gp"), &script)?;
    files.push(pdir.join("plots.gp"));
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmt_sig_cases() {
        assert_eq!(fmt_sig(0.5), "0.5");
        assert_eq!(fmt_sig(1.0 / 3.0), "0.333333333333");
        assert_eq!(fmt_sig(-80.0), "-80");
        assert_eq!(fmt_sig(1e-7), "1e-7");
        assert_eq!(fmt_sig(f64::INFINITY), "inf");
    }

    #[test]
    fn header_checked() {
        assert!(parse_quantiles("metric,k\n").is_err());
        assert!(parse_quantiles(&format!("{QUANTILES_HEADER}\n")).unwrap().is_empty());
    }
}
