//! Result files: per-round metrics CSV, summary JSON, run manifest.
//!
//! Every float goes through [`fmt_sig6`] so that files are byte-comparable
//! across runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FslError, Result};
use crate::sim::{RoundMetrics, Summary};

/// `%g` with 6 significant digits: fixed notation for exponents in
/// `[-4, 6)`, scientific otherwise, trailing zeros dropped. Ties round to
/// even on the exact binary value.
pub fn fmt_sig6(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let fixed = format!("{v:.*}", (5 - exp) as usize);
        strip_zeros(&fixed).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", strip_zeros(mantissa), exp.abs())
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Parse a value written by [`fmt_sig6`].
pub fn parse_sig6(s: &str) -> Result<f64> {
    match s {
        "nan" => Ok(f64::NAN),
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => s.parse().map_err(|_| FslError::Input(format!("not a number: {s:?}"))),
    }
}

pub fn metrics_header(workers: usize) -> String {
    let mut h = String::from("round,test_error,all_acc,src_acc,asr,agg_wall_time_s");
    for k in 0..workers {
        let _ = write!(h, ",gamma_{k}");
    }
    h
}

/// The per-round CSV. Wall time is machine-dependent, so unless
/// `record_wall_time` is set the column is written as 0 and the measured
/// values go to the separate timing file instead.
pub fn metrics_csv(rounds: &[RoundMetrics], workers: usize, record_wall_time: bool) -> String {
    let mut out = metrics_header(workers);
    out.push('\n');
    for r in rounds {
        let wall = if record_wall_time { r.agg_wall_time } else { 0.0 };
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            r.round,
            fmt_sig6(r.test_error),
            fmt_sig6(r.all_acc),
            fmt_sig6(r.src_acc),
            fmt_sig6(r.asr),
            fmt_sig6(wall)
        );
        for k in 0..workers {
            out.push(',');
            out.push_str(&fmt_sig6(r.gamma.get(k).copied().unwrap_or(0.0)));
        }
        out.push('\n');
    }
    out
}

/// Read a metrics CSV back. The fallback flag is not stored and comes back
/// false.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<RoundMetrics>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| FslError::Input("empty metrics file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let workers = cols
        .len()
        .checked_sub(6)
        .ok_or_else(|| FslError::Input("short metrics header".into()))?;
    if header != metrics_header(workers) {
        return Err(FslError::Input(format!("unexpected metrics header {header:?}")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != cols.len() {
                return Err(FslError::Input(format!(
                    "metrics row {} has {} fields, expected {}",
                    i + 1,
                    f.len(),
                    cols.len()
                )));
            }
            let num = |j: usize| parse_sig6(f[j]);
            Ok(RoundMetrics {
                round: f[0]
                    .parse()
                    .map_err(|_| FslError::Input(format!("bad round index {:?}", f[0])))?,
                test_error: num(1)?,
                all_acc: num(2)?,
                src_acc: num(3)?,
                asr: num(4)?,
                agg_wall_time: num(5)?,
                gamma: (6..f.len()).map(num).collect::<Result<_>>()?,
                fallback: false,
            })
        })
        .collect()
}

pub fn timing_csv(rounds: &[RoundMetrics]) -> String {
    let mut out = String::from("round,agg_wall_time_s,fallback\n");
    for r in rounds {
        let _ = writeln!(out, "{},{},{}", r.round, fmt_sig6(r.agg_wall_time), r.fallback as u8);
    }
    out
}

pub fn summary_json(summary: &Summary) -> String {
    serde_json::to_string_pretty(summary).expect("summary serialises") + "\n"
}

pub const COMPARISON_HEADER: &str = "defense,rounds_averaged,test_error,all_acc,src_acc,asr,mean_agg_wall_time_s";

/// One row per defense for a sweep.
pub fn comparison_csv(summaries: &[Summary]) -> String {
    let mut out = String::from(COMPARISON_HEADER);
    out.push('\n');
    for s in summaries {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.defense,
            s.rounds_averaged,
            fmt_sig6(s.test_error),
            fmt_sig6(s.all_acc),
            fmt_sig6(s.src_acc),
            fmt_sig6(s.asr),
            fmt_sig6(s.mean_agg_wall_time)
        );
    }
    out
}

pub fn config_hash(canonical: &str) -> String {
    Sha256::digest(canonical.as_bytes())
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub version: String,
    pub outputs: Vec<PathBuf>,
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl RunManifest {
    pub fn start(canonical_config: &str, seed: u64) -> Self {
        RunManifest {
            config_hash: config_hash(canonical_config),
            seed,
            started_unix: unix_now(),
            finished_unix: 0.0,
            version: env!("CARGO_PKG_VERSION").to_string(),
            outputs: Vec::new(),
        }
    }
}

/// Create `dir` and prove a file can be written there.
pub fn preflight(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FslError::io(dir, e))?;
    let probe = dir.join(".fsl-write-probe");
    fs::write(&probe, b"").map_err(|e| FslError::io(&probe, e))?;
    fs::remove_file(&probe).map_err(|e| FslError::io(&probe, e))
}

pub fn write_file(path: &Path, contents: &str) -> Result<PathBuf> {
    fs::write(path, contents).map_err(|e| FslError::io(path, e))?;
    Ok(path.to_path_buf())
}

/// The summary as written to disk: the mean wall time is zeroed unless
/// `record_wall_time` is set, for the same reason as the metrics column.
pub fn stored_summary(summary: &Summary, record_wall_time: bool) -> Summary {
    Summary {
        mean_agg_wall_time: if record_wall_time {
            summary.mean_agg_wall_time
        } else {
            0.0
        },
        ..summary.clone()
    }
}

/// Write `<prefix>metrics.csv`, `<prefix>timing.csv` and
/// `<prefix>summary.json` into `dir`.
pub fn write_metrics(
    dir: &Path,
    prefix: &str,
    rounds: &[RoundMetrics],
    summary: &Summary,
    workers: usize,
    record_wall_time: bool,
) -> Result<Vec<PathBuf>> {
    Ok(vec![
        write_file(
            &dir.join(format!("{prefix}metrics.csv")),
            &metrics_csv(rounds, workers, record_wall_time),
        )?,
        write_file(&dir.join(format!("{prefix}timing.csv")), &timing_csv(rounds))?,
        write_file(
            &dir.join(format!("{prefix}summary.json")),
            &summary_json(&stored_summary(summary, record_wall_time)),
        )?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig6_examples() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (0.1, "0.1"),
            (123456.0, "123456"),
            (1234567.0, "1.23457e+06"),
            (0.0001, "0.0001"),
            (0.00001234567, "1.23457e-05"),
            (-2.5, "-2.5"),
            (1.0 / 3.0, "0.333333"),
            (2.0 / 3.0, "0.666667"),
            (999999.5, "1e+06"),
            (0.125, "0.125"),
            (1234565.0, "1.23456e+06"),
            (1234575.0, "1.23458e+06"),
            (f64::NAN, "nan"),
        ];
        for (v, s) in cases {
            assert_eq!(fmt_sig6(v), s, "{v}");
        }
    }

    fn row(r: usize) -> RoundMetrics {
        RoundMetrics {
            round: r,
            test_error: 2.5 / (r + 1) as f64,
            all_acc: 0.1 * r as f64,
            src_acc: 1.0 / 3.0,
            asr: 0.0,
            gamma: vec![1.0, 2.0 / 3.0, 0.0],
            agg_wall_time: 0.00123,
            fallback: false,
        }
    }

    #[test]
    fn three_rounds_four_lines_and_round_trip() {
        let rounds: Vec<_> = (0..3).map(row).collect();
        let text = metrics_csv(&rounds, 3, true);
        assert_eq!(text.lines().count(), 4);
        let back = parse_metrics_csv(&text).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(metrics_csv(&back, 3, true), text);
        assert_eq!(back[1].gamma[1], 0.666667);
        assert!(parse_metrics_csv("round,x\n").is_err());
    }

    #[test]
    fn wall_time_masked_by_default() {
        let text = metrics_csv(&[row(0)], 3, false);
        assert_eq!(text.lines().nth(1).unwrap().split(',').nth(5), Some("0"));
    }

    #[test]
    fn hash_is_stable_hex() {
        let h = config_hash("a = 1\n");
        assert_eq!(h.len(), 64);
        assert_eq!(h, config_hash("a = 1\n"));
        assert_ne!(h, config_hash("a = 2\n"));
    }

    #[test]
    fn preflight_rejects_file_as_dir() {
        let tmp = tempfile::tempdir().unwrap();
        let f = tmp.path().join("plain");
        fs::write(&f, "x").unwrap();
        assert!(preflight(&f.join("sub")).is_err());
        assert!(preflight(&tmp.path().join("ok/nested")).is_ok());
    }
}
