//! Summaries and two-column plot data re-derived from the files of a run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::{CliError, CliResult};
use crate::output::{write_atomic, write_json, Manifest};
use crate::run::{q_trace_path, CME_CSV, CONFIG_JSON, CONVERGENCE_CSV, DELTA_CSV, DEPENDENCE_JSON, ORACLE_JSON, TAIL_JSON};

pub const REPORT_DIR: &str = "report";

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Summary {
    pub status: String,
    pub rejections: Vec<String>,
    /// Median and maximum over seeds of the final `‖Q_n − Q*‖∞`, recomputed from the Q traces.
    pub final_error_median: Option<f64>,
    pub final_error_max: Option<f64>,
    /// `(n, median ‖Δ(n)‖∞)`.
    pub delta_median: Vec<(u64, f64)>,
    pub c7_hat: Option<f64>,
    pub tail_r2: Option<f64>,
    /// `(m, median TV, mean agreement)`.
    pub cme: Vec<(u64, f64, f64)>,
    pub phi_norm: Option<f64>,
    pub psi_norm: Option<f64>,
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn read(dir: &Path, rel: &str) -> CliResult<String> {
    let p = dir.join(rel);
    std::fs::read_to_string(&p).map_err(|e| CliError::io(p, e))
}

fn read_json(dir: &Path, rel: &str) -> CliResult<Value> {
    serde_json::from_str(&read(dir, rel)?).map_err(|e| CliError::Integrity {
        path: rel.into(),
        msg: e.to_string(),
    })
}

/// Data rows of a CSV as string fields, header skipped.
fn rows(text: &str) -> Vec<Vec<&str>> {
    text.lines().skip(1).filter(|l| !l.trim().is_empty()).map(|l| l.split(',').collect()).collect()
}

fn num<T: std::str::FromStr>(field: &str, file: &str) -> CliResult<T> {
    field.parse().map_err(|_| CliError::Integrity {
        path: file.into(),
        msg: format!("malformed field {field:?}"),
    })
}

fn plot(header: &str, points: impl IntoIterator<Item = (String, f64)>) -> String {
    let mut s = format!("{header}\n");
    for (x, y) in points {
        let _ = writeln!(s, "{x},{y:?}");
    }
    s
}

fn flatten(v: &Value) -> Vec<f64> {
    match v {
        Value::Array(a) => a.iter().flat_map(flatten).collect(),
        Value::Number(n) => vec![n.as_f64().unwrap_or(f64::NAN)],
        _ => Vec::new(),
    }
}

/// Verifies the manifest, then writes `report/summary.{txt,json}` and `report/plot_*.csv`.
pub fn report(dir: &Path) -> CliResult<(Summary, String)> {
    let manifest = Manifest::read(dir)?;
    manifest.verify(dir)?;
    let out = dir.join(REPORT_DIR);
    let mut s = Summary {
        status: format!("{:?}", manifest.status).to_lowercase(),
        rejections: manifest.rejections.iter().map(|r| format!("{}: {}", r.analysis, r.message)).collect(),
        ..Default::default()
    };
    let config = read_json(dir, CONFIG_JSON)?;
    let seeds: Vec<u64> = config["seeds"].as_array().map(|a| a.iter().filter_map(Value::as_u64).collect()).unwrap_or_default();

    if manifest.contains(CONVERGENCE_CSV) && manifest.contains(ORACLE_JSON) {
        let qstar = flatten(&read_json(dir, ORACLE_JSON)?["q_star"]);
        let mut by_n: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        let mut finals = Vec::new();
        for &seed in &seeds {
            let rel = q_trace_path(seed);
            let text = read(dir, &rel)?;
            let mut pts = Vec::new();
            for r in rows(&text) {
                let n: u64 = num(r[0], &rel)?;
                let vals = r[1..].iter().map(|f| num::<f64>(f, &rel)).collect::<CliResult<Vec<_>>>()?;
                let err = vals.iter().zip(&qstar).fold(0.0, |m: f64, (a, b)| m.max((a - b).abs()));
                pts.push((n, err));
                by_n.entry(n).or_default().push(err);
            }
            if let Some(&(_, e)) = pts.last() {
                finals.push(e);
            }
            let body = plot("n,err_inf", pts.into_iter().map(|(n, e)| (n.to_string(), e)));
            write_atomic(&out, &format!("plot_convergence_seed{seed}.csv"), body.as_bytes())?;
        }
        let body = plot("n,median_err_inf", by_n.iter().map(|(n, v)| (n.to_string(), median(v))));
        write_atomic(&out, "plot_convergence_median.csv", body.as_bytes())?;
        if !finals.is_empty() {
            s.final_error_median = Some(median(&finals));
            s.final_error_max = Some(finals.iter().cloned().fold(f64::MIN, f64::max));
        }
    }

    if manifest.contains(DELTA_CSV) {
        let text = read(dir, DELTA_CSV)?;
        let mut by_n: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for r in rows(&text) {
            by_n.entry(num(r[1], DELTA_CSV)?).or_default().push(num(r[2], DELTA_CSV)?);
        }
        s.delta_median = by_n.iter().map(|(n, v)| (*n, median(v))).collect();
        let body = plot("n,median_delta_norm", s.delta_median.iter().map(|(n, d)| (n.to_string(), *d)));
        write_atomic(&out, "plot_delta_median.csv", body.as_bytes())?;
    }

    if manifest.contains(TAIL_JSON) {
        let t = read_json(dir, TAIL_JSON)?;
        s.c7_hat = t["c7_hat"].as_f64();
        s.tail_r2 = t["pooled"]["r2"].as_f64();
        for entry in t["per_n"].as_array().into_iter().flatten() {
            let n = entry["n"].as_u64().unwrap_or(0);
            let xs = flatten(&entry["delta_grid"]);
            let ys = flatten(&entry["tail"]);
            let body = plot("delta,tail_probability", xs.iter().zip(ys).map(|(x, y)| (format!("{x:?}"), y)));
            write_atomic(&out, &format!("plot_tail_n{n}.csv"), body.as_bytes())?;
        }
    }

    if manifest.contains(CME_CSV) {
        let text = read(dir, CME_CSV)?;
        let mut by_m: BTreeMap<u64, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for r in rows(&text) {
            let e = by_m.entry(num(r[0], CME_CSV)?).or_default();
            e.0.push(num(r[2], CME_CSV)?);
            e.1.push(num(r[3], CME_CSV)?);
        }
        s.cme = by_m
            .iter()
            .map(|(m, (tv, ag))| (*m, median(tv), ag.iter().sum::<f64>() / ag.len() as f64))
            .collect();
        let body = plot("m,median_tv", s.cme.iter().map(|(m, tv, _)| (m.to_string(), *tv)));
        write_atomic(&out, "plot_cme_tv.csv", body.as_bytes())?;
    }

    if manifest.contains(DEPENDENCE_JSON) {
        let d = read_json(dir, DEPENDENCE_JSON)?;
        s.phi_norm = d["filtering"]["phi_norm"].as_f64();
        s.psi_norm = d["filtering"]["psi_norm"].as_f64();
    }

    let text = render(&s);
    write_atomic(&out, "summary.txt", text.as_bytes())?;
    write_json(&out, "summary.json", &s)?;
    Ok((s, text))
}

fn render(s: &Summary) -> String {
    let mut t = format!("status: {}\n", s.status);
    for r in &s.rejections {
        let _ = writeln!(t, "rejected: {r}");
    }
    if let (Some(med), Some(max)) = (s.final_error_median, s.final_error_max) {
        let _ = writeln!(t, "final |Q_n - Q*|_inf: median {med:?}, max {max:?}");
    }
    for (n, d) in &s.delta_median {
        let _ = writeln!(t, "median |Delta({n})|_inf: {d:?}");
    }
    if let Some(c) = s.c7_hat {
        let _ = writeln!(t, "tail fit: c7_hat {c:?}, R^2 {:?}", s.tail_r2.unwrap_or(f64::NAN));
    }
    for (m, tv, ag) in &s.cme {
        let _ = writeln!(t, "filter m = {m}: median TV {tv:?}, agreement {ag:?}");
    }
    if let (Some(p), Some(q)) = (s.phi_norm, s.psi_norm) {
        let _ = writeln!(t, "dependence: |Phi|_2 {p:?}, |Psi|_2 {q:?}");
    }
    t
}
