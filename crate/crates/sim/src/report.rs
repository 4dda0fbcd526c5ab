//! Metrics table, plots and PCA projection over finished runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use gradamp::metrics::{avg_asr, avg_ta_loss, negative_pulse, MonitorWindow, RoundRecord};

use crate::error::{HarnessError, HarnessResult};
use crate::experiment::write;
use crate::manifest::Manifest;
use crate::pca::pca2;
use crate::plot::{line_chart, Series};

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub run_id: String,
    pub defense: String,
    pub attack: String,
    pub avg_ta_loss: Option<f64>,
    pub avg_asr: Option<f64>,
    pub negative_pulse: Option<f64>,
    pub heterogeneity: Option<f64>,
    pub records: Vec<RoundRecord>,
}

fn runtime(msg: String) -> HarnessError {
    HarnessError::Runtime(msg)
}

pub fn parse_rounds_csv(text: &str) -> HarnessResult<Vec<RoundRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || runtime(format!("rounds.csv line {}: malformed '{line}'", n + 1));
        if f.len() != 3 {
            return Err(bad());
        }
        out.push(RoundRecord {
            round: f[0].parse().map_err(|_| bad())?,
            test_accuracy: f[1].parse().map_err(|_| bad())?,
            asr: if f[2].is_empty() {
                None
            } else {
                Some(f[2].parse().map_err(|_| bad())?)
            },
        });
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> HarnessResult<Vec<RoundRecord>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| runtime(format!("missing record file {}: {e}", path.display())))?;
    parse_rounds_csv(&text)
}

fn num<T: std::str::FromStr>(m: &Manifest, key: &str) -> HarnessResult<T> {
    m.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| runtime(format!("manifest lacks a valid '{key}'")))
}

/// Reads a manifest and computes its metrics row. ℒ needs a `baseline`
/// manifest (the clean twin); S needs ASR records.
pub fn summarize(path: &Path) -> HarnessResult<RunSummary> {
    let m = Manifest::load(path)?;
    let records = read_records(
        &m.path("records")
            .ok_or_else(|| runtime(format!("{}: no records entry", path.display())))?,
    )?;
    let rounds: usize = num(&m, "rounds")?;
    let start: usize = num(&m, "start_round")?;
    let attack = m.get("attack").unwrap_or("none").to_string();
    let window = MonitorWindow { r0: start, r1: rounds };
    let in_window = start <= rounds && records.iter().any(|r| window.contains(r.round));

    let avg_ta_loss = match m.path("baseline") {
        Some(b) if in_window => {
            let bm = Manifest::load(&b)?;
            let clean = read_records(
                &bm.path("records")
                    .ok_or_else(|| runtime(format!("{}: no records entry", b.display())))?,
            )?;
            Some(avg_ta_loss(&clean, &records, window).map_err(|e| runtime(e.to_string()))?)
        }
        _ => None,
    };
    let has_asr = records.iter().any(|r| r.asr.is_some());
    let avg_asr = if has_asr && in_window {
        Some(avg_asr(&records, window).map_err(|e| runtime(e.to_string()))?)
    } else {
        None
    };
    let pulse = (attack != "none" && start <= rounds).then(|| negative_pulse(&records, start));
    Ok(RunSummary {
        run_id: m.get("run_id").unwrap_or("run").to_string(),
        defense: m.get("defense").unwrap_or("").to_string(),
        attack,
        avg_ta_loss,
        avg_asr,
        negative_pulse: pulse,
        heterogeneity: m
            .get("heterogeneity")
            .and_then(|v| v.parse().ok())
            .filter(|v: &f64| v.is_finite()),
        records,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(rows: &[RunSummary]) -> String {
    let mut s = String::from("run_id,defense,attack,avg_ta_loss,avg_asr,negative_pulse,heterogeneity\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.run_id,
            r.defense,
            r.attack,
            cell(r.avg_ta_loss),
            cell(r.avg_asr),
            cell(r.negative_pulse),
            cell(r.heterogeneity)
        );
    }
    s
}

/// PCA rows for one run's amplified dump: `(client, malicious, pc1, pc2)`.
pub fn project_amplified(m: &Manifest) -> HarnessResult<Vec<(usize, bool, [f64; 2])>> {
    let Some(path) = m.path("amplified") else {
        return Ok(Vec::new());
    };
    let text = std::fs::read_to_string(&path).map_err(|e| runtime(format!("missing {}: {e}", path.display())))?;
    let mut by_client: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || runtime(format!("{} line {}: malformed", path.display(), n + 1));
        if f.len() != 3 {
            return Err(bad());
        }
        let c: usize = f[0].parse().map_err(|_| bad())?;
        by_client.entry(c).or_default().push(f[2].parse().map_err(|_| bad())?);
    }
    let malicious: Vec<usize> = m
        .get("malicious")
        .unwrap_or("")
        .split_whitespace()
        .filter_map(|v| v.parse().ok())
        .collect();
    let clients: Vec<usize> = by_client.keys().copied().collect();
    let rows: Vec<Vec<f64>> = by_client.into_values().collect();
    if rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(runtime(format!(
            "{}: clients have different vector lengths",
            path.display()
        )));
    }
    let proj = pca2(&rows);
    Ok(clients
        .into_iter()
        .zip(proj)
        .map(|(c, p)| (c, malicious.contains(&c), p))
        .collect())
}

/// Writes `metrics.csv`, `ta.svg`, `asr.svg` and, when any run dumped
/// amplified vectors, `pca.csv` into `out`.
pub fn report(manifests: &[PathBuf], out: &Path) -> HarnessResult<Vec<RunSummary>> {
    if manifests.is_empty() {
        return Err(HarnessError::Config("report needs at least one manifest".into()));
    }
    let rows: Vec<RunSummary> = manifests.iter().map(|p| summarize(p)).collect::<HarnessResult<_>>()?;
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    write(&out.join("metrics.csv"), &metrics_csv(&rows))?;

    let ta: Vec<Series> = rows
        .iter()
        .map(|r| Series {
            label: r.run_id.clone(),
            points: r.records.iter().map(|x| (x.round as f64, x.test_accuracy)).collect(),
        })
        .collect();
    write(
        &out.join("ta.svg"),
        &line_chart("Test accuracy", "round", "accuracy", &ta),
    )?;
    let asr: Vec<Series> = rows
        .iter()
        .filter(|r| r.records.iter().any(|x| x.asr.is_some()))
        .map(|r| Series {
            label: r.run_id.clone(),
            points: r
                .records
                .iter()
                .filter_map(|x| x.asr.map(|a| (x.round as f64, a)))
                .collect(),
        })
        .collect();
    write(
        &out.join("asr.svg"),
        &line_chart("Attack success rate", "round", "ASR", &asr),
    )?;

    let mut pca = String::new();
    for (p, r) in manifests.iter().zip(&rows) {
        let m = Manifest::load(p)?;
        for (c, bad, [x, y]) in project_amplified(&m)? {
            let _ = writeln!(pca, "{},{c},{},{x},{y}", r.run_id, u8::from(bad));
        }
    }
    if !pca.is_empty() {
        write(
            &out.join("pca.csv"),
            &format!("run_id,client_id,malicious,pc1,pc2\n{pca}"),
        )?;
    }
    Ok(rows)
}
