//! Cartesian parameter sweeps over paired runs.

use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, HarnessResult};
use crate::experiment::{run_pair, write};
use crate::report::{metrics_csv, summarize};

#[derive(Clone, Debug, PartialEq)]
pub struct Vary {
    pub key: String,
    pub values: Vec<String>,
}

impl std::str::FromStr for Vary {
    type Err = HarnessError;

    /// `section.key=v1,v2,...`
    fn from_str(s: &str) -> HarnessResult<Self> {
        let (key, vals) = s
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("--vary '{s}' must look like key=v1,v2")))?;
        let values: Vec<String> = vals
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if key.trim().is_empty() || values.is_empty() {
            return Err(HarnessError::Config(format!(
                "--vary '{s}' needs a key and at least one value"
            )));
        }
        Ok(Self {
            key: key.trim().to_string(),
            values,
        })
    }
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Every combination of the varied values, applied to `base`, with a
/// directory label per combination.
pub fn expand(base: &ExperimentConfig, vary: &[Vary]) -> HarnessResult<Vec<(String, ExperimentConfig)>> {
    let mut combos = vec![(String::new(), base.clone())];
    for v in vary {
        let mut next = Vec::new();
        for (label, cfg) in &combos {
            for value in &v.values {
                let c = cfg.with_override(&v.key, value)?;
                let part = format!("{}={}", v.key, value);
                let l = if label.is_empty() {
                    part
                } else {
                    format!("{label}_{part}")
                };
                next.push((l, c));
            }
        }
        combos = next;
    }
    for (label, cfg) in &mut combos {
        cfg.run.name = format!("{}[{}]", base.run.name, label);
    }
    Ok(combos)
}

/// Runs each combination as a pair under `out/<label>` and writes a joint
/// `metrics.csv` with the attacked rows into `out`.
pub fn sweep(base: &ExperimentConfig, vary: &[Vary], out: &Path) -> HarnessResult<Vec<PathBuf>> {
    if vary.is_empty() {
        return Err(HarnessError::Config("sweep needs at least one --vary".into()));
    }
    let combos = expand(base, vary)?;
    let mut attacked = Vec::new();
    for (label, cfg) in &combos {
        log::info!("sweep: {label}");
        let (_, a) = run_pair(cfg, &out.join(slug(label)))?;
        attacked.push(a);
    }
    let rows = attacked
        .iter()
        .map(|p| summarize(p))
        .collect::<HarnessResult<Vec<_>>>()?;
    write(&out.join("metrics.csv"), &metrics_csv(&rows))?;
    Ok(attacked)
}
