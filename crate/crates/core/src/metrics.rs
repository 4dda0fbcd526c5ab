//! Evaluation quantities: averaged accuracy loss, attack success rate,
//! negative pulse and dataset heterogeneity.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::ModelParams;
use crate::Scalar;

/// Rounds after the attack start inspected by [`negative_pulse`].
pub const PULSE_WINDOW: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub test_accuracy: f64,
    /// Attack success rate, when a triggered test set exists.
    pub asr: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MonitorWindow {
    pub r0: usize,
    pub r1: usize,
}

impl MonitorWindow {
    pub fn contains(&self, round: usize) -> bool {
        round >= self.r0 && round <= self.r1
    }
}

fn metric<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Metric(msg.into()))
}

/// Mean of `a_r − â_r` over the checkpoints inside the window.
pub fn avg_ta_loss(clean: &[RoundRecord], attacked: &[RoundRecord], window: MonitorWindow) -> Result<f64> {
    let c: Vec<&RoundRecord> = clean.iter().filter(|r| window.contains(r.round)).collect();
    let a: Vec<&RoundRecord> = attacked.iter().filter(|r| window.contains(r.round)).collect();
    if c.is_empty() {
        return metric(format!("no checkpoints in rounds {}..={}", window.r0, window.r1));
    }
    let mut rc: Vec<usize> = c.iter().map(|r| r.round).collect();
    let mut ra: Vec<usize> = a.iter().map(|r| r.round).collect();
    rc.sort_unstable();
    ra.sort_unstable();
    if rc != ra {
        return metric("clean and attacked runs have different checkpoints");
    }
    let total: f64 = c
        .iter()
        .map(|cr| {
            let ar = a.iter().find(|r| r.round == cr.round).unwrap();
            cr.test_accuracy - ar.test_accuracy
        })
        .sum();
    Ok(total / c.len() as f64)
}

/// Fraction of the triggered set classified as `target`.
pub fn asr<S: Scalar>(model: &ModelParams<S>, triggered: &Dataset<S>, target: usize) -> Result<f64> {
    if triggered.is_empty() {
        return metric("triggered set is empty");
    }
    let idx: Vec<usize> = (0..triggered.len()).collect();
    let (x, _) = triggered.batch(&idx);
    let pred = model.predict(&x)?;
    Ok(pred.iter().filter(|&&p| p == target).count() as f64 / pred.len() as f64)
}

/// Mean `s_r` over checkpoints inside the window.
pub fn avg_asr(records: &[RoundRecord], window: MonitorWindow) -> Result<f64> {
    let vals: Vec<f64> = records
        .iter()
        .filter(|r| window.contains(r.round))
        .map(|r| {
            r.asr
                .ok_or_else(|| Error::Metric(format!("round {} has no ASR", r.round)))
        })
        .collect::<Result<_>>()?;
    if vals.is_empty() {
        return metric(format!("no checkpoints in rounds {}..={}", window.r0, window.r1));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Largest drop below the best earlier accuracy among checkpoints in
/// `[start, start + PULSE_WINDOW]`; zero when accuracy never dips.
pub fn negative_pulse(attacked: &[RoundRecord], start_round: usize) -> f64 {
    let mut recs: Vec<&RoundRecord> = attacked.iter().collect();
    recs.sort_by_key(|r| r.round);
    let mut best_before: Option<f64> = None;
    let mut pulse = 0.0f64;
    for r in recs {
        if r.round >= start_round && r.round <= start_round + PULSE_WINDOW {
            if let Some(b) = best_before {
                pulse = pulse.max(b - r.test_accuracy);
            }
        }
        best_before = Some(best_before.map_or(r.test_accuracy, |b| b.max(r.test_accuracy)));
    }
    pulse
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heterogeneity {
    pub score: f64,
    /// Zero-norm samples left out of the computation.
    pub excluded: usize,
}

/// One minus the mean (over classes) of the average pairwise cosine
/// similarity between L2-normalised samples of a class. Self pairs are
/// included when `include_self` is set.
pub fn heterogeneity<S: Scalar>(dataset: &Dataset<S>, include_self: bool) -> Result<Heterogeneity> {
    let m = dataset.num_classes();
    let d = dataset.sample_len();
    let mut sums = vec![vec![0.0f64; d]; m];
    let mut counts = vec![0usize; m];
    let mut excluded = 0;
    for i in 0..dataset.len() {
        let x = dataset.sample(i);
        let n: f64 = x.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if n == 0.0 {
            excluded += 1;
            continue;
        }
        let c = dataset.labels()[i];
        for (s, v) in sums[c].iter_mut().zip(x) {
            *s += v.as_f64() / n;
        }
        counts[c] += 1;
    }
    if excluded > 0 {
        log::warn!("{excluded} zero-norm samples excluded from heterogeneity");
    }
    let mut total = 0.0;
    for c in 0..m {
        let n = counts[c];
        if n == 0 {
            return metric(format!("class {c} has no usable samples"));
        }
        // Sum of all ordered-pair cosines is the squared norm of the sum.
        let gram: f64 = sums[c].iter().map(|v| v * v).sum();
        let mean = if include_self {
            gram / (n * n) as f64
        } else if n == 1 {
            1.0
        } else {
            (gram - n as f64) / (n * (n - 1)) as f64
        };
        total += mean;
    }
    Ok(Heterogeneity {
        score: 1.0 - total / m as f64,
        excluded,
    })
}
