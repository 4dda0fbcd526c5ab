//! Byzantine-robust aggregation on amplified gradients.
//!
//! Every family scores clients on their amplified vectors but aggregates the
//! original gradients: whitelist families average the whitelisted originals,
//! the trust family weights norm-rescaled originals by trust score.

use rayon::prelude::*;

use crate::amplifier::{self, AmplifiedGradient, AmplifierConfig, AmplifierKind};
use crate::data::Dataset;
use crate::error::{config, shape, Result};
use crate::nn::{apply_update, cross_entropy, GradientSet, ModelParams};
use crate::tensor::{cosine, euclidean};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    FedAvg,
    DistCos,
    DistEuc,
    DistMerged,
    Fang,
    FlTrust,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::FedAvg => "fedavg",
            Family::DistCos => "dist-cos",
            Family::DistEuc => "dist-euc",
            Family::DistMerged => "dist-merged",
            Family::Fang => "fang",
            Family::FlTrust => "fltrust",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "fedavg" => Family::FedAvg,
            "dist-cos" => Family::DistCos,
            "dist-euc" => Family::DistEuc,
            "dist-merged" => Family::DistMerged,
            "fang" => Family::Fang,
            "fltrust" => Family::FlTrust,
            _ => return None,
        })
    }

    pub fn is_distance(self) -> bool {
        matches!(self, Family::DistCos | Family::DistEuc | Family::DistMerged)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Cos,
    Euc,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregatorConfig {
    pub family: Family,
    pub amplifier: AmplifierConfig,
    /// Neighbour count; `None` means `⌊N/2⌋ + 1`.
    pub neighbors: Option<usize>,
    pub assumed_malicious: f64,
}

impl AggregatorConfig {
    pub fn new(family: Family, amplifier: AmplifierConfig, assumed_malicious: f64) -> Self {
        Self {
            family,
            amplifier,
            neighbors: None,
            assumed_malicious,
        }
    }

    pub fn neighbors_for(&self, n: usize) -> usize {
        self.neighbors.unwrap_or(n / 2 + 1)
    }
}

/// `⌈frac · n⌉`, tolerant of float noise such as `0.3 · 10 = 3.0000000000000004`.
pub fn ceil_count(frac: f64, n: usize) -> usize {
    ((frac * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// `⌊frac · n⌋` with the same tolerance.
pub fn floor_count(frac: f64, n: usize) -> usize {
    ((frac * n as f64) + 1e-9).floor().max(0.0) as usize
}

#[derive(Clone, Debug, PartialEq)]
pub enum ClientMark<S> {
    /// Density score `S_i` and whitelist membership.
    Density {
        score: S,
        whitelisted: bool,
    },
    /// Leave-one-out validation loss and error rate.
    Prediction {
        loss: S,
        error_rate: S,
        whitelisted: bool,
    },
    Trust {
        score: S,
    },
    Averaged,
}

impl<S: Scalar> ClientMark<S> {
    pub fn score(&self) -> Option<S> {
        match self {
            ClientMark::Density { score, .. } | ClientMark::Trust { score } => Some(*score),
            ClientMark::Prediction { loss, .. } => Some(*loss),
            ClientMark::Averaged => None,
        }
    }

    pub fn accepted(&self) -> bool {
        match self {
            ClientMark::Density { whitelisted, .. } | ClientMark::Prediction { whitelisted, .. } => *whitelisted,
            ClientMark::Trust { score } => *score > S::zero(),
            ClientMark::Averaged => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregationDecision<S> {
    /// Accepted clients for whitelist families; clients with positive trust
    /// for the trust family.
    pub whitelist: Vec<usize>,
    pub trust_scores: Option<Vec<S>>,
    pub per_client: Vec<ClientMark<S>>,
    pub global_update: GradientSet<S>,
    pub warnings: Vec<String>,
}

pub fn fedavg<S: Scalar>(grads: &[GradientSet<S>]) -> Result<GradientSet<S>> {
    if grads.is_empty() {
        return config("fedavg needs at least one update");
    }
    if grads.iter().any(|g| !g.same_layout(&grads[0])) {
        return shape("updates have different layouts");
    }
    let refs: Vec<&GradientSet<S>> = grads.iter().collect();
    Ok(GradientSet::mean(&refs))
}

fn fedavg_subset<S: Scalar>(grads: &[GradientSet<S>], keep: &[usize]) -> GradientSet<S> {
    let refs: Vec<&GradientSet<S>> = keep.iter().map(|&i| &grads[i]).collect();
    GradientSet::mean(&refs)
}

/// Pairwise similarity matrix; Euclidean similarity is the negated distance.
pub fn similarity_matrix<S: Scalar>(vectors: &[&[S]], metric: Metric) -> Vec<Vec<S>> {
    let n = vectors.len();
    (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| match metric {
                    Metric::Cos => cosine(vectors[i], vectors[j]),
                    Metric::Euc => -euclidean(vectors[i], vectors[j]),
                })
                .collect()
        })
        .collect()
}

/// `S_i`: sum of the `k` largest entries of row `i`, self included.
pub fn density_scores<S: Scalar>(sim: &[Vec<S>], k: usize) -> Vec<S> {
    sim.iter()
        .map(|row| {
            let mut r = row.clone();
            r.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
            r.into_iter().take(k).sum()
        })
        .collect()
}

/// Indices of the `keep` largest scores; ties go to the lower index.
/// Returned sorted ascending.
pub fn top_indices<S: Scalar>(scores: &[S], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    order.truncate(keep);
    order.sort_unstable();
    order
}

fn check_vectors<S: Scalar>(amped: &[AmplifiedGradient<S>]) -> Result<()> {
    if amped.is_empty() {
        return config("no client vectors");
    }
    let len = amped[0].values.len();
    if amped.iter().any(|a| a.values.len() != len) {
        return shape("amplified vectors differ in length");
    }
    Ok(())
}

/// Density screening: returns the whitelist (ascending) and every `S_i`.
pub fn density_whitelist<S: Scalar>(
    amped: &[AmplifiedGradient<S>],
    metric: Metric,
    k: usize,
    assumed_malicious: f64,
) -> Result<(Vec<usize>, Vec<S>)> {
    check_vectors(amped)?;
    let n = amped.len();
    if 2 * k <= n || k > n {
        return config(format!(
            "neighbour count {k} must exceed N/2 and not exceed N (N = {n})"
        ));
    }
    let vecs: Vec<&[S]> = amped.iter().map(|a| a.values.as_slice()).collect();
    let sim = similarity_matrix(&vecs, metric);
    let scores = density_scores(&sim, k);
    let keep = ceil_count(1.0 - assumed_malicious, n);
    Ok((top_indices(&scores, keep), scores))
}

/// Intersection of the cosine and Euclidean whitelists. Falls back to the
/// cosine whitelist (with a warning) when the intersection is empty.
pub fn merged_whitelist<S: Scalar>(
    amped: &[AmplifiedGradient<S>],
    k: usize,
    assumed_malicious: f64,
) -> Result<(Vec<usize>, Vec<S>, Option<String>)> {
    let (cos, cos_scores) = density_whitelist(amped, Metric::Cos, k, assumed_malicious)?;
    let (euc, _) = density_whitelist(amped, Metric::Euc, k, assumed_malicious)?;
    let both: Vec<usize> = cos.iter().copied().filter(|i| euc.contains(i)).collect();
    if both.is_empty() {
        let msg = "cosine and euclidean whitelists are disjoint; using the cosine whitelist".to_string();
        log::warn!("{msg}");
        return Ok((cos, cos_scores, Some(msg)));
    }
    Ok((both, cos_scores, None))
}

/// Keeps the clients whose exclusion raises the metric least: sorts by
/// metric ascending (ties: higher index first) and rejects the first
/// `reject`.
fn prediction_keep<S: Scalar>(metric: &[S], reject: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..metric.len()).collect();
    order.sort_by(|&a, &b| {
        metric[a]
            .partial_cmp(&metric[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(b.cmp(&a))
    });
    let mut keep: Vec<usize> = order.into_iter().skip(reject).collect();
    keep.sort_unstable();
    keep
}

/// Validation loss and error rate of `model`.
pub fn evaluate<S: Scalar>(model: &ModelParams<S>, data: &Dataset<S>) -> Result<(S, S)> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let (x, y) = data.batch(&idx);
    let trace = model.forward(&x)?;
    let loss = cross_entropy(trace.logits(), &y);
    let logits = trace.logits();
    let wrong = (0..y.len())
        .filter(|&s| crate::nn::argmax(logits.row(s)) != y[s])
        .count();
    Ok((loss, S::of_usize(wrong) / S::of_usize(y.len())))
}

/// Leave-one-out loss and error rejection on restored amplified gradients.
///
/// For each client the server evaluates the model updated with the FedAvg
/// of everyone else. A client whose removal leaves a low loss (error) is
/// suspicious; the `⌈M_f·N⌉` most suspicious are rejected per criterion and
/// the whitelist is the intersection of both keep-sets.
pub fn fang_whitelist<S: Scalar>(
    restored: &[GradientSet<S>],
    model: &ModelParams<S>,
    validation: &Dataset<S>,
    assumed_malicious: f64,
) -> Result<(Vec<usize>, Vec<(S, S)>)> {
    if validation.is_empty() {
        return config("prediction-based screening needs a validation set");
    }
    if restored.is_empty() {
        return config("no client updates");
    }
    let n = restored.len();
    let reject = ceil_count(assumed_malicious, n).min(n.saturating_sub(1));
    let marks: Vec<(S, S)> = if n == 1 {
        vec![evaluate(model, validation)?]
    } else {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                let upd = fedavg_subset(restored, &others);
                let m = apply_update(model, &upd, S::one())?;
                evaluate(&m, validation)
            })
            .collect::<Result<_>>()?
    };
    let losses: Vec<S> = marks.iter().map(|m| m.0).collect();
    let errors: Vec<S> = marks.iter().map(|m| m.1).collect();
    let lrr = prediction_keep(&losses, reject);
    let err = prediction_keep(&errors, reject);
    let keep = lrr.into_iter().filter(|i| err.contains(i)).collect();
    Ok((keep, marks))
}

/// Trust bootstrapping: `TS_i = ReLU(cos(amp_i, amp_0))`, originals rescaled
/// to `‖g_0‖` and averaged with weights `TS_i / Σ TS`.
pub fn fltrust_aggregate<S: Scalar>(
    amped: &[AmplifiedGradient<S>],
    amped_ref: &AmplifiedGradient<S>,
    originals: &[GradientSet<S>],
    ref_original: &GradientSet<S>,
) -> Result<AggregationDecision<S>> {
    if amped.len() != originals.len() || amped.is_empty() {
        return config("trust aggregation needs one amplified vector per client");
    }
    if amped.iter().any(|a| a.values.len() != amped_ref.values.len()) {
        return shape("amplified vectors differ from the reference in length");
    }
    let trust: Vec<S> = amped
        .iter()
        .map(|a| cosine(&a.values, &amped_ref.values).max(S::zero()))
        .collect();
    let ref_norm = ref_original.norm();
    let total: S = trust.iter().copied().sum();
    let mut warnings = Vec::new();
    let mut update = GradientSet::new(
        ref_original
            .tensors
            .iter()
            .map(|t| crate::tensor::Tensor::zeros(t.shape()))
            .collect(),
    );
    if total > S::zero() {
        for (g, &ts) in originals.iter().zip(&trust) {
            if ts == S::zero() {
                continue;
            }
            let gn = g.norm();
            if gn == S::zero() {
                continue;
            }
            update.axpy(ts * ref_norm / (gn * total), g);
        }
    } else {
        let msg = "all trust scores are zero; round skipped".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let whitelist = (0..trust.len()).filter(|&i| trust[i] > S::zero()).collect();
    Ok(AggregationDecision {
        whitelist,
        per_client: trust.iter().map(|&score| ClientMark::Trust { score }).collect(),
        trust_scores: Some(trust),
        global_update: update,
        warnings,
    })
}

/// Server-side inputs an aggregation round may need.
pub struct RoundContext<'a, S> {
    pub model: &'a ModelParams<S>,
    /// Clean server data: the prediction family's validation set, the trust
    /// family's root set and the explanation-guided amplifier's probe set.
    pub validation: &'a Dataset<S>,
    /// Reference update trained on the root set (trust family only).
    pub reference: Option<&'a GradientSet<S>>,
}

/// Amplified vectors used for scoring, plus the reference vector when the
/// family needs one. Exposed for debug dumps.
pub fn amplified_for_scoring<S: Scalar>(
    grads: &[GradientSet<S>],
    cfg: &AggregatorConfig,
    ctx: &RoundContext<'_, S>,
) -> Result<(Vec<AmplifiedGradient<S>>, Option<AmplifiedGradient<S>>)> {
    let mut amp_cfg = cfg.amplifier;
    if cfg.family == Family::Fang {
        amp_cfg.restore_size = true;
    }
    if cfg.family == Family::FlTrust {
        let reference = ctx
            .reference
            .ok_or_else(|| crate::Error::Config("trust aggregation needs a reference update".into()))?;
        if amp_cfg.kind == AmplifierKind::Xai {
            // One selection, made by the server's reference model, indexes
            // both the reference and every client so coordinates align.
            let alpha = amplifier::filter_importance(ctx.model, reference, ctx.validation, amp_cfg.class_score)?;
            let selection = amplifier::select_top(&alpha, amp_cfg.top_p);
            let amped = grads
                .iter()
                .map(|g| amplifier::amplify_with_selection(g, ctx.model, &selection, amp_cfg.restore_size))
                .collect::<Result<Vec<_>>>()?;
            let amped_ref = amplifier::amplify_with_selection(reference, ctx.model, &selection, amp_cfg.restore_size)?;
            return Ok((amped, Some(amped_ref)));
        }
        let mut all = grads.to_vec();
        all.push(reference.clone());
        let mut amped = amplifier::amplify(&all, ctx.model, ctx.validation, &amp_cfg)?;
        let amped_ref = amped.pop();
        return Ok((amped, amped_ref));
    }
    Ok((amplifier::amplify(grads, ctx.model, ctx.validation, &amp_cfg)?, None))
}

/// One screening-and-aggregation step for the configured family.
pub fn aggregate_round<S: Scalar>(
    grads: &[GradientSet<S>],
    cfg: &AggregatorConfig,
    ctx: &RoundContext<'_, S>,
) -> Result<AggregationDecision<S>> {
    if grads.is_empty() {
        return config("no client updates this round");
    }
    if !(0.0..1.0).contains(&cfg.assumed_malicious) {
        return config(format!(
            "assumed malicious fraction {} outside [0, 1)",
            cfg.assumed_malicious
        ));
    }
    let n = grads.len();
    if cfg.family == Family::FedAvg {
        return Ok(AggregationDecision {
            whitelist: (0..n).collect(),
            trust_scores: None,
            per_client: vec![ClientMark::Averaged; n],
            global_update: fedavg(grads)?,
            warnings: Vec::new(),
        });
    }
    let (amped, amped_ref) = amplified_for_scoring(grads, cfg, ctx)?;
    match cfg.family {
        Family::FedAvg => unreachable!(),
        Family::DistCos | Family::DistEuc | Family::DistMerged => {
            let k = cfg.neighbors_for(n);
            let (whitelist, scores, warning) = match cfg.family {
                Family::DistCos => {
                    let (w, s) = density_whitelist(&amped, Metric::Cos, k, cfg.assumed_malicious)?;
                    (w, s, None)
                }
                Family::DistEuc => {
                    let (w, s) = density_whitelist(&amped, Metric::Euc, k, cfg.assumed_malicious)?;
                    (w, s, None)
                }
                _ => merged_whitelist(&amped, k, cfg.assumed_malicious)?,
            };
            Ok(whitelist_decision(grads, whitelist, |i, w| ClientMark::Density {
                score: scores[i],
                whitelisted: w,
            })
            .with_warnings(warning.into_iter().collect()))
        }
        Family::Fang => {
            let restored = amped
                .iter()
                .map(|a| a.to_gradient(&grads[0]))
                .collect::<Result<Vec<_>>>()?;
            let (whitelist, marks) = fang_whitelist(&restored, ctx.model, ctx.validation, cfg.assumed_malicious)?;
            let mut warnings = Vec::new();
            let whitelist = if whitelist.is_empty() {
                let msg = "loss and error keep-sets are disjoint; keeping every client".to_string();
                log::warn!("{msg}");
                warnings.push(msg);
                (0..n).collect()
            } else {
                whitelist
            };
            Ok(whitelist_decision(grads, whitelist, |i, w| ClientMark::Prediction {
                loss: marks[i].0,
                error_rate: marks[i].1,
                whitelisted: w,
            })
            .with_warnings(warnings))
        }
        Family::FlTrust => {
            let reference = ctx.reference.expect("checked in amplified_for_scoring");
            fltrust_aggregate(
                &amped,
                amped_ref.as_ref().expect("reference amplified"),
                grads,
                reference,
            )
        }
    }
}

fn whitelist_decision<S: Scalar>(
    grads: &[GradientSet<S>],
    whitelist: Vec<usize>,
    mark: impl Fn(usize, bool) -> ClientMark<S>,
) -> AggregationDecision<S> {
    let per_client = (0..grads.len()).map(|i| mark(i, whitelist.contains(&i))).collect();
    AggregationDecision {
        global_update: fedavg_subset(grads, &whitelist),
        whitelist,
        trust_scores: None,
        per_client,
        warnings: Vec::new(),
    }
}

impl<S> AggregationDecision<S> {
    fn with_warnings(mut self, mut w: Vec<String>) -> Self {
        self.warnings.append(&mut w);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::amplifier::Provenance;
    use crate::tensor::Tensor;

    fn vecs(vs: &[&[f64]]) -> Vec<AmplifiedGradient<f64>> {
        vs.iter()
            .map(|v| AmplifiedGradient {
                values: v.to_vec(),
                provenance: Provenance::Identity,
                original_len: v.len(),
                restored: false,
            })
            .collect()
    }

    fn g(v: &[f64]) -> GradientSet<f64> {
        GradientSet::new(vec![Tensor::vector(v.to_vec())])
    }

    #[test]
    fn fedavg_basics() {
        assert_eq!(fedavg(&[g(&[1.0]), g(&[2.0]), g(&[6.0])]).unwrap(), g(&[3.0]));
        assert_eq!(fedavg(&[g(&[1.0, -2.0]), g(&[-1.0, 2.0])]).unwrap(), g(&[0.0, 0.0]));
        assert_eq!(fedavg(&vec![g(&[4.0, 5.0]); 3]).unwrap(), g(&[4.0, 5.0]));
        assert!(fedavg::<f64>(&[]).is_err());
    }

    #[test]
    fn identical_vectors_keep_lowest_indices() {
        let a = vecs(&[&[1.0, 1.0][..]; 5]);
        let (w, _) = density_whitelist(&a, Metric::Cos, 3, 0.4).unwrap();
        assert_eq!(w, vec![0, 1, 2]);
    }

    #[test]
    fn zero_malicious_keeps_all() {
        let a = vecs(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.5]]);
        let (w, _) = density_whitelist(&a, Metric::Euc, 2, 0.0).unwrap();
        assert_eq!(w, vec![0, 1, 2]);
    }

    #[test]
    fn neighbour_count_must_exceed_half() {
        let a = vecs(&[&[1.0], &[2.0], &[3.0], &[4.0]]);
        assert!(density_whitelist(&a, Metric::Cos, 2, 0.25).is_err());
    }

    #[test]
    fn zero_vector_scores_zero_cosine() {
        let a = vecs(&[&[0.0, 0.0], &[1.0, 0.0], &[1.0, 0.1]]);
        let vs: Vec<&[f64]> = a.iter().map(|x| x.values.as_slice()).collect();
        let sim = similarity_matrix(&vs, Metric::Cos);
        assert_eq!(sim[0], vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn fltrust_clipping() {
        let r = vecs(&[&[1.0, 2.0]]).remove(0);
        let a = vecs(&[&[1.0, 2.0], &[-1.0, -2.0]]);
        let d = fltrust_aggregate(&a, &r, &[g(&[1.0]), g(&[1.0])], &g(&[1.0])).unwrap();
        let ts = d.trust_scores.unwrap();
        assert!((ts[0] - 1.0).abs() < 1e-12);
        assert_eq!(ts[1], 0.0);
        assert_eq!(d.whitelist, vec![0]);
    }

    #[test]
    fn fltrust_all_zero_trust_skips_round() {
        let r = vecs(&[&[1.0, 0.0]]).remove(0);
        let a = vecs(&[&[-1.0, 0.0]]);
        let d = fltrust_aggregate(&a, &r, &[g(&[3.0])], &g(&[1.0])).unwrap();
        assert_eq!(d.global_update, g(&[0.0]));
        assert_eq!(d.warnings.len(), 1);
    }

    #[test]
    fn ceil_count_absorbs_float_noise() {
        assert_eq!(ceil_count(0.3, 10), 3);
        assert_eq!(ceil_count(0.7, 10), 7);
        assert_eq!(ceil_count(0.25, 10), 3);
        assert_eq!(floor_count(0.3, 10), 3);
        assert_eq!(floor_count(0.29, 10), 2);
    }
}
