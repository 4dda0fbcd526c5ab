//! Malicious update construction under a full-knowledge adversary.

use rand::seq::index::sample;

use crate::data::{embed_trigger, Dataset, TriggerSpec};
use crate::error::{config, Result};
use crate::nn::{local_train, GradientSet, ModelParams, TrainParams};
use crate::tensor::{cosine, Tensor};
use crate::{rng, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AttackKind {
    #[default]
    None,
    LabelFlip,
    GradAscent,
    FlipAscent,
    Scale,
    Dba,
    ShOptimized,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::LabelFlip => "l-flip",
            AttackKind::GradAscent => "g-asc",
            AttackKind::FlipAscent => "l-flip+g-asc",
            AttackKind::Scale => "scale",
            AttackKind::Dba => "dba",
            AttackKind::ShOptimized => "sh-optimized",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "none" => AttackKind::None,
            "l-flip" => AttackKind::LabelFlip,
            "g-asc" => AttackKind::GradAscent,
            "l-flip+g-asc" => AttackKind::FlipAscent,
            "scale" => AttackKind::Scale,
            "dba" => AttackKind::Dba,
            "sh-optimized" => AttackKind::ShOptimized,
            _ => return None,
        })
    }

    /// Backdoor attacks that carry a trigger.
    pub fn is_targeted(self) -> bool {
        matches!(self, AttackKind::Scale | AttackKind::Dba)
    }

    /// Attacks whose crafted update depends on every benign update.
    pub fn needs_full_view(self) -> bool {
        matches!(self, AttackKind::GradAscent | AttackKind::ShOptimized)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScaleFactor {
    /// `λ = N`, the number of clients.
    AutoN,
    Fixed(f64),
}

impl ScaleFactor {
    pub fn resolve(self, num_clients: usize) -> f64 {
        match self {
            ScaleFactor::AutoN => num_clients as f64,
            ScaleFactor::Fixed(v) => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig<S> {
    pub kind: AttackKind,
    pub malicious_fraction: f64,
    /// First (0-based) training round with malicious updates.
    pub start_round: usize,
    pub scale_factor: ScaleFactor,
    pub trigger: Option<TriggerSpec<S>>,
    /// Fraction of a malicious shard duplicated with the trigger.
    pub duplication_fraction: f64,
    /// Gradient-ascent magnitude.
    pub gamma: f64,
    pub sh_gamma_max: f64,
}

impl<S: Scalar> Default for AttackConfig<S> {
    fn default() -> Self {
        Self {
            kind: AttackKind::None,
            malicious_fraction: 0.3,
            start_round: 20,
            scale_factor: ScaleFactor::AutoN,
            trigger: None,
            duplication_fraction: 0.5,
            gamma: 1.0,
            sh_gamma_max: 10.0,
        }
    }
}

impl<S: Scalar> AttackConfig<S> {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.malicious_fraction) {
            return config(format!(
                "malicious fraction {} outside [0, 0.5)",
                self.malicious_fraction
            ));
        }
        if self.kind.is_targeted() && self.trigger.is_none() {
            return config(format!("{} attack needs a trigger", self.kind.name()));
        }
        if let ScaleFactor::Fixed(v) = self.scale_factor {
            if v <= 0.0 {
                return config(format!("scale factor {v} must be positive"));
            }
        }
        if !(self.duplication_fraction > 0.0 && self.duplication_fraction <= 1.0) {
            return config(format!(
                "duplication fraction {} outside (0, 1]",
                self.duplication_fraction
            ));
        }
        Ok(())
    }

    pub fn active(&self, round: usize) -> bool {
        self.kind != AttackKind::None && round >= self.start_round
    }
}

/// `⌊M_f·N⌋` distinct clients, fixed by `seed`. Sorted ascending.
pub fn choose_malicious(num_clients: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let count = crate::aggregators::floor_count(fraction, num_clients).min(num_clients);
    let mut r = rng::rng(seed);
    let mut out = sample(&mut r, num_clients, count).into_vec();
    out.sort_unstable();
    out
}

/// Position of `client` among the malicious set modulo `parts`.
pub fn dba_part(client: usize, malicious: &[usize], parts: usize) -> Option<usize> {
    malicious.iter().position(|&c| c == client).map(|k| k % parts.max(1))
}

/// `y → M − y − 1`.
pub fn flip_labels<S: Scalar>(shard: &Dataset<S>) -> Result<Dataset<S>> {
    let m = shard.num_classes();
    shard.with_labels(shard.labels().iter().map(|&y| m - y - 1).collect())
}

/// `−γ · update`.
pub fn grad_ascent<S: Scalar>(update: &GradientSet<S>, gamma: f64) -> GradientSet<S> {
    update.scaled(-S::of(gamma))
}

/// Update trained on the flipped shard plus the reversed honest update.
pub fn combined_attack<S: Scalar>(
    shard: &Dataset<S>,
    benign_update: &GradientSet<S>,
    model: &ModelParams<S>,
    train: &TrainParams,
    gamma: f64,
    seed: u64,
) -> Result<GradientSet<S>> {
    let flipped = local_train(model, &flip_labels(shard)?, train, seed)?;
    Ok(flipped.add(&grad_ascent(benign_update, gamma)))
}

/// Backdoor update on the trigger-augmented shard, multiplied by `lambda`.
pub fn scale_attack<S: Scalar>(
    shard: &Dataset<S>,
    trigger: &TriggerSpec<S>,
    lambda: f64,
    model: &ModelParams<S>,
    train: &TrainParams,
    duplication: f64,
    seed: u64,
) -> Result<GradientSet<S>> {
    if lambda <= 0.0 {
        return config(format!("scale factor {lambda} must be positive"));
    }
    let poisoned = embed_trigger(shard, trigger, duplication, 0, rng::derive(seed, &[1]))?;
    Ok(local_train(model, &poisoned, train, seed)?.scaled(S::of(lambda)))
}

/// Backdoor update on the shard stamped with one trigger part; unscaled.
pub fn dba_attack<S: Scalar>(
    shard: &Dataset<S>,
    trigger: &TriggerSpec<S>,
    part_index: usize,
    model: &ModelParams<S>,
    train: &TrainParams,
    duplication: f64,
    seed: u64,
) -> Result<GradientSet<S>> {
    let poisoned = embed_trigger(shard, trigger, duplication, part_index, rng::derive(seed, &[1]))?;
    local_train(model, &poisoned, train, seed)
}

/// What a full-knowledge adversary observes in a round.
pub struct AdversaryView<'a, S> {
    pub benign_updates: &'a [GradientSet<S>],
    pub global_model: &'a ModelParams<S>,
}

/// Coordinate-wise mean and population standard deviation.
pub fn mean_std<S: Scalar>(updates: &[GradientSet<S>]) -> (GradientSet<S>, GradientSet<S>) {
    let refs: Vec<&GradientSet<S>> = updates.iter().collect();
    let mu = GradientSet::mean(&refs);
    let n = S::of_usize(updates.len());
    let sigma = GradientSet::new(
        mu.tensors
            .iter()
            .enumerate()
            .map(|(ti, m)| {
                Tensor::from_fn(m.shape(), |k| {
                    let var = updates
                        .iter()
                        .map(|u| {
                            let d = u.tensors[ti].data()[k] - m.data()[k];
                            d * d
                        })
                        .sum::<S>()
                        / n;
                    var.sqrt()
                })
            })
            .collect(),
    );
    (mu, sigma)
}

/// `μ − γ·σ` over the benign updates.
pub fn sh_candidate<S: Scalar>(view: &AdversaryView<'_, S>, gamma: f64) -> Result<GradientSet<S>> {
    if view.benign_updates.is_empty() {
        return config("optimized attack needs at least one benign update");
    }
    let (mut mu, sigma) = mean_std(view.benign_updates);
    mu.axpy(-S::of(gamma), &sigma);
    Ok(mu)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShOutcome<S> {
    pub update: GradientSet<S>,
    pub gamma: f64,
    pub warning: Option<String>,
}

/// Simplified optimized attack: halve `γ` from `gamma_max` until `μ − γσ`
/// is at least as aligned with `μ` as the median benign update. After 20
/// halvings without success `γ = 0` (the candidate is `μ`).
pub fn sh_optimized<S: Scalar>(view: &AdversaryView<'_, S>, gamma_max: f64) -> Result<ShOutcome<S>> {
    if view.benign_updates.is_empty() {
        return config("optimized attack needs at least one benign update");
    }
    let (mu, sigma) = mean_std(view.benign_updates);
    if view.benign_updates.len() == 1 {
        let msg = "single benign update; sigma is zero and the attack degenerates to the mean".to_string();
        log::warn!("{msg}");
        return Ok(ShOutcome {
            update: mu,
            gamma: 0.0,
            warning: Some(msg),
        });
    }
    let mu_flat = mu.flatten();
    let mut cosines: Vec<S> = view
        .benign_updates
        .iter()
        .map(|u| cosine(&u.flatten(), &mu_flat))
        .collect();
    cosines.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let m = cosines.len();
    let median = if m % 2 == 1 {
        cosines[m / 2]
    } else {
        (cosines[m / 2 - 1] + cosines[m / 2]) / S::of(2.0)
    };
    let mut gamma = gamma_max;
    for _ in 0..=20 {
        let mut cand = mu.clone();
        cand.axpy(-S::of(gamma), &sigma);
        if cosine(&cand.flatten(), &mu_flat) >= median {
            return Ok(ShOutcome {
                update: cand,
                gamma,
                warning: None,
            });
        }
        gamma /= 2.0;
    }
    Ok(ShOutcome {
        update: mu,
        gamma: 0.0,
        warning: None,
    })
}
