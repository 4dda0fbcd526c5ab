//! Federation setup and the round loop.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gradamp::aggregators::{
    aggregate_round, amplified_for_scoring, ceil_count, evaluate, AggregatorConfig, ClientMark, Family, RoundContext,
};
use gradamp::amplifier::AmplifierKind;
use gradamp::attacks::{
    choose_malicious, combined_attack, dba_attack, dba_part, flip_labels, grad_ascent, scale_attack, sh_optimized,
    AdversaryView, AttackKind,
};
use gradamp::data::{
    load_csv, load_idx, partition, sample_validation, synth_blobs, synth_images, triggered_set, Dataset, TriggerSpec,
};
use gradamp::metrics::{asr, heterogeneity, RoundRecord};
use gradamp::nn::{apply_update, local_train, GradientSet, ModelParams, TrainParams};
use gradamp::rng::{derive, rng};
use gradamp::Scalar;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, ModelKind, Precision, Source};
use crate::error::{HarnessError, HarnessResult};
use crate::manifest::{sha256_file, Manifest};

/// Which twin of a pair a run is.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Single,
    Clean,
    Attacked,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Single => "single",
            Role::Clean => "clean",
            Role::Attacked => "attacked",
        }
    }

    fn attacked(self) -> bool {
        self != Role::Clean
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecisionRow {
    /// 0-based training round the decision was made in.
    pub round: usize,
    pub client: usize,
    pub malicious: bool,
    pub score: Option<f64>,
    /// Validation error rate, for prediction-based screening only.
    pub error_rate: Option<f64>,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AmplifiedRow {
    pub client: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub role: Role,
    /// Records keyed by completed-round count, starting with the initial model.
    pub records: Vec<RoundRecord>,
    pub decisions: Vec<DecisionRow>,
    pub malicious: Vec<usize>,
    pub heterogeneity: f64,
    /// Aggregation wall time per training round, in milliseconds.
    pub aggregation_ms: Vec<f64>,
    pub round_ms: Vec<f64>,
    pub amplified: Vec<AmplifiedRow>,
    /// Round and cause of an aborted run.
    pub failure: Option<(usize, String)>,
}

struct Federation<S> {
    test: Dataset<S>,
    triggered: Option<Dataset<S>>,
    validation: Dataset<S>,
    shards: Vec<Dataset<S>>,
    model: ModelParams<S>,
    aggregator: AggregatorConfig,
    trigger: Option<TriggerSpec<S>>,
    attack: AttackKind,
    malicious: Vec<usize>,
    heterogeneity: f64,
}

fn setup_err(e: gradamp::Error) -> HarnessError {
    HarnessError::setup(e)
}

pub fn load_dataset<S: Scalar>(cfg: &ExperimentConfig) -> HarnessResult<Dataset<S>> {
    let d = &cfg.dataset;
    let need = |p: &Option<PathBuf>, key: &str| {
        p.clone()
            .ok_or_else(|| HarnessError::Config(format!("dataset.{key} is required for this source")))
    };
    match d.source {
        Source::Blobs => synth_blobs(d.classes, d.per_class, d.dim, d.spread, cfg.seeds.data).map_err(setup_err),
        Source::Images => synth_images(d.classes, d.per_class, d.shape, d.spread, cfg.seeds.data).map_err(setup_err),
        Source::Idx => load_idx(need(&d.images, "images")?, need(&d.labels, "labels")?).map_err(setup_err),
        Source::Csv => load_csv(need(&d.csv, "csv")?).map_err(setup_err),
    }
}

fn build_model<S: Scalar>(
    cfg: &ExperimentConfig,
    sample_shape: &[usize],
    classes: usize,
) -> HarnessResult<ModelParams<S>> {
    let m = &cfg.model;
    let seed = derive(cfg.seeds.clients, &[0]);
    let conv = match m.kind {
        ModelKind::Auto => sample_shape.len() == 3,
        ModelKind::Cnn => true,
        ModelKind::Mlp => false,
    };
    if conv {
        let shape: [usize; 3] = sample_shape
            .try_into()
            .map_err(|_| HarnessError::Config(format!("cnn needs C×H×W samples, got {sample_shape:?}")))?;
        ModelParams::cnn(shape, m.filters, m.kernel, m.pool, &m.hidden, classes, seed).map_err(setup_err)
    } else {
        let dim = sample_shape.iter().product();
        ModelParams::mlp(dim, &m.hidden, classes, seed).map_err(setup_err)
    }
}

fn build<S: Scalar>(cfg: &ExperimentConfig, role: Role) -> HarnessResult<Federation<S>> {
    cfg.validate()?;
    let mut full = load_dataset::<S>(cfg)?;
    let mut model = build_model::<S>(cfg, full.sample_shape(), full.num_classes())?;
    if model.input_shape() != full.sample_shape() {
        let flat = [full.sample_len()];
        full = full.reshape_samples(&flat).map_err(setup_err)?;
        model = build_model::<S>(cfg, &flat, full.num_classes())?;
    }

    let n = full.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng(derive(cfg.seeds.data, &[1])));
    let n_test = (cfg.dataset.test_fraction * n as f64).round() as usize;
    let n_server = cfg.dataset.server_pool.min(n.saturating_sub(n_test));
    let mut test_idx = order[..n_test].to_vec();
    let mut server_idx = order[n_test..n_test + n_server].to_vec();
    let mut client_idx = order[n_test + n_server..].to_vec();
    test_idx.sort_unstable();
    server_idx.sort_unstable();
    client_idx.sort_unstable();
    if test_idx.is_empty() {
        return Err(HarnessError::Config(
            "test split is empty; raise dataset.test_fraction".into(),
        ));
    }
    let clients = cfg.run.clients;
    if client_idx.len() < clients {
        return Err(HarnessError::Config(format!(
            "{} client samples cannot cover {clients} clients",
            client_idx.len()
        )));
    }
    let test = full.subset(&test_idx);
    let pool = full.subset(&client_idx);
    let server = full.subset(&server_idx);

    let plan = partition(
        pool.labels(),
        pool.num_classes(),
        clients,
        cfg.partition.scheme(),
        derive(cfg.seeds.data, &[2]),
    )
    .map_err(setup_err)?;
    let shards: Vec<Dataset<S>> = plan.client_shards.iter().map(|s| pool.subset(s)).collect();

    let source = if cfg.defense.validation_overlap { &pool } else { &server };
    let validation = sample_validation(source, &cfg.defense.validation(), derive(cfg.seeds.data, &[3]))
        .map_err(|e| HarnessError::Config(format!("server set: {e}")))?;

    let aggregator = cfg.defense.aggregator()?;
    if aggregator.family != Family::FedAvg
        && aggregator.amplifier.kind == AmplifierKind::Xai
        && model.last_conv().is_none()
    {
        return Err(HarnessError::Config(
            "explanation-guided amplification needs a convolutional model".into(),
        ));
    }
    if matches!(aggregator.family, Family::Fang | Family::FlTrust) && validation.is_empty() {
        return Err(HarnessError::Config(format!(
            "{} needs a non-empty server set",
            aggregator.family.name()
        )));
    }

    let attack = if role.attacked() {
        cfg.attack.kind()?
    } else {
        AttackKind::None
    };
    let mut trigger = None;
    let mut triggered = None;
    if attack.is_targeted() {
        let a = &cfg.attack;
        let value = S::of(a.trigger_value);
        let spec = if full.sample_shape().len() == 3 {
            TriggerSpec::patch(full.sample_shape(), a.trigger_size, value, a.target_label)
        } else {
            TriggerSpec::features(&a.trigger_features, value, a.target_label)
        }
        .map_err(setup_err)?;
        let spec = if attack == AttackKind::Dba {
            spec.split(4).map_err(setup_err)?
        } else {
            spec
        };
        spec.validate(full.sample_len(), full.num_classes())
            .map_err(setup_err)?;
        let t = triggered_set(&test, &spec).map_err(setup_err)?;
        if t.is_empty() {
            return Err(HarnessError::Config("no test samples outside the target class".into()));
        }
        triggered = Some(t);
        trigger = Some(spec);
    }
    let malicious = if attack == AttackKind::None {
        Vec::new()
    } else {
        choose_malicious(clients, cfg.attack.malicious_fraction, derive(cfg.seeds.attack, &[0]))
    };
    let het = heterogeneity(&pool, cfg.dataset.heterogeneity_self_pairs)
        .map(|h| h.score)
        .unwrap_or(f64::NAN);

    Ok(Federation {
        test,
        triggered,
        validation,
        shards,
        model,
        aggregator,
        trigger,
        attack,
        malicious,
        heterogeneity: het,
    })
}

fn accuracy<S: Scalar>(model: &ModelParams<S>, test: &Dataset<S>) -> gradamp::Result<f64> {
    let (_, err) = evaluate(model, test)?;
    Ok(1.0 - err.as_f64())
}

fn record<S: Scalar>(fed: &Federation<S>, model: &ModelParams<S>, round: usize) -> gradamp::Result<RoundRecord> {
    let target = fed.trigger.as_ref().map(|t| t.target_label);
    let asr = match (&fed.triggered, target) {
        (Some(t), Some(c)) => Some(asr(model, t, c)?),
        _ => None,
    };
    Ok(RoundRecord {
        round,
        test_accuracy: accuracy(model, &fed.test)?,
        asr,
    })
}

/// Malicious uploads for this round, in participant order.
#[allow(clippy::too_many_arguments)]
fn craft<S: Scalar>(
    cfg: &ExperimentConfig,
    fed: &Federation<S>,
    model: &ModelParams<S>,
    train: &TrainParams,
    round: usize,
    participants: &[usize],
    honest: &[GradientSet<S>],
) -> gradamp::Result<Vec<GradientSet<S>>> {
    let a = &cfg.attack;
    let is_bad = |c: usize| fed.malicious.binary_search(&c).is_ok();
    let benign: Vec<GradientSet<S>> = participants
        .iter()
        .zip(honest)
        .filter(|(c, _)| !is_bad(**c))
        .map(|(_, g)| g.clone())
        .collect();
    // If only attackers were sampled they see their own honest updates.
    let view_updates = if benign.is_empty() { honest.to_vec() } else { benign };
    let shared = match fed.attack {
        AttackKind::GradAscent => {
            let refs: Vec<&GradientSet<S>> = view_updates.iter().collect();
            Some(grad_ascent(&GradientSet::mean(&refs), a.gamma))
        }
        AttackKind::ShOptimized => {
            let view = AdversaryView {
                benign_updates: &view_updates,
                global_model: model,
            };
            let out = sh_optimized(&view, a.sh_gamma_max)?;
            if let Some(w) = &out.warning {
                log::warn!("round {round}: {w}");
            }
            Some(out.update)
        }
        _ => None,
    };
    let lambda = a
        .scale_factor()
        .map(|s| s.resolve(cfg.run.clients))
        .unwrap_or(cfg.run.clients as f64);
    participants
        .par_iter()
        .zip(honest)
        .map(|(&c, own)| {
            if !is_bad(c) {
                return Ok(own.clone());
            }
            if let Some(s) = &shared {
                return Ok(s.clone());
            }
            let shard = &fed.shards[c];
            let seed = derive(cfg.seeds.attack, &[round as u64, c as u64]);
            match fed.attack {
                AttackKind::LabelFlip => local_train(model, &flip_labels(shard)?, train, seed),
                AttackKind::FlipAscent => combined_attack(shard, own, model, train, a.gamma, seed),
                AttackKind::Scale => {
                    let t = fed.trigger.as_ref().expect("targeted attack has a trigger");
                    scale_attack(shard, t, lambda, model, train, a.duplication, seed)
                }
                AttackKind::Dba => {
                    let t = fed.trigger.as_ref().expect("targeted attack has a trigger");
                    let part = dba_part(c, &fed.malicious, t.split_parts).unwrap_or(0);
                    dba_attack(shard, t, part, model, train, a.duplication, seed)
                }
                _ => Ok(own.clone()),
            }
        })
        .collect()
}

fn mark_row(round: usize, client: usize, malicious: bool, mark: &ClientMark<f64>) -> DecisionRow {
    let (score, error_rate) = match mark {
        ClientMark::Density { score, .. } | ClientMark::Trust { score } => (Some(*score), None),
        ClientMark::Prediction { loss, error_rate, .. } => (Some(*loss), Some(*error_rate)),
        ClientMark::Averaged => (None, None),
    };
    DecisionRow {
        round,
        client,
        malicious,
        score,
        error_rate,
        accepted: mark.accepted(),
    }
}

fn cast_mark<S: Scalar>(m: &ClientMark<S>) -> ClientMark<f64> {
    match m {
        ClientMark::Density { score, whitelisted } => ClientMark::Density {
            score: score.as_f64(),
            whitelisted: *whitelisted,
        },
        ClientMark::Prediction {
            loss,
            error_rate,
            whitelisted,
        } => ClientMark::Prediction {
            loss: loss.as_f64(),
            error_rate: error_rate.as_f64(),
            whitelisted: *whitelisted,
        },
        ClientMark::Trust { score } => ClientMark::Trust { score: score.as_f64() },
        ClientMark::Averaged => ClientMark::Averaged,
    }
}

fn simulate_typed<S: Scalar>(cfg: &ExperimentConfig, role: Role) -> HarnessResult<RunOutcome> {
    let fed = build::<S>(cfg, role)?;
    let train = cfg.train.params();
    let n = cfg.run.clients;
    let global_lr = S::of(cfg.run.global_lr);
    let mut model = fed.model.clone();
    let mut out = RunOutcome {
        role,
        records: Vec::new(),
        decisions: Vec::new(),
        malicious: fed.malicious.clone(),
        heterogeneity: fed.heterogeneity,
        aggregation_ms: Vec::new(),
        round_ms: Vec::new(),
        amplified: Vec::new(),
        failure: None,
    };
    match record(&fed, &model, 0) {
        Ok(r) => out.records.push(r),
        Err(e) => {
            out.failure = Some((0, e.to_string()));
            return Ok(out);
        }
    }
    let attack_start = cfg.attack.start_round;
    for round in 0..cfg.run.rounds {
        let t0 = Instant::now();
        let mut step = || -> gradamp::Result<Option<RoundRecord>> {
            let mut participants: Vec<usize> = if cfg.run.participation < 1.0 {
                let k = ceil_count(cfg.run.participation, n).max(1);
                let mut p = sample(&mut rng(derive(cfg.seeds.clients, &[round as u64, u64::MAX])), n, k).into_vec();
                p.sort_unstable();
                p
            } else {
                (0..n).collect()
            };
            participants.retain(|&c| {
                let keep = !fed.shards[c].is_empty();
                if !keep {
                    log::warn!("round {round}: client {c} has no data and is skipped");
                }
                keep
            });
            let honest: Vec<GradientSet<S>> = participants
                .par_iter()
                .map(|&c| {
                    local_train(
                        &model,
                        &fed.shards[c],
                        &train,
                        derive(cfg.seeds.clients, &[round as u64, c as u64]),
                    )
                })
                .collect::<gradamp::Result<_>>()?;
            let uploads = if fed.attack != AttackKind::None && round >= attack_start {
                craft(cfg, &fed, &model, &train, round, &participants, &honest)?
            } else {
                honest
            };
            let reference = if fed.aggregator.family == Family::FlTrust {
                Some(local_train(
                    &model,
                    &fed.validation,
                    &train,
                    derive(cfg.seeds.clients, &[round as u64, u64::MAX - 1]),
                )?)
            } else {
                None
            };
            let ctx = RoundContext {
                model: &model,
                validation: &fed.validation,
                reference: reference.as_ref(),
            };
            let ta = Instant::now();
            let decision = aggregate_round(&uploads, &fed.aggregator, &ctx)?;
            out.aggregation_ms.push(ta.elapsed().as_secs_f64() * 1e3);
            for w in &decision.warnings {
                log::warn!("round {round}: {w}");
            }
            for (i, &c) in participants.iter().enumerate() {
                let bad = fed.malicious.binary_search(&c).is_ok();
                out.decisions
                    .push(mark_row(round, c, bad, &cast_mark(&decision.per_client[i])));
            }
            if cfg.output.dump_round == Some(round) {
                let (amped, _) = amplified_for_scoring(&uploads, &fed.aggregator, &ctx)?;
                for (a, &c) in amped.iter().zip(&participants) {
                    out.amplified.push(AmplifiedRow {
                        client: c,
                        values: a.values.iter().map(|v| v.as_f64()).collect(),
                    });
                }
            }
            if !decision.global_update.is_finite() {
                return Err(gradamp::Error::NonFinite(format!("aggregated update in round {round}")));
            }
            model = apply_update(&model, &decision.global_update, global_lr)?;
            let done = round + 1;
            if done % cfg.run.checkpoint_every == 0 || done == cfg.run.rounds {
                return record(&fed, &model, done).map(Some);
            }
            Ok(None)
        };
        match step() {
            Ok(Some(r)) => out.records.push(r),
            Ok(None) => {}
            Err(e) => {
                log::error!("round {round} aborted: {e}");
                out.failure = Some((round, e.to_string()));
                break;
            }
        }
        out.round_ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    Ok(out)
}

/// Runs the federation in memory. Setup problems are configuration errors;
/// a failing round is reported through [`RunOutcome::failure`].
pub fn simulate(cfg: &ExperimentConfig, role: Role) -> HarnessResult<RunOutcome> {
    match cfg.run.precision {
        Precision::F64 => simulate_typed::<f64>(cfg, role),
        Precision::F32 => simulate_typed::<f32>(cfg, role),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn rounds_csv(records: &[RoundRecord]) -> String {
    let mut s = String::from("round,test_accuracy,asr\n");
    for r in records {
        let _ = writeln!(s, "{},{},{}", r.round, r.test_accuracy, fmt_opt(r.asr));
    }
    s
}

pub fn decisions_csv(rows: &[DecisionRow]) -> String {
    let mut s = String::from("round,client_id,malicious,score,error_rate,whitelisted\n");
    for d in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            d.round,
            d.client,
            u8::from(d.malicious),
            fmt_opt(d.score),
            fmt_opt(d.error_rate),
            u8::from(d.accepted)
        );
    }
    s
}

fn timing_csv(out: &RunOutcome) -> String {
    let mut s = String::from("round,aggregation_ms,round_ms\n");
    for (i, (a, r)) in out.aggregation_ms.iter().zip(&out.round_ms).enumerate() {
        let _ = writeln!(s, "{i},{a:.3},{r:.3}");
    }
    s
}

fn amplified_csv(rows: &[AmplifiedRow]) -> String {
    let mut s = String::from("client_id,index,value\n");
    for r in rows {
        for (i, v) in r.values.iter().enumerate() {
            let _ = writeln!(s, "{},{i},{v}", r.client);
        }
    }
    s
}

pub(crate) fn write(path: &Path, text: &str) -> HarnessResult<()> {
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

/// Runs one configuration and writes its artifacts into `dir`. Returns the
/// manifest path; an aborted run still writes a manifest before failing.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    dir: &Path,
    role: Role,
    baseline: Option<&Path>,
) -> HarnessResult<PathBuf> {
    let started = Instant::now();
    let out = simulate(cfg, role)?;
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    write(&dir.join("config.toml"), &cfg.to_toml())?;
    write(&dir.join("rounds.csv"), &rounds_csv(&out.records))?;
    write(&dir.join("decisions.csv"), &decisions_csv(&out.decisions))?;
    let mut timing = timing_csv(&out);
    let _ = writeln!(timing, "total,,{:.3}", started.elapsed().as_secs_f64() * 1e3);
    write(&dir.join("timing.csv"), &timing)?;
    let mut files = vec!["config.toml", "rounds.csv", "decisions.csv"];
    if !out.amplified.is_empty() {
        write(&dir.join("amplified.csv"), &amplified_csv(&out.amplified))?;
        files.push("amplified.csv");
    }

    let attack = if role.attacked() {
        cfg.attack.kind.clone()
    } else {
        "none".into()
    };
    let mut m = Manifest::default();
    m.set("run_id", format!("{}/{}", cfg.run.name, role.name()));
    m.set("role", role.name());
    m.set("status", if out.failure.is_some() { "aborted" } else { "ok" });
    m.set("config_hash", cfg.hash());
    m.set("seeds.data", cfg.seeds.data);
    m.set("seeds.clients", cfg.seeds.clients);
    m.set("seeds.attack", cfg.seeds.attack);
    m.set("defense", cfg.defense.label());
    m.set("attack", attack);
    m.set("clients", cfg.run.clients);
    m.set("rounds", cfg.run.rounds);
    m.set("start_round", cfg.attack.start_round);
    m.set(
        "malicious",
        out.malicious
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(" "),
    );
    m.set("heterogeneity", out.heterogeneity);
    if let Some(b) = baseline {
        m.set("baseline", b.display());
    }
    m.set("records", "rounds.csv");
    m.set("decisions", "decisions.csv");
    if !out.amplified.is_empty() {
        m.set("amplified", "amplified.csv");
        m.set("dump_round", cfg.output.dump_round.unwrap_or(0));
    }
    m.set("timing", "timing.csv");
    for f in files {
        m.set(format!("sha256.{f}"), sha256_file(&dir.join(f))?);
    }
    if let Some((round, cause)) = &out.failure {
        m.set("error_round", round);
        m.set("error", cause.replace('\n', " "));
    }
    let path = dir.join("manifest.txt");
    write(&path, &m.render())?;
    if let Some((round, cause)) = out.failure {
        return Err(HarnessError::Runtime(format!("run aborted in round {round}: {cause}")));
    }
    Ok(path)
}

/// Clean twin and attacked run into `dir/clean` and `dir/attacked`, then a
/// report over both into `dir`.
pub fn run_pair(cfg: &ExperimentConfig, dir: &Path) -> HarnessResult<(PathBuf, PathBuf)> {
    let kind = cfg.attack.kind()?;
    if kind == AttackKind::None {
        return Err(HarnessError::Config(
            "run-pair needs attack.kind other than none".into(),
        ));
    }
    let clean = run_experiment(cfg, &dir.join("clean"), Role::Clean, None)?;
    let attacked = run_experiment(
        cfg,
        &dir.join("attacked"),
        Role::Attacked,
        Some(Path::new("../clean/manifest.txt")),
    )?;
    crate::report::report(&[clean.clone(), attacked.clone()], dir)?;
    Ok((clean, attacked))
}
