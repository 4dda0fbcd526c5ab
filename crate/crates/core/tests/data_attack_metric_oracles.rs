use gradamp::attacks::{
    choose_malicious, combined_attack, dba_part, flip_labels, grad_ascent, scale_attack, sh_optimized, AdversaryView,
};
use gradamp::data::{
    embed_trigger, parse_csv, parse_idx, partition, sample_validation, synth_blobs, synth_images, triggered_set,
    Dataset, PartitionScheme, TriggerSpec, ValidationMode, ValidationSpec,
};
use gradamp::metrics::{avg_asr, avg_ta_loss, heterogeneity, negative_pulse, MonitorWindow, RoundRecord};
use gradamp::nn::{local_train, GradientSet, ModelParams, TrainParams};
use gradamp::tensor::{cosine, Tensor};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn rec(round: usize, acc: f64, asr: Option<f64>) -> RoundRecord {
    RoundRecord {
        round,
        test_accuracy: acc,
        asr,
    }
}

#[test]
fn metric_fixtures() {
    let w = MonitorWindow { r0: 5, r1: 10 };
    let clean = [rec(0, 0.1, None), rec(5, 0.8, None), rec(10, 0.9, None)];
    let attacked = [rec(0, 0.1, Some(0.9)), rec(5, 0.5, Some(0.1)), rec(10, 0.6, Some(0.3))];
    assert!((avg_ta_loss(&clean, &attacked, w).unwrap() - 0.3).abs() <= 1e-12);
    assert!((avg_asr(&attacked, w).unwrap() - 0.2).abs() <= 1e-12);
    assert_eq!(avg_ta_loss(&clean, &clean, w).unwrap(), 0.0);
    assert!(avg_ta_loss(&clean, &attacked, MonitorWindow { r0: 11, r1: 20 }).is_err());
}

#[test]
fn asr_fixture() {
    // Single dense layer whose logits copy the input; samples favour class 1
    // except one.
    let mut model = ModelParams::<f64>::mlp(2, &[], 2, 0).unwrap();
    let w = &mut model.params_mut()[0];
    w.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    model.params_mut()[1].data_mut().fill(0.0);
    let x = Tensor::new(vec![4, 2], vec![0.0, 1.0, 0.2, 0.9, 1.0, 0.0, 0.1, 0.5]).unwrap();
    let d = Dataset::new(x, vec![0, 0, 0, 0], 2).unwrap();
    assert!((gradamp::metrics::asr(&model, &d, 1).unwrap() - 0.75).abs() <= 1e-12);
}

#[test]
fn heterogeneity_fixtures() {
    let same = Dataset::new(
        Tensor::new(vec![3, 2], vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap(),
        vec![0; 3],
        1,
    )
    .unwrap();
    assert!(heterogeneity(&same, true).unwrap().score.abs() <= 1e-12);
    let orth = Dataset::new(
        Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 3.0]).unwrap(),
        vec![0; 2],
        1,
    )
    .unwrap();
    assert!((heterogeneity(&orth, true).unwrap().score - 0.5).abs() <= 1e-12);
    assert!((heterogeneity(&orth, false).unwrap().score - 1.0).abs() <= 1e-12);
}

#[test]
fn negative_pulse_fixtures() {
    let recs = [
        rec(0, 0.5, None),
        rec(5, 0.9, None),
        rec(10, 0.4, None),
        rec(15, 0.95, None),
    ];
    assert!((negative_pulse(&recs, 10) - 0.5).abs() <= 1e-12);
    assert_eq!(negative_pulse(&recs, 15), 0.0);
}

#[test]
fn label_skew_at_uniform_q_looks_iid() {
    // With q = 1/M every group is equally likely, so client and label are
    // independent. Count chi-square rejections at 5% over 100 seeds.
    let m = 4;
    let labels: Vec<usize> = (0..800).map(|i| i % m).collect();
    let chi = ChiSquared::new(((10 - 1) * (m - 1)) as f64).unwrap();
    let mut rejected = [0usize; 2];
    for seed in 0..100u64 {
        for (k, scheme) in [PartitionScheme::Iid, PartitionScheme::LabelSkew { q: 1.0 / m as f64 }]
            .into_iter()
            .enumerate()
        {
            let plan = partition(&labels, m, 10, scheme, seed).unwrap();
            let table: Vec<Vec<f64>> = plan
                .client_shards
                .iter()
                .map(|s| {
                    let mut c = vec![0.0; m];
                    for &i in s {
                        c[labels[i]] += 1.0;
                    }
                    c
                })
                .collect();
            let total: f64 = table.iter().flatten().sum();
            let col: Vec<f64> = (0..m).map(|j| table.iter().map(|r| r[j]).sum()).collect();
            let mut stat = 0.0;
            for row in &table {
                let rs: f64 = row.iter().sum();
                for j in 0..m {
                    let e = rs * col[j] / total;
                    stat += (row[j] - e).powi(2) / e;
                }
            }
            if 1.0 - chi.cdf(stat) < 0.05 {
                rejected[k] += 1;
            }
        }
    }
    assert!(rejected[0] <= 12, "iid rejections {}", rejected[0]);
    assert!(rejected[1] <= 12, "skew rejections {}", rejected[1]);
}

#[test]
fn full_skew_gives_master_labels_only() {
    let labels: Vec<usize> = (0..300).map(|i| i % 3).collect();
    let plan = partition(&labels, 3, 6, PartitionScheme::LabelSkew { q: 1.0 }, 4).unwrap();
    for (c, shard) in plan.client_shards.iter().enumerate() {
        assert!(shard.iter().all(|&i| labels[i] == c % 3));
    }
}

#[test]
fn biased_validation_at_prior_matches_uniform_share() {
    let pool = synth_blobs::<f64>(5, 200, 3, 1.0, 0).unwrap();
    let theta = 0.2;
    let biased = sample_validation(
        &pool,
        &ValidationSpec {
            size: 100,
            mode: ValidationMode::Biased { theta, class: 2 },
        },
        1,
    )
    .unwrap();
    assert_eq!(biased.class_counts()[2], 20);
    let mean: f64 = (0..200u64)
        .map(|s| {
            sample_validation(&pool, &ValidationSpec::default(), s)
                .unwrap()
                .class_counts()[2] as f64
        })
        .sum::<f64>()
        / 200.0;
    assert!((mean - 20.0).abs() < 1.0, "uniform mean {mean}");
}

#[test]
fn dba_parts_cover_the_full_trigger() {
    let spec = TriggerSpec::<f64>::patch(&[1, 8, 8], 4, 1.0, 0)
        .unwrap()
        .split(4)
        .unwrap();
    let full = spec.mask(64, None);
    let mut union = vec![false; 64];
    let mut total = 0;
    for p in 0..4 {
        let m = spec.mask(64, Some(p));
        total += m.iter().filter(|b| **b).count();
        for (u, v) in union.iter_mut().zip(m) {
            *u |= v;
        }
    }
    assert_eq!(union, full);
    assert_eq!(total, 16);
    let mal = choose_malicious(10, 0.4, 3);
    let parts: Vec<usize> = mal.iter().map(|&c| dba_part(c, &mal, 4).unwrap()).collect();
    assert_eq!(parts, vec![0, 1, 2, 3]);
}

#[test]
fn triggered_set_excludes_target_and_stamps_everything() {
    let test = synth_images::<f64>(3, 4, [1, 5, 5], 0.1, 2).unwrap();
    let spec = TriggerSpec::patch(&[1, 5, 5], 2, 1.0, 1).unwrap();
    let t = triggered_set(&test, &spec).unwrap();
    assert_eq!(t.len(), 8);
    let mask = spec.mask(25, None);
    for i in 0..t.len() {
        assert_ne!(t.labels()[i], 1);
        assert!(t.sample(i).iter().zip(&mask).all(|(v, m)| !m || *v == 1.0));
    }
    let e = embed_trigger(&test, &spec, 0.5, 0, 7).unwrap();
    assert_eq!(e.len(), 12 + 6);
    assert!(e.labels()[12..].iter().all(|&l| l == 1));
}

#[test]
fn io_fixtures() {
    let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 1];
    img.extend_from_slice(&[0, 255, 51, 102]);
    let lab = [0, 0, 8, 1, 0, 0, 0, 2, 3, 7];
    let d = parse_idx::<f64>(&img, &lab).unwrap();
    assert_eq!(d.sample_shape(), &[1, 2, 1]);
    assert_eq!(d.sample(0), &[0.0, 1.0]);
    assert_eq!(d.labels(), &[3, 7]);

    match parse_csv::<f64>("1,2,0\n3,x,1\n") {
        Err(gradamp::Error::Ingest { offset, .. }) => assert_eq!(offset, 8),
        other => panic!("{other:?}"),
    }
}

fn shard() -> Dataset<f64> {
    synth_blobs(3, 10, 4, 0.5, 9).unwrap()
}

fn train() -> TrainParams {
    TrainParams {
        epochs: 1,
        batch_size: 5,
        lr: 0.1,
    }
}

#[test]
fn combined_attack_is_the_sum_of_its_parts() {
    let model = ModelParams::<f64>::mlp(4, &[5], 3, 3).unwrap();
    let s = shard();
    let benign = local_train(&model, &s, &train(), 1).unwrap();
    let got = combined_attack(&s, &benign, &model, &train(), 1.5, 2).unwrap();
    let flipped = local_train(&model, &flip_labels(&s).unwrap(), &train(), 2).unwrap();
    let want = flipped.add(&grad_ascent(&benign, 1.5));
    for (a, b) in got.flatten().iter().zip(want.flatten()) {
        assert!((a - b).abs() <= 1e-12);
    }
    assert_eq!(flip_labels(&s).unwrap().labels()[..3], [2, 1, 0]);
}

#[test]
fn scale_attack_norm_is_linear_in_lambda() {
    let model = ModelParams::<f64>::mlp(4, &[5], 3, 3).unwrap();
    let spec = TriggerSpec::features(&[0, 1], 3.0, 0).unwrap();
    let one = scale_attack(&shard(), &spec, 1.0, &model, &train(), 0.5, 4).unwrap();
    let ten = scale_attack(&shard(), &spec, 10.0, &model, &train(), 0.5, 4).unwrap();
    assert!((ten.norm() - 10.0 * one.norm()).abs() <= 1e-9 * ten.norm());
    assert!(scale_attack(&shard(), &spec, 0.0, &model, &train(), 0.5, 4).is_err());
}

#[test]
fn optimized_attack_stays_as_aligned_as_the_median() {
    let model = ModelParams::<f64>::mlp(4, &[5], 3, 3).unwrap();
    let data = synth_blobs::<f64>(3, 40, 4, 0.8, 1).unwrap();
    let benign: Vec<GradientSet<f64>> = (0..7)
        .map(|c| {
            let idx: Vec<usize> = (0..data.len()).filter(|i| i % 7 == c).collect();
            local_train(&model, &data.subset(&idx), &train(), c as u64).unwrap()
        })
        .collect();
    let view = AdversaryView {
        benign_updates: &benign,
        global_model: &model,
    };
    let out = sh_optimized(&view, 10.0).unwrap();
    let refs: Vec<&GradientSet<f64>> = benign.iter().collect();
    let mu = GradientSet::mean(&refs).flatten();
    let mut cs: Vec<f64> = benign.iter().map(|b| cosine(&b.flatten(), &mu)).collect();
    cs.sort_by(f64::total_cmp);
    let median = cs[cs.len() / 2];
    assert!(cosine(&out.update.flatten(), &mu) >= median - 1e-12);
    assert!(out.gamma > 0.0);

    let single = AdversaryView {
        benign_updates: &benign[..1],
        global_model: &model,
    };
    let s = sh_optimized(&single, 10.0).unwrap();
    assert_eq!(s.update, benign[0]);
    assert!(s.warning.is_some());
}
