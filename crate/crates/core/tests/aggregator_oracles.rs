use gradamp::aggregators::{
    aggregate_round, ceil_count, density_whitelist, fang_whitelist, fltrust_aggregate, merged_whitelist,
    AggregatorConfig, Family, Metric, RoundContext,
};
use gradamp::amplifier::{AmplifiedGradient, AmplifierConfig};
use gradamp::data::{synth_blobs, Dataset};
use gradamp::nn::{local_train, GradientSet, ModelParams, TrainParams};
use gradamp::tensor::{cosine, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vec_grad(v: &[f64]) -> GradientSet<f64> {
    GradientSet::new(vec![Tensor::vector(v.to_vec())])
}

fn amp(v: &[f64]) -> AmplifiedGradient<f64> {
    AmplifiedGradient::identity(&vec_grad(v))
}

/// Independent density screen: score each client by the sum of its K
/// largest similarities (self included) and keep the best, lower index on
/// ties.
fn oracle_whitelist(vs: &[Vec<f64>], k: usize, keep: usize, euclid: bool) -> Vec<usize> {
    let n = vs.len();
    let sim = |a: &[f64], b: &[f64]| {
        if euclid {
            -a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        } else {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                d / (na * nb)
            }
        }
    };
    let scores: Vec<f64> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).map(|j| sim(&vs[i], &vs[j])).collect();
            row.sort_by(|a, b| b.total_cmp(a));
            row[..k].iter().sum()
        })
        .collect();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut w = idx[..keep].to_vec();
    w.sort();
    w
}

#[test]
fn four_client_density_fixture() {
    let vs = [[1.0, 0.0], [1.0, 0.01], [0.99, 0.0], [-1.0, 0.0]];
    let amped: Vec<_> = vs.iter().map(|v| amp(v)).collect();
    let (w, _) = density_whitelist(&amped, Metric::Cos, 3, 0.25).unwrap();
    assert_eq!(w, vec![0, 1, 2]);
    let owned: Vec<Vec<f64>> = vs.iter().map(|v| v.to_vec()).collect();
    assert_eq!(oracle_whitelist(&owned, 3, 3, false), vec![0, 1, 2]);
}

#[test]
fn density_matches_oracle_on_random_draws() {
    let mut r = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..200 {
        let n = r.random_range(2..=20);
        let d = r.random_range(1..=8);
        let mf = r.random_range(0.0..0.5);
        let k = r.random_range(n / 2 + 1..=n);
        let vs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        let amped: Vec<_> = vs.iter().map(|v| amp(v)).collect();
        let keep = ceil_count(1.0 - mf, n);
        for (metric, euc) in [(Metric::Cos, false), (Metric::Euc, true)] {
            let (w, _) = density_whitelist(&amped, metric, k, mf).unwrap();
            assert_eq!(w.len(), keep);
            assert_eq!(w, oracle_whitelist(&vs, k, keep, euc));
        }
    }
}

#[test]
fn neighbour_count_must_exceed_half() {
    let amped: Vec<_> = (0..4).map(|i| amp(&[i as f64, 1.0])).collect();
    assert!(density_whitelist(&amped, Metric::Cos, 2, 0.25).is_err());
    assert!(density_whitelist(&amped, Metric::Cos, 5, 0.25).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_whitelist_is_scale_invariant(
        seed in 0u64..10_000,
        scales in prop::collection::vec(0.1f64..10.0, 6),
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let vs: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let a: Vec<_> = vs.iter().map(|v| amp(v)).collect();
        let b: Vec<_> = vs.iter().zip(&scales).map(|(v, c)| amp(&v.iter().map(|x| x * c).collect::<Vec<_>>())).collect();
        let (wa, sa) = density_whitelist(&a, Metric::Cos, 4, 0.3).unwrap();
        let (wb, sb) = density_whitelist(&b, Metric::Cos, 4, 0.3).unwrap();
        // Identical unless two scores are within rounding of each other.
        let mut sorted = sa.clone();
        sorted.sort_by(f64::total_cmp);
        let close = sorted.windows(2).any(|p| (p[1] - p[0]).abs() < 1e-9);
        prop_assert!(wa == wb || close);
        for (x, y) in sa.iter().zip(&sb) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn merged_falls_back_to_cosine_when_disjoint() {
    // Cos keeps the three long collinear vectors; Euclid keeps the short
    // cluster near the origin.
    let vs = [
        vec![10.0, 0.0],
        vec![0.0, 0.1],
        vec![20.0, 0.0],
        vec![-0.1, 0.05],
        vec![30.0, 0.0],
        vec![0.05, -0.1],
    ];
    let amped: Vec<_> = vs.iter().map(|v| amp(v)).collect();
    let (cos, _) = density_whitelist(&amped, Metric::Cos, 4, 0.5).unwrap();
    let (euc, _) = density_whitelist(&amped, Metric::Euc, 4, 0.5).unwrap();
    assert!(
        cos.iter().all(|i| !euc.contains(i)),
        "fixture not disjoint: {cos:?} {euc:?}"
    );
    let (w, _, warn) = merged_whitelist(&amped, 4, 0.5).unwrap();
    assert_eq!(w, cos);
    assert!(warn.is_some());
}

#[test]
fn fltrust_fixtures() {
    let g0 = vec_grad(&[2.0, 0.0]);
    let a0 = amp(&[2.0, 0.0]);

    let same = fltrust_aggregate(&[amp(&[4.0, 0.0])], &a0, &[vec_grad(&[4.0, 0.0])], &g0).unwrap();
    assert!((same.trust_scores.as_ref().unwrap()[0] - 1.0).abs() <= 1e-12);

    let opposed = fltrust_aggregate(
        &[amp(&[-1.0, 0.0]), amp(&[1.0, 1.0])],
        &a0,
        &[vec_grad(&[-1.0, 0.0]), vec_grad(&[1.0, 1.0])],
        &g0,
    )
    .unwrap();
    assert_eq!(opposed.trust_scores.as_ref().unwrap()[0], 0.0);

    // TS = {1, 0}, ‖g0‖ = 2, ‖g1‖ = 4 → 0.5 · g1.
    let g1 = vec_grad(&[0.0, 4.0]);
    let g2 = vec_grad(&[-3.0, 0.0]);
    let out = fltrust_aggregate(&[amp(&[1.0, 0.0]), amp(&[-1.0, 0.0])], &a0, &[g1.clone(), g2], &g0).unwrap();
    let want = g1.scaled(0.5);
    for (x, y) in out.global_update.flatten().iter().zip(want.flatten()) {
        assert!((x - y).abs() <= 1e-12);
    }
    // Rescaled norm equals the reference norm.
    assert!((out.global_update.norm() - 2.0).abs() <= 1e-12);
}

#[test]
fn fltrust_scores_amplified_but_sums_originals() {
    // The amplified vectors say client 1 is untrusted even though its
    // original is aligned with the reference.
    let g0 = vec_grad(&[1.0, 0.0]);
    let originals = [vec_grad(&[3.0, 0.0]), vec_grad(&[5.0, 0.0])];
    let amped = [amp(&[1.0, 0.0]), amp(&[-1.0, 0.0])];
    let out = fltrust_aggregate(&amped, &amp(&[1.0, 0.0]), &originals, &g0).unwrap();
    assert_eq!(out.trust_scores.unwrap(), vec![1.0, 0.0]);
    assert_eq!(out.global_update.flatten(), vec![1.0, 0.0]);
}

#[test]
fn fltrust_zero_trust_gives_zero_update() {
    let g0 = vec_grad(&[1.0, 0.0]);
    let out = fltrust_aggregate(&[amp(&[-1.0, 0.0])], &amp(&[1.0, 0.0]), &[vec_grad(&[-1.0, 0.0])], &g0).unwrap();
    assert!(out.global_update.flatten().iter().all(|v| *v == 0.0));
    assert!(!out.warnings.is_empty());
}

fn blobs() -> Dataset<f64> {
    synth_blobs(3, 30, 6, 0.6, 11).unwrap()
}

#[test]
fn fang_rejects_the_saboteur() {
    let data = blobs();
    let model = ModelParams::<f64>::mlp(6, &[8], 3, 2).unwrap();
    let train = TrainParams {
        epochs: 3,
        batch_size: 8,
        lr: 0.2,
    };
    let mut grads: Vec<GradientSet<f64>> = (0..4)
        .map(|c| {
            let idx: Vec<usize> = (0..data.len()).filter(|i| i % 4 == c).collect();
            local_train(&model, &data.subset(&idx), &train, c as u64).unwrap()
        })
        .collect();
    // Client 2 uploads the ascent direction of its honest update, inflated.
    grads[2] = grads[2].scaled(-20.0);
    let (keep, marks) = fang_whitelist(&grads, &model, &data, 0.25).unwrap();
    assert!(!keep.contains(&2), "kept {keep:?}, marks {marks:?}");
    assert_eq!(keep.len(), 3);
}

#[test]
fn identical_clients_average_to_the_client() {
    let data = blobs();
    let model = ModelParams::<f64>::mlp(6, &[4], 3, 9).unwrap();
    let g = local_train(&model, &data, &TrainParams::default(), 1).unwrap();
    let grads = vec![g.clone(); 5];
    let ctx = RoundContext {
        model: &model,
        validation: &data,
        reference: Some(&g),
    };
    for family in [
        Family::FedAvg,
        Family::DistCos,
        Family::DistEuc,
        Family::DistMerged,
        Family::Fang,
        Family::FlTrust,
    ] {
        for amp in [AmplifierConfig::default(), AmplifierConfig::mp(3)] {
            let cfg = AggregatorConfig::new(family, amp, 0.2);
            let d = aggregate_round(&grads, &cfg, &ctx).unwrap();
            for (x, y) in d.global_update.flatten().iter().zip(g.flatten()) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{family:?}");
            }
        }
    }
}

#[test]
fn cosine_helper_is_zero_for_null_vectors() {
    assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
}
