use approx::assert_relative_eq;
use credence_core::prediction::{
    auc, expected_verification_time, predict_accepted_answer, prob_evaluated_within, AnswerRanker,
    StatementHazard,
};
use credence_core::quadrature::integrate_with_breaks;
use credence_core::simulator::{
    generate_synthetic_corpus, simulate_item, SourceSampler, SyntheticConfig,
};
use credence_core::{
    split_train_test, BasisKernel, Dataset, EventRecord, ItemHistory, ItemParams, KernelSet,
    ModelParams, ParamsFile, Polarity, SourceParams, SplitUnit, TriggerKernel,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rbf() -> impl Strategy<Value = BasisKernel> {
    (prop::collection::vec(-5.0..25.0f64, 1..5), 0.1..4.0f64).prop_map(|(mut c, s)| {
        c.sort_by(f64::total_cmp);
        c.dedup();
        BasisKernel::rbf(c, s).unwrap()
    })
}

fn kernel() -> impl Strategy<Value = BasisKernel> {
    prop_oneof![
        rbf(),
        (1.0..30.0f64).prop_map(|h| BasisKernel::constant(h).unwrap())
    ]
}

fn trigger() -> impl Strategy<Value = TriggerKernel> {
    prop_oneof![
        Just(TriggerKernel::Step),
        (0.01..5.0f64).prop_map(|w| TriggerKernel::exponential(w).unwrap())
    ]
}

/// Refutation model with one topic, `n` sources and one item "d".
fn model(kernels: KernelSet, alpha: Vec<f64>, beta: Vec<f64>) -> ModelParams {
    let n = alpha.len();
    let sources = alpha
        .iter()
        .enumerate()
        .map(|(s, a)| SourceParams {
            id: format!("s{s}"),
            alpha: vec![*a],
            gamma: vec![0.1],
        })
        .collect();
    let item = ItemParams {
        id: "d".into(),
        phi: vec![1.0; kernels.addition.len()],
        beta,
        w: vec![1.0],
    };
    ModelParams::new(
        Polarity::Refutation,
        20.0,
        1,
        kernels,
        0.0,
        sources,
        vec![item],
        vec![vec![1.0 / n as f64; n]],
    )
    .unwrap()
}

fn trace() -> impl Strategy<Value = Dataset> {
    let event = (0usize..4, 0.0..10.0f64, prop::option::of(0.0..12.0f64));
    prop::collection::vec(prop::collection::vec(event, 0..12), 1..10).prop_map(|items| {
        let items = items
            .into_iter()
            .enumerate()
            .map(|(i, evs)| {
                let events = evs
                    .into_iter()
                    .map(|(source, t_add, d)| EventRecord {
                        source,
                        t_add,
                        t_eval: d.map(|d| t_add + d).filter(|t| *t < 10.0),
                    })
                    .collect();
                ItemHistory::new(format!("d{i}"), events, 10.0)
            })
            .collect();
        Dataset::new(
            Polarity::Refutation,
            10.0,
            (0..4).map(|s| format!("s{s}")).collect(),
            items,
        )
        .unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn basis_integrals_are_additive_and_match_quadrature(k in kernel(), a in -5.0..30.0f64, x in 0.0..10.0f64, y in 0.0..10.0f64) {
        let (b, c) = (a + x, a + x + y);
        for j in 0..k.len() {
            let whole = k.integral(j, a, c).unwrap();
            let parts = k.integral(j, a, b).unwrap() + k.integral(j, b, c).unwrap();
            prop_assert!((whole - parts).abs() <= 1e-12 * whole.max(1.0));
            let numeric = integrate_with_breaks(|t| k.eval(j, t).unwrap(), a, c, &k.breakpoints(), 1e-14, 1e-12).value;
            prop_assert!((whole - numeric).abs() <= 1e-8 * whole.max(1e-3), "{whole} vs {numeric}");
        }
    }

    #[test]
    fn trigger_integrals_are_additive(g in trigger(), a in 0.0..10.0f64, x in 0.0..10.0f64, y in 0.0..10.0f64) {
        let whole = g.integral(a, a + x + y).unwrap();
        let parts = g.integral(a, a + x).unwrap() + g.integral(a + x, a + x + y).unwrap();
        prop_assert!((whole - parts).abs() <= 1e-12 * whole.max(1.0));
        prop_assert!(g.eval(a + x) <= g.eval(a) + 1e-15);
    }

    #[test]
    fn auc_is_invariant_under_monotone_maps(pairs in prop::collection::vec((-10.0..10.0f64, any::<bool>()), 2..60)) {
        let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(labels.iter().any(|l| *l) && labels.iter().any(|l| !*l));
        let base = auc(&scores, &labels).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| (0.3 * s).exp() * 5.0 + 2.0).collect();
        prop_assert!((auc(&mapped, &labels).unwrap() - base).abs() < 1e-12);
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((auc(&flipped, &labels).unwrap() - (1.0 - base)).abs() < 1e-12);
    }

    #[test]
    fn params_survive_a_json_round_trip(
        add in kernel(), eval in kernel(), g in trigger(),
        alpha in prop::collection::vec(0.0..5.0f64, 1..6),
        b in 0.0..3.0f64,
    ) {
        let kernels = KernelSet { addition: add, evaluation: eval, trigger: g };
        let beta = vec![b; kernels.evaluation.len()];
        let p = model(kernels, alpha, beta);
        let text = p.to_file(false).to_json().unwrap();
        let back = ParamsFile::from_json(&text).unwrap();
        prop_assert_eq!(back.to_json().unwrap(), text);
        prop_assert_eq!(back.model.items[0].beta.clone(), p.items[0].beta.clone());
        prop_assert_eq!(back.model.sources[0].alpha.clone(), p.sources[0].alpha.clone());
    }

    #[test]
    fn splits_are_deterministic_and_partition_the_trace(ds in trace(), seed in any::<u64>(), fraction in 0.1..0.9f64) {
        for unit in [SplitUnit::Event, SplitUnit::Item] {
            let Ok((train, test)) = split_train_test(&ds, fraction, seed, unit) else { continue };
            let (again, again_test) = split_train_test(&ds, fraction, seed, unit).unwrap();
            prop_assert_eq!(&train, &again);
            prop_assert_eq!(&test, &again_test);
            prop_assert_eq!(train.n_events() + test.n_events(), ds.n_events());
        }
    }

    #[test]
    fn shorter_observation_censors_more(ds in trace(), h1 in 0.5..10.0f64, h2 in 0.5..10.0f64) {
        let (short, long) = (h1.min(h2), h1.max(h2));
        let a = ds.truncate(short).unwrap();
        let b = ds.truncate(long).unwrap();
        prop_assert!(a.n_evaluated() <= b.n_evaluated());
        prop_assert!(a.n_events() <= b.n_events());
        prop_assert!(a.items().iter().flat_map(|d| &d.events).all(|e| e.t_add < short && e.t_eval.is_none_or(|t| t < short)));
    }

    #[test]
    fn evaluation_probability_grows_with_window_and_trust(
        eval in kernel(), b in 0.0..2.0f64, a1 in 0.0..3.0f64, a2 in 0.0..3.0f64,
        t_add in 0.0..15.0f64, w1 in 0.0..10.0f64, w2 in 0.0..10.0f64,
    ) {
        let kernels = KernelSet { addition: BasisKernel::constant(20.0).unwrap(), evaluation: eval, trigger: TriggerKernel::Step };
        let beta = vec![b; kernels.evaluation.len()];
        let p = model(kernels, vec![a1.min(a2), a1.max(a2)], beta);
        let item = &p.items[0];
        let e = |s| EventRecord { source: s, t_add, t_eval: None };
        let (lo, hi) = (StatementHazard::new(&p, item, &e(0)), StatementHazard::new(&p, item, &e(1)));
        let (w_lo, w_hi) = (w1.min(w2), w1.max(w2));
        prop_assert!(prob_evaluated_within(&lo, w_lo) <= prob_evaluated_within(&lo, w_hi) + 1e-15);
        prop_assert!(prob_evaluated_within(&lo, w_hi) <= prob_evaluated_within(&hi, w_hi) + 1e-15);
        let p_hi = prob_evaluated_within(&hi, w_hi);
        prop_assert!((0.0..=1.0).contains(&p_hi));
    }

    #[test]
    fn answer_choice_ignores_the_rate_scale(
        alpha in prop::collection::vec(0.01..3.0f64, 2..6), b in 0.0..2.0f64, scale in 0.05..20.0f64,
    ) {
        let n = alpha.len();
        let kernels = KernelSet::constant(20.0).unwrap();
        let p = model(kernels.clone(), alpha.clone(), vec![b]);
        let scaled = model(kernels, alpha.iter().map(|a| a * scale).collect(), vec![b * scale]);
        let q = ItemHistory::new(
            "d",
            (0..n).map(|s| EventRecord { source: s, t_add: 1.0, t_eval: None }).collect(),
            20.0,
        );
        let pick = |m: &ModelParams| predict_accepted_answer(&q, &AnswerRanker::Full { model: m, prior_beta: &[0.0] });
        prop_assert_eq!(pick(&p), pick(&scaled));
    }

    #[test]
    fn zero_difficulty_leaves_the_source_hazard(eval in kernel(), a in 0.0..3.0f64, t_add in 0.0..15.0f64, w in 0.0..10.0f64) {
        let kernels = KernelSet { addition: BasisKernel::constant(20.0).unwrap(), evaluation: eval, trigger: TriggerKernel::Step };
        let beta = vec![0.0; kernels.evaluation.len()];
        let p = model(kernels, vec![a], beta);
        let h = StatementHazard::new(&p, &p.items[0], &EventRecord { source: 0, t_add, t_eval: None });
        prop_assert!((prob_evaluated_within(&h, w) - (1.0 - (-a * w).exp())).abs() < 1e-12);
        let expected = if a > 0.0 { 1.0 / a } else { f64::INFINITY };
        let got = expected_verification_time(&h);
        prop_assert!(got == expected || (got - expected).abs() <= 1e-7 * expected);
    }
}

#[test]
fn simulated_events_respect_the_window() {
    let (ds, _) = generate_synthetic_corpus(&SyntheticConfig::desk_scale(20, 100, 9)).unwrap();
    for d in ds.items() {
        assert!(d.events.windows(2).all(|w| w[0].t_add <= w[1].t_add));
        for e in &d.events {
            assert!(e.t_add >= 0.0 && e.t_add < d.horizon);
            if let Some(t) = e.t_eval {
                assert!(t > e.t_add && t < d.horizon);
            }
        }
    }
}

#[test]
fn unexcited_constant_rate_gives_poisson_counts() {
    let kernels = KernelSet::constant(20.0).unwrap();
    let mut p = model(kernels, vec![0.5, 1.0], vec![0.2]);
    p.sources.iter_mut().for_each(|s| s.gamma = vec![0.0]);
    p.items[0].phi = vec![3.0];
    let sampler = SourceSampler::topic_mixture(&[1.0], &p.pi).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let counts: Vec<f64> = (0..2000)
        .map(|_| {
            simulate_item(&p, &p.items[0], &sampler, &mut rng)
                .unwrap()
                .len() as f64
        })
        .collect();
    let mean = counts.iter().sum::<f64>() / counts.len() as f64;
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (counts.len() - 1) as f64;
    // mean and variance of Poisson(60)
    assert_relative_eq!(mean, 60.0, max_relative = 0.02);
    assert_relative_eq!(var, 60.0, max_relative = 0.15);
}
