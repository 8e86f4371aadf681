mod common;

use std::collections::BTreeMap;

use common::*;
use crossbias::audit::{collect_audit_data, AnalyticAuditor, BackendAuditor};
use crossbias::backends::synthetic::{SyntheticBackend, SyntheticWorld, WorldMode, WorldSpec};
use crossbias::counterfactuals::{pm_mitigate, PromptComposer};
use crossbias::intermit::{select_axis, PriorityVector};
use crossbias::metrics::{
    bias_deviation, build_matrix, intersectional_sensitivity, intervened_distribution, perturb_answers, w1_probs,
    AuditData, RowData, Sample,
};
use crossbias::{AttributeDistribution, AuditConfig, IdealDistribution, Transport};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0u32..1000, k).prop_filter_map("all-zero weights", |w| {
        let s: u32 = w.iter().sum();
        (s > 0).then(|| w.iter().map(|&x| x as f64 / s as f64).collect())
    })
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..=6).prop_flat_map(|k| (simplex(k), simplex(k)))
}

fn triple() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (2usize..=6).prop_flat_map(|k| (simplex(k), simplex(k), simplex(k)))
}

fn transports() -> impl Strategy<Value = Transport> {
    prop_oneof![Just(Transport::Ordinal), Just(Transport::Nominal)]
}

fn dist(p: &[f64]) -> AttributeDistribution {
    AttributeDistribution::new("y", p.to_vec(), 0).unwrap()
}

proptest! {
    #[test]
    fn closed_form_matches_transport_lp((p, q) in pair(), t in transports()) {
        let lp = lp_w1(&p, &q, t == Transport::Ordinal);
        prop_assert!((w1_probs(&p, &q, t) - lp).abs() < 1e-9);
    }

    #[test]
    fn w1_is_a_metric((p, q, r) in triple(), t in transports()) {
        let d = |a: &[f64], b: &[f64]| w1_probs(a, b, t);
        prop_assert_eq!(d(&p, &p), 0.0);
        prop_assert!((d(&p, &q) - d(&q, &p)).abs() < 1e-12);
        prop_assert!(d(&p, &r) <= d(&p, &q) + d(&q, &r) + 1e-9);
        if p != q {
            prop_assert!(d(&p, &q) > 0.0);
        }
    }

    #[test]
    fn normalized_deviation_in_unit_interval((d, ideal) in pair(), t in transports()) {
        let ideal = IdealDistribution::new("y", ideal).unwrap();
        let dev = bias_deviation(&dist(&d), &ideal, t).unwrap();
        prop_assert!((0.0..=1.0).contains(&dev.w_bar));
        let worst = (0..ideal.probs.len())
            .map(|c| bias_deviation(&dist(&point_mass(ideal.probs.len(), c)), &ideal, t).unwrap().w_bar)
            .fold(0.0, f64::max);
        prop_assert!((worst - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sensitivity_bounded_and_zero_without_change((a, b, ideal) in triple(), t in transports()) {
        let ideal = IdealDistribution::new("y", ideal).unwrap();
        let init = bias_deviation(&dist(&a), &ideal, t).unwrap();
        let after = bias_deviation(&dist(&b), &ideal, t).unwrap();
        let e = intersectional_sensitivity("x", "y", init, after, b.clone());
        prop_assert!((-1.0..=1.0).contains(&e.is_value));
        prop_assert_eq!(intersectional_sensitivity("x", "y", init, init, a).is_value, 0.0);
    }

    #[test]
    fn intervened_distribution_ignores_input_order(
        dists in (2usize..=5, 2usize..=6).prop_flat_map(|(k, n)| prop::collection::vec(simplex(k), n)),
        seed in any::<u64>(),
    ) {
        let a: Vec<_> = dists.iter().map(|p| dist(p)).collect();
        let mut b = a.clone();
        b.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let x = intervened_distribution(&a).unwrap();
        let y = intervened_distribution(&b).unwrap();
        prop_assert_eq!(
            x.probs.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            y.probs.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        prop_assert!((x.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn priority_scaling_keeps_selection(
        values in prop::collection::vec(-1.0f64..1.0, 9),
        weights in prop::collection::vec(0.01f64..1.0, 3),
        scale in 0.1f64..50.0,
    ) {
        let axes = synthetic_axes(&[2, 2, 2]);
        let config = config_with_world(axes.clone(), WorldSpec::default());
        let mut auditor = AnalyticAuditor::new(SyntheticWorld::new(&axes, &WorldSpec::default()).unwrap());
        let composer = PromptComposer::new(&config);
        let data = collect_audit_data(&mut auditor, &composer, &composer.initial_set().unwrap(), "audit").unwrap();
        let mut m = build_matrix(&config.axes, &config.ideals(), config.transport, &data).unwrap();
        for (e, v) in m.entries.iter_mut().zip(&values) {
            e.is_value = *v;
        }
        let raw = |s: f64| -> BTreeMap<String, f64> {
            axes.iter().zip(&weights).map(|(a, w)| (a.id.clone(), w * s)).collect()
        };
        let (p1, _) = PriorityVector::normalized(raw(1.0)).unwrap();
        let (p2, _) = PriorityVector::normalized(raw(scale)).unwrap();
        let mut excluded = Vec::new();
        for _ in 0..3 {
            let a = select_axis(&m, &p1, &excluded).unwrap().axis;
            let b = select_axis(&m, &p2, &excluded).unwrap().axis;
            prop_assert_eq!(&a, &b);
            excluded.push(a);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn analytic_matrix_matches_enumeration(
        ks in prop::collection::vec(2usize..=3, 2..=4),
        seed in any::<u64>(),
        strength in 0.0f64..4.0,
    ) {
        let axes = synthetic_axes(&ks);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let factors = random_factors(&mut rng, &axes, strength);
        let config = config_with_world(axes.clone(), WorldSpec::with_factors(factors.clone()));
        let mut auditor = AnalyticAuditor::new(SyntheticWorld::new(&axes, config.synthetic.as_ref().unwrap()).unwrap());
        let composer = PromptComposer::new(&config);
        let data = collect_audit_data(&mut auditor, &composer, &composer.initial_set().unwrap(), "audit").unwrap();
        let m = build_matrix(&config.axes, &config.ideals(), Transport::Ordinal, &data).unwrap();
        let oracle = joint_from_factors(&axes, &factors).sensitivity(true);
        for (r, row) in oracle.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                prop_assert!((m.value(r, c) - v).abs() < 1e-9, "entry ({r},{c}): {} vs {v}", m.value(r, c));
            }
        }
    }

    #[test]
    fn matrix_ignores_record_and_counterfactual_order(seed in any::<u64>(), shuffle_seed in any::<u64>()) {
        let axes = synthetic_axes(&[2, 3, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut world = WorldSpec::with_factors(random_factors(&mut rng, &axes, 2.0));
        world.mode = WorldMode::Sampled;
        let mut config = config_with_world(axes.clone(), world.clone());
        config.image_budget = 60;
        let backend = SyntheticBackend::new(SyntheticWorld::new(&axes, &world).unwrap());
        let mut auditor = BackendAuditor::new(backend, &config);
        let composer = PromptComposer::new(&config);
        let data = collect_audit_data(&mut auditor, &composer, &composer.initial_set().unwrap(), "audit").unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        let mut shuffle = |s: &Sample| {
            let mut r = s.records().unwrap().to_vec();
            r.shuffle(&mut rng);
            Sample::Records(r)
        };
        let init = shuffle(&data.init);
        let rows = data
            .rows
            .iter()
            .map(|(axis, row)| {
                let row = match row {
                    RowData::Counterfactuals { samples } => {
                        let mut samples: Vec<_> = samples.iter().map(|(c, s)| (c.clone(), shuffle(s))).collect();
                        samples.reverse();
                        RowData::Counterfactuals { samples }
                    }
                    RowData::AlreadyMitigated => RowData::AlreadyMitigated,
                };
                (axis.clone(), row)
            })
            .collect();
        let shuffled = AuditData { init, rows };
        let a = build_matrix(&config.axes, &config.ideals(), config.transport, &data).unwrap();
        let b = build_matrix(&config.axes, &config.ideals(), config.transport, &shuffled).unwrap();
        let bits = |m: &crossbias::SensitivityMatrix| m.entries.iter().map(|e| e.is_value.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn pm_counts_weights_and_order(i in 0usize..8, j in 0usize..8, order in any::<bool>()) {
        prop_assume!(i != j);
        let bank = crossbias::bank::OccupationBank::load();
        let config = bank.config_for("nurse").unwrap();
        let composer = PromptComposer::new(&config);
        let base = composer.initial_set().unwrap();
        let (x, y) = (&config.axes[i], &config.axes[j]);
        prop_assume!(x.k() * y.k() <= 48);
        let (first, second) = if order { (x, y) } else { (y, x) };
        let one = pm_mitigate(&composer, &base, first, 48).unwrap();
        let two = pm_mitigate(&composer, &one, second, 48).unwrap();
        prop_assert_eq!(two.variants.len(), x.k() * y.k());
        prop_assert!((two.variants.iter().map(|v| v.weight).sum::<f64>() - 1.0).abs() < 1e-12);
        let other = pm_mitigate(&composer, &pm_mitigate(&composer, &base, second, 48).unwrap(), first, 48).unwrap();
        let key = |s: &crossbias::counterfactuals::PromptSet| {
            let mut v: Vec<_> = s.variants.iter().map(|v| (v.prompt.clone(), v.weight.to_bits())).collect();
            v.sort();
            v
        };
        prop_assert_eq!(key(&two), key(&other));
    }

    #[test]
    fn answer_flips_within_binomial_bounds(rate in 0.01f64..0.9, seed in any::<u64>()) {
        let axes = synthetic_axes(&[2, 4]);
        let world = WorldSpec { mode: WorldMode::Sampled, ..WorldSpec::default() };
        let mut config = config_with_world(axes.clone(), world.clone());
        config.image_budget = 2000;
        let backend = SyntheticBackend::new(SyntheticWorld::new(&axes, &world).unwrap());
        let mut auditor = BackendAuditor::new(backend, &config);
        let composer = PromptComposer::new(&config);
        let records = crossbias::audit::Auditor::audit(&mut auditor, &composer.initial_set().unwrap(), "flip")
            .unwrap()
            .records()
            .unwrap()
            .to_vec();
        let flipped = perturb_answers(&records, &axes, rate, seed).unwrap();
        let n = (records.len() * axes.len()) as f64;
        let changed = records
            .iter()
            .zip(&flipped)
            .flat_map(|(a, b)| axes.iter().map(move |x| a.attributes[&x.id] != b.attributes[&x.id]))
            .filter(|c| *c)
            .count() as f64;
        let sigma = (n * rate * (1.0 - rate)).sqrt();
        prop_assert!((changed - n * rate).abs() <= 4.0 * sigma, "{changed} flips, expected {}", n * rate);
    }
}

#[test]
fn config_documents_round_trip() {
    let bank = crossbias::bank::OccupationBank::load();
    for name in ["nurse", "announcer", "scientist"] {
        let mut config = bank.config_for(name).unwrap();
        config.synthetic = Some(WorldSpec::random(&config.axes, 3, 1.0));
        let back = AuditConfig::from_json(&config.to_json()).unwrap();
        assert_eq!(back, config);
    }
}

#[test]
fn point_mass_ideal_is_degenerate_not_nan() {
    let ideal = IdealDistribution::new("y", vec![1.0, 0.0]).unwrap();
    let dev = bias_deviation(&dist(&[1.0, 0.0]), &ideal, Transport::Ordinal).unwrap();
    assert_eq!(dev.w_bar, 0.0);
    let dev = bias_deviation(&dist(&[0.0, 1.0]), &ideal, Transport::Ordinal).unwrap();
    assert_eq!(dev.w_bar, 1.0);
}
