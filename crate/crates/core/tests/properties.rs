use biaslab::debias::GroupWeights;
use biaslab::equivalence::{alpha_to_ratio, predict_delta, ratio_to_alpha};
use biaslab::infotheory::{
    conditional_entropy_y_given_a, conditional_mutual_information, fano_worst_group_bound, joint_counts, w1_empirical,
    JointCounts, Unit,
};
use biaslab::metrics::evaluate_predictions;
use biaslab::problems::{make_custom_spec, make_imbalance_spec, make_spurious_spec, sample, FeatureModel};
use proptest::prelude::*;

fn h(ps: &[f64]) -> f64 {
    ps.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum()
}

/// `H(Ŷ,Y) + H(A,Y) - H(Ŷ,A,Y) - H(Y)` from normalized cell masses.
fn cmi_oracle(cells: &[u64; 8]) -> f64 {
    let n: u64 = cells.iter().sum();
    let p = |pr: usize, a: usize, y: usize| cells[4 * pr + 2 * a + y] as f64 / n as f64;
    let mut joint = vec![];
    let mut pred_y = vec![];
    let mut attr_y = vec![];
    let mut ys = vec![];
    for y in 0..2 {
        ys.push((0..2).flat_map(|pr| (0..2).map(move |a| (pr, a))).map(|(pr, a)| p(pr, a, y)).sum());
        for v in 0..2 {
            pred_y.push(p(v, 0, y) + p(v, 1, y));
            attr_y.push(p(0, v, y) + p(1, v, y));
            for a in 0..2 {
                joint.push(p(v, a, y));
            }
        }
    }
    h(&pred_y) + h(&attr_y) - h(&joint) - h(&ys)
}

fn cells() -> impl Strategy<Value = [u64; 8]> {
    prop::array::uniform8(0u64..500).prop_filter("non-empty", |c| c.iter().sum::<u64>() > 0)
}

/// Conditional entropy of `Ŷ` (`which = 0`) or `A` (`which = 1`) given `Y`, bits.
fn entropy_given_y(cells: &[u64; 8], which: usize) -> f64 {
    let n: f64 = cells.iter().sum::<u64>() as f64;
    let mut total = 0.0;
    for y in 0..2 {
        let mut m = [0.0; 2];
        for pr in 0..2 {
            for a in 0..2 {
                m[if which == 0 { pr } else { a }] += cells[4 * pr + 2 * a + y] as f64;
            }
        }
        let s = m[0] + m[1];
        if s > 0.0 {
            total += s / n * h(&[m[0] / s, m[1] / s]);
        }
    }
    total
}

proptest! {
    #[test]
    fn cmi_matches_entropy_identity(c in cells()) {
        let jc = JointCounts::from_cells(c).unwrap();
        let b = conditional_mutual_information(&jc, Unit::Bits, 0.0).value;
        prop_assert!((b - cmi_oracle(&c).max(0.0)).abs() < 1e-12);
    }

    #[test]
    fn cmi_is_capped_by_conditional_entropies(c in cells()) {
        let jc = JointCounts::from_cells(c).unwrap();
        let b = conditional_mutual_information(&jc, Unit::Bits, 0.0).value;
        prop_assert!(b >= 0.0);
        prop_assert!(b <= entropy_given_y(&c, 0) + 1e-12);
        prop_assert!(b <= entropy_given_y(&c, 1) + 1e-12);
        prop_assert!(b <= 1.0 + 1e-12);
    }

    #[test]
    fn cmi_symmetric_in_prediction_and_attribute(c in cells()) {
        let jc = JointCounts::from_cells(c).unwrap();
        let a = conditional_mutual_information(&jc, Unit::Nats, 0.0).value;
        let b = conditional_mutual_information(&jc.swap_pred_attr(), Unit::Nats, 0.0).value;
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn cmi_units_differ_by_ln2(c in cells()) {
        let jc = JointCounts::from_cells(c).unwrap();
        let bits = conditional_mutual_information(&jc, Unit::Bits, 0.0).value;
        let nats = conditional_mutual_information(&jc, Unit::Nats, 0.0).value;
        prop_assert!((bits * std::f64::consts::LN_2 - nats).abs() < 1e-12);
    }

    #[test]
    fn cmi_scale_invariant(c in cells(), k in 2u64..50) {
        let scaled = c.map(|v| v * k);
        let a = conditional_mutual_information(&JointCounts::from_cells(c).unwrap(), Unit::Bits, 0.0).value;
        let b = conditional_mutual_information(&JointCounts::from_cells(scaled).unwrap(), Unit::Bits, 0.0).value;
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn smoothing_keeps_cmi_in_range(c in cells(), lambda in 0.0f64..5.0) {
        let jc = JointCounts::from_cells(c).unwrap();
        let b = conditional_mutual_information(&jc, Unit::Bits, lambda).value;
        prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
    }

    #[test]
    fn predictions_independent_of_attribute_give_zero(
        labels in prop::collection::vec(0u8..2, 1..200),
        attrs_seed in any::<u64>(),
    ) {
        // predictions are a function of the label alone
        let attrs: Vec<u8> = labels.iter().enumerate().map(|(i, _)| ((attrs_seed >> (i % 64)) & 1) as u8).collect();
        let preds: Vec<u8> = labels.iter().map(|y| 1 - y).collect();
        let jc = joint_counts(&preds, &attrs, &labels).unwrap();
        prop_assert!(conditional_mutual_information(&jc, Unit::Bits, 0.0).value.abs() < 1e-12);
    }

    #[test]
    fn fano_bound_is_unit_free(c in cells()) {
        let jc = JointCounts::from_cells(c).unwrap();
        let table = jc.label_attribute_counts();
        let bound = |u: Unit| {
            let hy = conditional_entropy_y_given_a(&table, u).unwrap();
            fano_worst_group_bound(&hy, &conditional_mutual_information(&jc, u, 0.0)).unwrap()
        };
        prop_assert!((bound(Unit::Bits) - bound(Unit::Nats)).abs() < 1e-12);
        prop_assert!(bound(Unit::Bits) >= 0.0);
    }

    #[test]
    fn w1_is_a_metric(
        u in prop::collection::vec(-50.0f64..50.0, 1..40),
        v in prop::collection::vec(-50.0f64..50.0, 1..40),
        w in prop::collection::vec(-50.0f64..50.0, 1..40),
    ) {
        let uv = w1_empirical(&u, &v).unwrap();
        prop_assert!(uv >= 0.0);
        prop_assert!(w1_empirical(&u, &u).unwrap() == 0.0);
        prop_assert!((uv - w1_empirical(&v, &u).unwrap()).abs() < 1e-9);
        let uw = w1_empirical(&u, &w).unwrap();
        let wv = w1_empirical(&w, &v).unwrap();
        prop_assert!(uv <= uw + wv + 1e-9);
    }

    #[test]
    fn w1_of_translation_is_the_shift(u in prop::collection::vec(-50.0f64..50.0, 1..60), c in -20.0f64..20.0) {
        let shifted: Vec<f64> = u.iter().map(|x| x + c).collect();
        prop_assert!((w1_empirical(&u, &shifted).unwrap() - c.abs()).abs() < 1e-9);
    }

    #[test]
    fn w1_bounded_by_mean_gap_of_any_pairing(u in prop::collection::vec(-10.0f64..10.0, 1..30), seed in any::<u64>()) {
        // any coupling of equal-size samples costs at least the optimal one
        let mut v: Vec<f64> = u.iter().enumerate().map(|(i, x)| x + ((seed >> (i % 60)) & 7) as f64 - 3.5).collect();
        let pairing_cost: f64 = u.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum::<f64>() / u.len() as f64;
        v.reverse();
        prop_assert!(w1_empirical(&u, &v).unwrap() <= pairing_cost + 1e-9);
    }

    #[test]
    fn corollary_round_trip(alpha in -0.999f64..0.999, pi in 0.01f64..0.99) {
        let r = alpha_to_ratio(alpha, pi).unwrap();
        prop_assert!((ratio_to_alpha(r, pi).unwrap() - alpha).abs() < 1e-12);
    }

    #[test]
    fn ratio_round_trip(ratio in 0.01f64..500.0, pi in 0.01f64..0.99) {
        let a = ratio_to_alpha(ratio, pi).unwrap();
        prop_assert!((alpha_to_ratio(a, pi).unwrap() - ratio).abs() <= 1e-12 * ratio.max(1.0) * 100.0);
    }

    #[test]
    fn corollary_monotone(alpha in -0.99f64..0.98, da in 1e-3f64..0.01, pi in 0.05f64..0.9, dp in 1e-3f64..0.05) {
        let r = alpha_to_ratio(alpha, pi).unwrap();
        prop_assert!(alpha_to_ratio(alpha + da, pi).unwrap() > r);
        prop_assert!(alpha_to_ratio(alpha, pi + dp).unwrap() > r);
    }

    #[test]
    fn corollary_reciprocal_at_balanced_labels(alpha in -0.99f64..0.99) {
        let prod = alpha_to_ratio(alpha, 0.5).unwrap() * alpha_to_ratio(-alpha, 0.5).unwrap();
        prop_assert!((prod - 1.0).abs() < 1e-12);
    }

    #[test]
    fn predict_delta_monotone(eps in 0.0f64..1.0, de in 1e-4f64..0.5, eta in 0.05f64..0.9, dn in 1e-3f64..0.1, c in 0.01f64..10.0) {
        let d = predict_delta(eps, eta, c).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!(predict_delta(eps + de, eta, c).unwrap() > d);
        prop_assert!(predict_delta(eps, eta + dn, c).unwrap() <= d);
    }

    #[test]
    fn group_weights_stay_on_simplex(
        steps in prop::collection::vec((prop::array::uniform4(0.0f64..10.0), prop::array::uniform4(any::<bool>())), 1..200),
        eta in 1e-4f64..1.0,
    ) {
        let mut w = GroupWeights::uniform(eta);
        for (losses, present) in &steps {
            w.update(losses, present);
            prop_assert!((w.q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(w.q.iter().all(|q| *q >= 0.0));
        }
    }

    #[test]
    fn spurious_spec_recovers_alpha(alpha in -1.0f64..=1.0, pi in 0.0f64..=1.0) {
        let s = make_spurious_spec(alpha, pi, FeatureModel::default()).unwrap();
        prop_assert!((s.alpha() - alpha).abs() <= 1e-12);
        let p = s.group_probabilities();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn imbalance_spec_realizes_ratio(ratio in 0.05f64..300.0) {
        let s = make_imbalance_spec(ratio, 0.5, FeatureModel::default()).unwrap();
        let p = s.group_probabilities();
        // index 2y + a: (1,1) -> 3, (0,1) -> 1
        prop_assert!((p[3] / p[1] - ratio).abs() <= 1e-9 * ratio);
        prop_assert!((p[1] + p[3] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sampled_groups_cover_positive_mass(alpha in 0.0f64..0.999, n in 1000usize..3000, seed in any::<u64>()) {
        let s = make_spurious_spec(alpha, 0.5, FeatureModel::default()).unwrap();
        let ds = sample(&s, n, seed).unwrap();
        prop_assert_eq!(ds.len(), n);
        prop_assert_eq!(ds.features.len(), n * ds.dim);
        let counts = ds.group_counts();
        prop_assert_eq!(counts.iter().sum::<u64>(), n as u64);
        prop_assert!(counts.iter().all(|&c| c >= 1));
    }

    #[test]
    fn custom_spec_with_degenerate_group_samples_nothing_there(seed in any::<u64>()) {
        let s = make_custom_spec([0.0, 0.7], 0.5, FeatureModel::default()).unwrap();
        let ds = sample(&s, 500, seed).unwrap();
        // P(Y=0, A=1) = 0
        prop_assert_eq!(ds.group_counts()[1], 0);
    }

    #[test]
    fn worst_group_never_exceeds_average(
        rows in prop::collection::vec((0u8..2, 0u8..2, 0u8..2), 4..300),
    ) {
        let preds: Vec<u8> = rows.iter().map(|r| r.0).collect();
        let labels: Vec<u8> = rows.iter().map(|r| r.1).collect();
        let attrs: Vec<u8> = rows.iter().map(|r| r.2).collect();
        let rep = evaluate_predictions(&preds, &labels, &attrs).unwrap();
        prop_assert!((0.0..=1.0).contains(&rep.average_accuracy));
        if let Some(w) = rep.worst_group_accuracy {
            prop_assert!(w <= rep.average_accuracy + 1e-12);
        }
        for v in [rep.dp_gap, rep.eo_violation].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(rep.group_table.total(), rows.len() as u64);
    }
}
