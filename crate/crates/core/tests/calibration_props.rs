//! Calibrator invariants and fits checked against brute-force searches.

use knnue::calibration::{
    argmax, entity_confidence, knnue_weight, scaled_softmax, sr_nll, ts_fit_features,
    ts_nll_gradient, DensityModel, FittedCalibrator, GaussianMixture, KnnUeParams, Method,
    NormalizedDensity, W_FLOOR,
};
use knnue::datastore::generate_synthetic;
use knnue::pipeline::{fit, mean_nll, score, Context, FitOptions};
use knnue::{AnnIndex, Neighborhood, SynthSpec};
use proptest::prelude::*;

fn logits() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-30.0f32..30.0, 1..40)
}

fn params() -> impl Strategy<Value = KnnUeParams> {
    (0.0f64..=10.0, 1e-3f64..=1e3, 0.0f64..=10.0, 0.0f64..=10.0, 1usize..64)
        .prop_map(|(alpha, tau, lambda, b, k)| KnnUeParams { alpha, tau, lambda, b, k })
}

fn neighborhood() -> impl Strategy<Value = (Neighborhood, Vec<u32>)> {
    (1usize..40).prop_flat_map(|k| {
        (
            prop::collection::vec(0.0f32..500.0, k),
            prop::collection::vec(0u32..4, k),
        )
            .prop_map(move |(mut dists, labels)| {
                dists.sort_by(f32::total_cmp);
                let nb = Neighborhood { ids: (0..k as u32).collect(), dists, requested: k };
                (nb, labels)
            })
    })
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_keeps_the_argmax(z in logits(), scale in 1e-6f64..1e3) {
        let p = scaled_softmax(&z, scale).unwrap();
        let total: f64 = p.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert_eq!(argmax(&p), argmax(&z));
    }

    #[test]
    fn weight_respects_floor_and_grows_with_each_parameter(
        (nb, labels) in neighborhood(), p in params(), pred in 0u32..4, bump in 0.0f64..1.0,
    ) {
        let w = knnue_weight(&nb, pred, &labels, &p).unwrap();
        prop_assert!(w >= W_FLOOR && w.is_finite());
        let up = |q: KnnUeParams| knnue_weight(&nb, pred, &labels, &q).unwrap();
        let raised = [
            KnnUeParams { alpha: (p.alpha + bump).min(10.0), ..p },
            KnnUeParams { lambda: (p.lambda + bump).min(10.0), ..p },
            KnnUeParams { b: (p.b + bump).min(10.0), ..p },
            KnnUeParams { tau: (p.tau * (1.0 + bump)).min(1e3), ..p },
        ];
        for q in raised {
            prop_assert!(up(q) >= w, "{:?} gave {} < {}", q, up(q), w);
        }
    }

    #[test]
    fn entity_confidence_is_the_product(c in prop::collection::vec(1e-3f64..=1.0, 1..10)) {
        let e = entity_confidence(&c).unwrap();
        let min = c.iter().copied().fold(1.0, f64::min);
        prop_assert!(e <= min + 1e-15);
        prop_assert!((e - c.iter().product::<f64>()).abs() < 1e-15);
    }

    #[test]
    fn temperature_fit_beats_a_dense_grid(
        rows in prop::collection::vec((prop::collection::vec(-8.0f32..8.0, 3), 0usize..3), 5..60),
    ) {
        let dev: Vec<(&[f32], usize)> = rows.iter().map(|(z, y)| (z.as_slice(), *y)).collect();
        let (t, nll) = ts_fit_features(&dev).unwrap();
        prop_assert!((1e-2..=1e2).contains(&t.t));
        let grid_best = (0..=400)
            .map(|i| 10f64.powf(-2.0 + 4.0 * f64::from(i) / 400.0))
            .map(|t| ts_nll_gradient(&dev, t).0)
            .fold(f64::INFINITY, f64::min);
        prop_assert!(nll <= grid_best + 1e-7, "fit {nll} vs grid {grid_best}");
    }
}

#[test]
fn empty_or_non_finite_logits_are_rejected() {
    assert!(scaled_softmax(&[], 1.0).is_err());
    assert!(scaled_softmax(&[f32::NAN, 1.0], 1.0).is_err());
    assert!(entity_confidence(&[]).is_err());
    assert!(entity_confidence(&[0.5, 1.5]).is_err());
}

#[test]
fn mixture_em_is_monotone_and_normalized_density_is_clamped() {
    let data = generate_synthetic(&SynthSpec { n_train: 600, dim: 6, ..SynthSpec::default() })
        .unwrap()
        .train;
    let gmm = GaussianMixture::fit(data.keys(), data.dim(), 3, 1).unwrap();
    assert!(gmm.ll_trace.windows(2).all(|w| w[1] >= w[0] - 1e-9), "{:?}", gmm.ll_trace);
    let total: f64 = gmm.weights.iter().sum();
    assert!((total - 1.0).abs() < 1e-9);
    let nd = NormalizedDensity::new(gmm.clone(), data.keys());
    for i in 0..data.len() {
        let v = nd.normalized(data.key(i));
        assert!((0.0..=1.0).contains(&v));
    }
    let far = vec![1e3f32; data.dim()];
    assert_eq!(nd.normalized(&far), 0.0);
    assert!(gmm.log_likelihood(&far).is_finite());
}

#[test]
fn fitted_methods_beat_or_match_their_starting_points() {
    let data = generate_synthetic(&SynthSpec {
        n_train: 1500,
        n_dev: 300,
        n_test: 300,
        n_ood: 100,
        ..SynthSpec::default()
    })
    .unwrap();
    let index = AnnIndex::flat(&data.train).unwrap();
    let ctx = Context::new(&data.train, &index, 1).unwrap();
    let opts = FitOptions { k: 16, ..FitOptions::default() };
    let sr = sr_nll(data.dev.records.iter().map(|r| (r.logits.as_slice(), r.gold as usize)));
    let mut nll = std::collections::HashMap::new();
    for m in Method::ALL {
        let f = fit(m, &data.dev, &ctx, &opts).unwrap();
        f.check().unwrap();
        nll.insert(m, f.dev_nll);
        // persisted parameters score identically
        let back: FittedCalibrator = serde_json::from_str(&serde_json::to_string(&f).unwrap()).unwrap();
        let a = score(&f, &data.test_id.records, &ctx).unwrap();
        let b = score(&back, &data.test_id.records, &ctx).unwrap();
        assert_eq!(a, b, "{m}");
        if m != Method::Sr {
            assert!(mean_nll(&a).is_finite());
        }
    }
    assert!((nll[&Method::Sr] - sr).abs() < 1e-12);
    for m in [Method::Ts, Method::Dac, Method::KnnUe, Method::KnnUeNoLabel] {
        assert!(nll[&m] <= sr + 1e-9, "{m}: {} vs sr {sr}", nll[&m]);
    }
    assert!(nll[&Method::Dac] <= nll[&Method::Ts] + 1e-9);
    assert!(nll[&Method::KnnUe] <= nll[&Method::KnnUeNoLabel] + 1e-9);
}
