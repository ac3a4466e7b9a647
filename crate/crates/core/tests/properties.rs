use nalgebra::DMatrix;
use num_complex::Complex64;
use proptest::prelude::*;

use shm_core::classify::{
    classifier_loss_and_gradients, extract_features, init_classifier, softmax, Labels, HEADS, N_FEATURES,
};
use shm_core::fem::{assemble_system, solve_modes, BeamConfig, DamageSpec};
use shm_core::network::{Gradients, Network};
use shm_core::persist::{model_from_json, model_to_json, SavedModel};
use shm_core::seeds::rng;
use shm_core::sim::SdofPropagator;
use shm_core::sysid::{
    ar_from_poles, extract_modes, fit_ar, gradients, init_mlp, mode_to_pole, predict_next, train_predictor, ArModel,
    Batch, Predictor, TrainHyper, WindowedDataset,
};

use rand::Rng;

const FS: f64 = 1000.0;
/// Frequency bands (Hz at 1 kHz) that keep synthetic poles well separated.
const BANDS: [(f64, f64); 4] = [(20.0, 80.0), (110.0, 180.0), (220.0, 300.0), (340.0, 450.0)];

fn fd_relative_error(analytic: &Gradients, net: &Network, loss: impl Fn(&Network) -> f64) -> f64 {
    let h = 1e-6;
    let n = net.params().count();
    let mut fd = Vec::with_capacity(n);
    for i in 0..n {
        let mut plus = net.clone();
        *plus.params_mut().nth(i).unwrap() += h;
        let mut minus = net.clone();
        *minus.params_mut().nth(i).unwrap() -= h;
        fd.push((loss(&plus) - loss(&minus)) / (2.0 * h));
    }
    let diff: f64 = analytic.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.norm().max(fd.iter().map(|v| v * v).sum::<f64>().sqrt());
    diff / scale
}

fn random_batch(layer0: usize, rows: usize, seed: u64) -> Batch {
    let mut r = rng(seed);
    Batch {
        inputs: (0..rows).map(|_| (0..layer0).map(|_| r.gen_range(-2.0..2.0)).collect()).collect(),
        targets: (0..rows).map(|_| r.gen_range(-1.5..1.5)).collect(),
    }
}

fn conj_pairs(modes: &[(f64, f64)]) -> Vec<Complex64> {
    modes
        .iter()
        .flat_map(|&(f, z)| {
            let p = mode_to_pole(f, z, FS);
            [p, p.conj()]
        })
        .collect()
}

fn mode_set() -> impl Strategy<Value = Vec<(f64, f64)>> {
    (1usize..=4, prop::array::uniform4(0.0f64..1.0), prop::array::uniform4(0.0f64..0.15)).prop_map(|(k, u, z)| {
        (0..k).map(|i| (BANDS[i].0 + u[i] * (BANDS[i].1 - BANDS[i].0), z[i])).collect()
    })
}

fn random_row_labels(r: &mut impl Rng) -> Labels {
    let case = DamageSpec::from_case_id(r.gen_range(0..61)).unwrap();
    Labels::of(&case)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn predictor_backprop_matches_finite_differences(seed in any::<u64>(), rows in 1usize..6) {
        let model = init_mlp(&[9, 25, 25, 1], seed).unwrap();
        let batch = random_batch(9, rows, seed ^ 0x5eed);
        let (_, g) = gradients(&model, &batch).unwrap();
        let err = fd_relative_error(&g, &model.net, |net| {
            let m = shm_core::sysid::MlpModel { net: net.clone(), ..model.clone() };
            gradients(&m, &batch).unwrap().0
        });
        prop_assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn classifier_backprop_matches_finite_differences(seed in any::<u64>(), rows in 1usize..8) {
        let model = init_classifier(16, seed).unwrap();
        let mut r = rng(seed.wrapping_add(1));
        let inputs: Vec<[f64; N_FEATURES]> =
            (0..rows).map(|_| std::array::from_fn(|_| r.gen_range(-2.0..2.0))).collect();
        let labels: Vec<Labels> = (0..rows).map(|_| random_row_labels(&mut r)).collect();
        let (_, g) = classifier_loss_and_gradients(&model.net, &HEADS, &inputs, &labels).unwrap();
        let err = fd_relative_error(&g, &model.net, |net| {
            classifier_loss_and_gradients(net, &HEADS, &inputs, &labels).unwrap().0
        });
        prop_assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn poles_to_coefficients_and_back(modes in mode_set()) {
        let ar = ArModel::new(ar_from_poles(&conj_pairs(&modes)), FS);
        let est = extract_modes(&ar).unwrap();
        prop_assert_eq!(est.len(), modes.len());
        for (e, (f, z)) in est.iter().zip(&modes) {
            prop_assert!((e.freq_hz - f).abs() <= 1e-9 * f, "{} vs {f}", e.freq_hz);
            prop_assert!((e.zeta - z).abs() <= 1e-9, "{} vs {z}", e.zeta);
        }
    }

    #[test]
    fn exact_order_fit_recovers_poles(modes in mode_set(), amp in prop::array::uniform4(0.2f64..2.0)) {
        let modes: Vec<(f64, f64)> = modes.into_iter().map(|(f, z)| (f, z.min(0.05))).collect();
        let poles = conj_pairs(&modes);
        let x: Vec<f64> = (0..800)
            .map(|k| poles.iter().step_by(2).zip(amp).map(|(p, a)| 2.0 * a * p.powi(k).re).sum())
            .collect();
        let ar = fit_ar(&WindowedDataset::from_values(&x, poles.len(), FS).unwrap(), 0.0).unwrap();
        let est = extract_modes(&ar).unwrap();
        prop_assert_eq!(est.len(), modes.len());
        for (e, p) in est.iter().zip(poles.iter().step_by(2)) {
            prop_assert!((e.pole - p).norm() < 1e-6, "{} vs {p}", e.pole);
        }
    }

    #[test]
    fn propagator_semigroup(omega in 0.5f64..400.0, zeta in 0.0f64..0.99, dt in 1e-4f64..1e-2) {
        let one = SdofPropagator::new(omega, zeta, dt).unwrap();
        let two = SdofPropagator::new(omega, zeta, 2.0 * dt).unwrap();
        for (state, f) in [([1.0, 0.0], 0.0), ([0.0, 1.0], 0.0), ([0.3, -0.7], 1.0)] {
            let twice = one.step(one.step(state, f), f);
            let direct = two.step(state, f);
            let scale = direct.iter().chain(&twice).fold(1.0f64, |m, v| m.max(v.abs()));
            for i in 0..2 {
                prop_assert!((twice[i] - direct[i]).abs() <= 1e-12 * scale, "{twice:?} vs {direct:?}");
            }
        }
    }

    #[test]
    fn softmax_normalized_and_shift_invariant(logits in prop::collection::vec(-50.0f64..50.0, 1..12), c in -100.0f64..100.0) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        let shifted: Vec<f64> = logits.iter().map(|v| v + c).collect();
        let q = softmax(&shifted);
        let argmax = |v: &[f64]| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        prop_assert_eq!(argmax(&p), argmax(&q));
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn features_vanish_only_without_change(base in prop::array::uniform4(1.0f64..60.0), i in 0usize..4, d in 1e-6f64..0.1) {
        let mut base = base;
        base.sort_by(f64::total_cmp);
        let spread_ok = base.windows(2).all(|w| w[1] > 1.5 * w[0]);
        prop_assume!(spread_ok);
        prop_assert!(extract_features(&base, &base).unwrap().rel_shifts.iter().all(|v| *v == 0.0));
        let mut moved = base;
        moved[i] *= 1.0 - d;
        let fv = extract_features(&base, &moved).unwrap();
        prop_assert!(fv.rel_shifts.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn ar_json_round_trip_is_bit_exact(coeffs in prop::collection::vec(-1e3f64..1e3, 1..30), fs in 1.0f64..1e5) {
        let ar = Predictor::Ar(ArModel::new(coeffs.clone(), fs));
        let back = model_from_json(&model_to_json(&SavedModel::Predictor(ar.clone())).unwrap(), "mem").unwrap();
        let SavedModel::Predictor(back) = back else { panic!("kind changed") };
        let window: Vec<f64> = (0..coeffs.len()).map(|k| (k as f64 * 0.71).sin()).collect();
        prop_assert_eq!(predict_next(&ar, &window).unwrap().to_bits(), predict_next(&back, &window).unwrap().to_bits());
    }

    #[test]
    fn matrices_symmetric_and_modes_orthonormal(n_el in 4usize..40, knock in prop::collection::vec(0.3f64..1.0, 40)) {
        let cfg = BeamConfig { n_elements: n_el, ..BeamConfig::default() };
        let ei: Vec<f64> = knock[..n_el].iter().map(|k| 1e3 * k).collect();
        let model = assemble_system(&cfg, &ei).unwrap();
        for a in [&model.stiffness, &model.mass] {
            let max = a.amax();
            prop_assert!((a - a.transpose()).amax() <= 1e-12 * max);
            prop_assert!(a.clone().cholesky().is_some());
        }
        let modal = solve_modes(&model, 4, 0.0).unwrap();
        prop_assert!(modal.omegas.windows(2).all(|w| w[0] > 0.0 && w[1] > w[0]));
        let g: DMatrix<f64> = modal.shapes.transpose() * &model.mass * &modal.shapes;
        prop_assert!((g - DMatrix::identity(4, 4)).amax() < 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 4, ..ProptestConfig::default() })]

    #[test]
    fn unshuffled_training_is_bit_deterministic(seed in any::<u64>()) {
        let x: Vec<f64> = (0..300).map(|k| (k as f64 * 0.07).sin() + 0.3 * (k as f64 * 0.31).cos()).collect();
        let data = WindowedDataset::from_values(&x, 9, FS).unwrap();
        let init = init_mlp(&[9, 6, 1], seed).unwrap();
        let hyper = TrainHyper { epochs: 5, shuffle_seed: None, ..TrainHyper::default() };
        let a = train_predictor(&init, &data, &hyper).unwrap();
        let b = train_predictor(&init, &data, &hyper).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn standardization_round_trips(seed in any::<u64>(), scale in 1e-3f64..1e3, offset in -10.0f64..10.0) {
        // predictions on data in raw units equal de-standardized network outputs
        let x: Vec<f64> = (0..200).map(|k| offset + scale * (k as f64 * 0.05 + seed as f64 % 7.0).sin()).collect();
        let data = WindowedDataset::from_values(&x, 9, FS).unwrap();
        let init = init_mlp(&[9, 5, 1], seed).unwrap();
        let (model, _) = train_predictor(&init, &data, &TrainHyper { epochs: 1, ..TrainHyper::default() }).unwrap();
        let w = data.row(17);
        let z = model.net.forward(&model.norm.standardize_input(&w))[0];
        let y = predict_next(&Predictor::Mlp(model.clone()), &w).unwrap();
        prop_assert_eq!(y.to_bits(), model.norm.destandardize_output(z).to_bits());
        prop_assert!((model.norm.standardize_output(y) - z).abs() <= 1e-12 * z.abs().max(1.0));
    }
}
