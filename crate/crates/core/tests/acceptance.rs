//! End-to-end acceptance checks. Each prints one PASS/FAIL line with its
//! measured values and wall time; the test fails if any check fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;

use shm_core::classify::{
    classifier_loss_and_gradients, evaluate, format_confusion, full_study_dataset, init_classifier, match_modes,
    train_classifier, ClassifierHyper, Labels, Pathway, HEADS, N_FEATURES,
};
use shm_core::config::RunConfig;
use shm_core::fem::{
    analytic_omegas, calibrate_bending_stiffness, case_modes, enumerate_damage_cases, pristine_model, solve_modes,
    BeamConfig, DamageSpec,
};
use shm_core::harness::{online_demo, run_study, simulate_case};
use shm_core::network::Network;
use shm_core::persist::{model_from_json, model_to_json, SavedModel};
use shm_core::seeds::{derive_seed, rng};
use shm_core::sysid::{
    extract_modes, gradients, identify_ar, init_mlp, one_step_nmse, predict_next, train_predictor, window_size,
    Batch, IdentifySettings, MlpModel, Predictor, TrainHyper, WindowedDataset,
};

/// Writes straight to the process stdout so the lines show without `--nocapture`.
fn report(line: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| rel(*x, *y)).fold(0.0, f64::max)
}

fn pluck_config(zeta: f64) -> RunConfig {
    RunConfig::from_json(
        &format!(r#"{{"master_seed": 0, "beam": {{"damping_ratio": {zeta:?}}}, "excitation": {{"kind": "pluck", "amplitude": 0.01}}}}"#),
        "pluck",
    )
    .unwrap()
}

fn shm(args: &[&str], dir: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_shm")).args(args).current_dir(dir).env_remove("SHM_WORKERS").output().unwrap()
}

fn c1_mode_table() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let out = shm(&["modes", "--seed", "0", "--case", "0"], dir.path());
    if out.status.code() != Some(0) {
        return outcome(false, format!("exit {:?}", out.status.code()));
    }
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<(f64, f64)> = text
        .lines()
        .skip(2)
        .map(|l| {
            let v: Vec<f64> = l.split_whitespace().skip(1).map(|s| s.parse().unwrap()).collect();
            (v[0], v[1])
        })
        .collect();
    let (w, f): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
    let ew = max_rel(&w, &[10.0, 62.0, 175.0, 343.0]);
    let ef = max_rel(&f, &[1.6, 9.9, 27.7, 54.4]);
    outcome(
        w.len() == 4 && ew < 0.02 && ef < 0.02,
        format!("omega {w:.2?} (max dev {:.2}%), f {f:.3?} (max dev {:.2}%)", 100.0 * ew, 100.0 * ef),
    )
}

fn c2_window_rule() -> Outcome {
    let n = window_size(1000.0, 54.4, None).unwrap();
    outcome(n == 9, format!("window_size(1000, 54.4) = {n}"))
}

fn c3_analytic_and_refinement() -> Outcome {
    let cfg = BeamConfig::default();
    let modal = case_modes(&cfg, 0).unwrap();
    let exact = analytic_omegas(&cfg, calibrate_bending_stiffness(&cfg).unwrap());
    let e_analytic = max_rel(&modal.omegas, &exact);
    let fine = BeamConfig { n_elements: 72, ..cfg.clone() };
    let fine_modes = solve_modes(&pristine_model(&fine).unwrap(), 4, 0.0).unwrap();
    let e_mesh = max_rel(&modal.omegas, &fine_modes.omegas);
    outcome(
        e_analytic < 0.02 && e_mesh < 1e-3,
        format!("vs closed form {:.4}%, 36 vs 72 elements {:.5}%", 100.0 * e_analytic, 100.0 * e_mesh),
    )
}

fn c4_exact_ar_recovery() -> Outcome {
    let cfg = pluck_config(0.0);
    let series = simulate_case(&cfg, 0).unwrap();
    let fem = case_modes(&cfg.beam, 0).unwrap().freqs_hz;
    let settings = IdentifySettings { order: Some(10), ridge_rel: 1e-24, decimation: Some(1) };
    let ar = identify_ar(&series.channels[0].values, series.fs, cfg.excitation.kind, 4, fem[3], &settings).unwrap();
    let est: Vec<f64> = extract_modes(&ar).unwrap().iter().map(|m| m.freq_hz).collect();
    match match_modes(&fem, &est) {
        Ok(m) => {
            let e = max_rel(&m, &fem);
            outcome(e < 0.005, format!("order 10 modes {m:.5?} Hz, max dev {:.2e}%", 100.0 * e))
        }
        Err(err) => outcome(false, format!("extracted {est:.4?}: {err}")),
    }
}

fn c5_random_recovery() -> Outcome {
    let cfg = RunConfig::default();
    let series = simulate_case(&cfg, 0).unwrap();
    let fem = case_modes(&cfg.beam, 0).unwrap().freqs_hz;
    let ar = identify_ar(
        &series.channels[0].values,
        series.fs,
        cfg.excitation.kind,
        4,
        fem[3],
        &cfg.sysid.identify_settings(),
    )
    .unwrap();
    let est: Vec<f64> = extract_modes(&ar).unwrap().iter().map(|m| m.freq_hz).collect();
    match match_modes(&fem, &est) {
        Ok(m) => {
            let e = max_rel(&m, &fem);
            outcome(
                e < 0.02,
                format!("order {} at {} Hz: {m:.4?} Hz, max dev {:.2}%", ar.order(), ar.fs, 100.0 * e),
            )
        }
        Err(err) => outcome(false, format!("extracted {est:.4?}: {err}")),
    }
}

fn c6_monotonicity() -> Outcome {
    let cfg = BeamConfig::default();
    let freqs = shm_core::classify::oracle_frequencies(&cfg, &enumerate_damage_cases()).unwrap();
    let mut violations = 0;
    for length in 1..=2 {
        for loc in 0..10 {
            let mut prev = freqs[0][0];
            for sev in 1..=3 {
                let f = freqs[DamageSpec::from_parts(sev, length, loc).unwrap().case_id][0];
                if f >= prev {
                    violations += 1;
                }
                prev = f;
            }
        }
    }
    outcome(violations == 0, format!("20 severity chains over 60 cases, {violations} violations"))
}

fn fd_error(analytic: Vec<f64>, net: &Network, loss: impl Fn(&Network) -> f64) -> f64 {
    let h = 1e-6;
    let fd: Vec<f64> = (0..analytic.len())
        .map(|i| {
            let mut p = net.clone();
            *p.params_mut().nth(i).unwrap() += h;
            let mut m = net.clone();
            *m.params_mut().nth(i).unwrap() -= h;
            (loss(&p) - loss(&m)) / (2.0 * h)
        })
        .collect();
    let diff = analytic.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm(&analytic).max(norm(&fd))
}

fn c7_gradients() -> Outcome {
    let mut worst_p: f64 = 0.0;
    let mut worst_c: f64 = 0.0;
    for seed in 0..20u64 {
        let mut r = rng(derive_seed(7, seed));
        let model = init_mlp(&[9, 25, 25, 1], seed).unwrap();
        let batch = Batch {
            inputs: (0..4).map(|_| (0..9).map(|_| r.gen_range(-2.0..2.0)).collect()).collect(),
            targets: (0..4).map(|_| r.gen_range(-1.0..1.0)).collect(),
        };
        let (_, g) = gradients(&model, &batch).unwrap();
        worst_p = worst_p.max(fd_error(g.iter().copied().collect(), &model.net, |net| {
            gradients(&MlpModel { net: net.clone(), ..model.clone() }, &batch).unwrap().0
        }));

        let clf = init_classifier(16, seed).unwrap();
        let inputs: Vec<[f64; N_FEATURES]> = (0..6).map(|_| std::array::from_fn(|_| r.gen_range(-2.0..2.0))).collect();
        let labels: Vec<Labels> =
            (0..6).map(|_| Labels::of(&DamageSpec::from_case_id(r.gen_range(0..61)).unwrap())).collect();
        let (_, g) = classifier_loss_and_gradients(&clf.net, &HEADS, &inputs, &labels).unwrap();
        worst_c = worst_c.max(fd_error(g.iter().copied().collect(), &clf.net, |net| {
            classifier_loss_and_gradients(net, &HEADS, &inputs, &labels).unwrap().0
        }));
    }
    outcome(
        worst_p < 1e-5 && worst_c < 1e-5,
        format!("20 seeds: predictor worst rel err {worst_p:.2e}, classifier {worst_c:.2e}"),
    )
}

fn c8_mlp_predictor() -> Outcome {
    let cfg = pluck_config(BeamConfig::default().damping_ratio);
    let cfg = RunConfig { sampling: shm_core::config::SamplingConfig { fs: 1000.0, duration_s: 10.0 }, ..cfg };
    let series = simulate_case(&cfg, 0).unwrap();
    let x = &series.channels[0].values;
    let n = window_size(1000.0, case_modes(&cfg.beam, 0).unwrap().freqs_hz[3], None).unwrap();
    let split = 7000;
    let train = WindowedDataset::from_values(&x[..split], n, series.fs).unwrap();
    let init = init_mlp(&[n, 25, 25, 1], derive_seed(cfg.master_seed, 101)).unwrap();
    let (model, hist) = train_predictor(&init, &train, &TrainHyper::default()).unwrap();
    let nmse = one_step_nmse(&Predictor::Mlp(model), &x[split - n..]).unwrap();
    outcome(
        n == 9 && nmse < 0.1,
        format!("window {n}, 25x25, train loss {:.2e}, held-out NMSE {nmse:.2e}", hist.last().unwrap()),
    )
}

fn c9_classifier() -> Outcome {
    let ds = full_study_dataset(&BeamConfig::default(), Pathway::Oracle, 0.0, 1, 0, None).unwrap();
    let (model, _) = train_classifier(&ds, &ClassifierHyper::default()).unwrap();
    let m = evaluate(&model, &ds.rows).unwrap();
    for (t, h) in [("severity", &m.severity), ("location", &m.location), ("length", &m.length)] {
        report(&format_confusion(&format!("    {t}"), h));
    }
    outcome(
        m.severity.accuracy >= 0.95 && m.detection_accuracy == 1.0 && m.location.accuracy >= 0.8 && m.length.accuracy >= 0.8,
        format!(
            "severity {:.1}%, detection {:.1}%, location {:.1}%, length {:.1}%",
            100.0 * m.severity.accuracy,
            100.0 * m.detection_accuracy,
            100.0 * m.location.accuracy,
            100.0 * m.length.accuracy
        ),
    )
}

fn c10_online() -> Outcome {
    let cfg = pluck_config(BeamConfig::default().damping_ratio);
    let damage = DamageSpec::from_parts(3, 1, 0).unwrap();
    let r = online_demo(&cfg, damage, 5.0, 20.0, 1e-3, 20.0).unwrap();
    let tail = online_demo(&cfg, damage, 5.0, 20.0, 1e-3, 5.0).unwrap();
    let gap = r.gap_closed.unwrap_or(f64::NEG_INFINITY);
    outcome(
        gap >= 0.5 && r.mse_online < r.mse_frozen,
        format!(
            "case {}, lr 1e-3: f1 frozen {:.4} -> online {:.4} (damaged {:.4}), gap closed {:.1}%, post-switch mse ratio {:.4} (last 5 s {:.4})",
            damage.case_id,
            r.f1_frozen.unwrap_or(f64::NAN),
            r.f1_online.unwrap_or(f64::NAN),
            r.f1_damaged_fem,
            100.0 * gap,
            r.mse_online / r.mse_frozen,
            tail.mse_online / tail.mse_frozen
        ),
    )
}

fn c11_full_study() -> Outcome {
    let out = run_study(&pluck_config(0.0), true).unwrap();
    let a = out.report.agreement.clone().unwrap();
    let random = run_study(&RunConfig::default(), true).unwrap().report.agreement.unwrap();
    outcome(
        out.report.rows.len() == 61 && a.within >= 58,
        format!(
            "61-case oracle+identified (pluck, zeta 0): {} rows, {}/{} within {:.1}% [random excitation: {}/{} within {:.0}%]",
            out.report.rows.len(),
            a.within,
            a.compared,
            100.0 * a.tolerance,
            random.within,
            random.compared,
            100.0 * random.tolerance
        ),
    )
}

fn c12_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("cfg.json"), r#"{"master_seed": 12}"#).unwrap();
    let mut same = true;
    for (args_a, args_b, files) in [
        (
            vec!["simulate", "--config", "cfg.json", "--case", "7", "--out", "a.csv"],
            vec!["simulate", "--config", "cfg.json", "--case", "7", "--out", "b.csv"],
            vec![("a.csv", "b.csv")],
        ),
        (
            vec!["study", "--config", "cfg.json", "--out", "s1", "--workers", "1"],
            vec!["study", "--config", "cfg.json", "--out", "s2", "--workers", "2"],
            vec![
                ("s1/study_oracle.csv", "s2/study_oracle.csv"),
                ("s1/study_identified.csv", "s2/study_identified.csv"),
                ("s1/report.json", "s2/report.json"),
                ("s1/summary.txt", "s2/summary.txt"),
            ],
        ),
    ] {
        same &= shm(&args_a, p).status.success() && shm(&args_b, p).status.success();
        for (a, b) in files {
            same &= std::fs::read(p.join(a)).ok() == std::fs::read(p.join(b)).ok();
        }
    }

    let cfg = RunConfig { master_seed: 12, ..RunConfig::default() };
    let x = simulate_case(&cfg, 0).unwrap().channels[0].values.clone();
    let data = WindowedDataset::from_values(&x[..3000], 9, 1000.0).unwrap();
    let ar = shm_core::sysid::fit_ar(&data, 0.0).unwrap();
    let (mlp, _) =
        train_predictor(&init_mlp(&[9, 25, 25, 1], 3).unwrap(), &data, &TrainHyper { epochs: 3, ..Default::default() })
            .unwrap();
    let ds = full_study_dataset(&cfg.beam, Pathway::Oracle, 0.0, 1, 0, None).unwrap();
    let (clf, _) = train_classifier(&ds, &ClassifierHyper { epochs: 100, ..Default::default() }).unwrap();
    let mut bit_exact = true;
    for model in [SavedModel::Predictor(Predictor::Ar(ar)), SavedModel::Predictor(Predictor::Mlp(mlp))] {
        let back = model_from_json(&model_to_json(&model).unwrap(), "mem").unwrap();
        let (SavedModel::Predictor(a), SavedModel::Predictor(b)) = (&model, &back) else { unreachable!() };
        for r in (0..data.len()).step_by(97) {
            let w = data.row(r);
            bit_exact &= predict_next(a, &w).unwrap().to_bits() == predict_next(b, &w).unwrap().to_bits();
        }
    }
    let back = model_from_json(&model_to_json(&SavedModel::Classifier(clf.clone())).unwrap(), "mem").unwrap();
    let SavedModel::Classifier(clf2) = back else { unreachable!() };
    for row in &ds.rows {
        let a = shm_core::classify::classify(&clf, &row.features).unwrap();
        let b = shm_core::classify::classify(&clf2, &row.features).unwrap();
        bit_exact &= a == b;
    }
    outcome(
        same && bit_exact,
        format!("CLI outputs byte-identical: {same}; AR/MLP/classifier reload bit-identical: {bit_exact}"),
    )
}

#[test]
fn acceptance() {
    type Check = fn() -> Outcome;
    let checks: [(&str, Duration, Check); 12] = [
        ("1 mode table", Duration::from_secs(1), c1_mode_table),
        ("2 window rule", Duration::from_secs(1), c2_window_rule),
        ("3 analytic oracle and mesh refinement", Duration::from_secs(5), c3_analytic_and_refinement),
        ("4 exact AR recovery (pluck, order 10)", Duration::from_secs(10), c4_exact_ar_recovery),
        ("5 random-excitation recovery", Duration::from_secs(30), c5_random_recovery),
        ("6 damage monotonicity", Duration::from_secs(10), c6_monotonicity),
        ("7 gradient check", Duration::from_secs(30), c7_gradients),
        ("8 MLP predictor quality", Duration::from_secs(120), c8_mlp_predictor),
        ("9 classifier separability", Duration::from_secs(120), c9_classifier),
        ("10 online adaptation", Duration::from_secs(60), c10_online),
        ("11 full study", Duration::from_secs(300), c11_full_study),
        ("12 determinism and persistence", Duration::from_secs(300), c12_determinism),
    ];
    let mut failed = Vec::new();
    for (name, limit, check) in checks {
        let t = Instant::now();
        let o = check();
        let dt = t.elapsed();
        let pass = o.pass && dt <= limit;
        report(&format!(
            "[{}] {name}: {} ({:.2} s, limit {} s)\n",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            dt.as_secs_f64(),
            limit.as_secs()
        ));
        if !pass {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
