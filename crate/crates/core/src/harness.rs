//! Experiment drivers behind the command line: per-case simulation and
//! identification, the 61-case study and the online adaptation demo.

use std::time::Instant;

use serde::Serialize;

use crate::classify::{
    evaluate, format_confusion, full_study_dataset, train_classifier, ClassifierMetrics, ClassifierModel,
    Exclusion, FeatureVector, IdentifiedSetup, Pathway, StudyDataset, N_FEATURES,
};
use crate::config::{Method, RunConfig};
use crate::error::{Result, ShmError};
use crate::fem::{case_model, solve_modes, DamageSpec, FemModel, ModalData};
use crate::seeds::derive_seed;
use crate::sim::{make_excitation, simulate_response, simulate_transition, ExcitationKind, ExcitationSpec, SeriesMeta, TimeSeries};
use crate::sysid::{
    build_windows, decimate, decimation_factor, extract_modes, identify_ar, init_mlp, online_update, predict_next,
    stabilize, train_predictor, window_size, ArModel, IdentifySettings, Predictor,
};

/// Stream ids mixed into the master seed.
const STREAM_MLP_INIT: u64 = 101;
const STREAM_MLP_SHUFFLE: u64 = 102;
const STREAM_ONLINE: u64 = 103;

/// Relative frequency tolerance used to compare identified with oracle modes.
pub fn agreement_tolerance(kind: ExcitationKind) -> f64 {
    match kind {
        ExcitationKind::Pluck => 0.005,
        ExcitationKind::Random => 0.02,
    }
}

pub fn case_modal(cfg: &RunConfig, case_id: usize) -> Result<(FemModel, ModalData)> {
    let model = case_model(&cfg.beam, case_id)?;
    let modal = solve_modes(&model, cfg.beam.n_modes, cfg.beam.damping_ratio)?;
    Ok((model, modal))
}

/// Highest retained pristine frequency, the band limit used by the window and decimation rules.
pub fn band_limit(cfg: &RunConfig) -> Result<f64> {
    let (_, modal) = case_modal(cfg, 0)?;
    Ok(*modal.freqs_hz.last().expect("at least one mode"))
}

/// Sensor record of one case under the configured excitation.
pub fn simulate_case(cfg: &RunConfig, case_id: usize) -> Result<TimeSeries> {
    cfg.validate()?;
    let (model, modal) = case_modal(cfg, case_id)?;
    let spec = ExcitationSpec {
        seed: crate::classify::case_excitation_seed(cfg.master_seed, case_id),
        ..cfg.excitation.clone()
    };
    let s = &cfg.sampling;
    let force = make_excitation(&spec, &model, s.fs, s.duration_s)?;
    let meta = SeriesMeta { case_id: Some(case_id), seed: cfg.master_seed, sensors: Vec::new() };
    simulate_response(&modal, &force, &cfg.sensors, s.fs, s.duration_s, meta)
}

pub fn identified_setup(cfg: &RunConfig) -> IdentifiedSetup {
    IdentifiedSetup {
        excitation: cfg.excitation.clone(),
        fs: cfg.sampling.fs,
        duration: cfg.sampling.duration_s,
        sensor: cfg.sensors[0].clone(),
        settings: cfg.sysid.identify_settings(),
    }
}

/// Fit the configured predictor to one channel of a record.
pub fn identify_series(cfg: &RunConfig, series: &TimeSeries, channel: &str) -> Result<(Predictor, Vec<f64>)> {
    let f_max = band_limit(cfg)?;
    match cfg.sysid.method {
        Method::Ar => {
            let values = series.channel(channel)?;
            let ar = identify_ar(values, series.fs, cfg.excitation.kind, cfg.beam.n_modes, f_max, &cfg.sysid.identify_settings())?;
            Ok((Predictor::Ar(ar), Vec::new()))
        }
        Method::Mlp => {
            let n = match cfg.sysid.window {
                Some(n) => n,
                None => window_size(series.fs, f_max, None)?,
            };
            let data = build_windows(series, channel, n)?;
            let mut sizes = vec![n];
            sizes.extend(&cfg.sysid.hidden);
            sizes.push(1);
            let init = init_mlp(&sizes, derive_seed(cfg.master_seed, STREAM_MLP_INIT))?;
            let mut hyper = cfg.sysid.train.clone();
            if hyper.shuffle_seed.is_some() {
                hyper.shuffle_seed = Some(derive_seed(cfg.master_seed, STREAM_MLP_SHUFFLE));
            }
            let (mlp, history) = train_predictor(&init, &data, &hyper)?;
            Ok((Predictor::Mlp(mlp), history))
        }
    }
}

/// One case of the study report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseRow {
    pub case: DamageSpec,
    pub oracle_hz: [f64; N_FEATURES],
    pub identified_hz: Option<[f64; N_FEATURES]>,
    pub oracle_features: FeatureVector,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Agreement {
    pub tolerance: f64,
    pub within: usize,
    pub compared: usize,
    /// Largest relative deviation per compared case, in case order.
    pub worst_rel_error: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyReport {
    pub master_seed: u64,
    pub excitation: ExcitationKind,
    pub rows: Vec<CaseRow>,
    pub exclusions: Vec<Exclusion>,
    pub agreement: Option<Agreement>,
    pub classifier_pathway: Pathway,
    pub classifier: ClassifierMetrics,
    /// `(stage, seconds)`; not part of the deterministic outputs.
    #[serde(skip)]
    pub timings: Vec<(String, f64)>,
}

pub struct StudyOutputs {
    pub report: StudyReport,
    pub oracle: StudyDataset,
    pub identified: Option<StudyDataset>,
    pub classifier: ClassifierModel,
}

/// Run `f` on a pool of `workers` threads (`0` = one per core).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| ShmError::invalid(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// The 61-case study: oracle frequencies always, identified ones when asked,
/// plus a classifier trained on the configured pathway.
pub fn run_study(cfg: &RunConfig, identified: bool) -> Result<StudyOutputs> {
    cfg.validate()?;
    let mut timings = Vec::new();
    let t = Instant::now();
    let oracle = full_study_dataset(&cfg.beam, Pathway::Oracle, 0.0, 1, cfg.master_seed, None)?;
    timings.push(("oracle".to_string(), t.elapsed().as_secs_f64()));

    let setup = identified_setup(cfg);
    let ident = if identified {
        let t = Instant::now();
        let ds = full_study_dataset(&cfg.beam, Pathway::Identified, 0.0, 1, cfg.master_seed, Some(&setup))?;
        timings.push(("identified".to_string(), t.elapsed().as_secs_f64()));
        Some(ds)
    } else {
        None
    };

    let mut rows = Vec::with_capacity(oracle.rows.len());
    for r in &oracle.rows {
        let identified_hz = ident
            .as_ref()
            .and_then(|d| d.rows.iter().find(|x| x.case.case_id == r.case.case_id))
            .map(|x| x.freqs_hz);
        rows.push(CaseRow { case: r.case, oracle_hz: r.freqs_hz, identified_hz, oracle_features: r.features });
    }

    let agreement = ident.is_some().then(|| {
        let tolerance = agreement_tolerance(cfg.excitation.kind);
        let damaged: Vec<&CaseRow> = rows.iter().filter(|r| !r.case.is_pristine()).collect();
        let mut worst_rel_error = Vec::new();
        let mut within = 0;
        for r in &damaged {
            if let Some(idf) = r.identified_hz {
                let worst = idf
                    .iter()
                    .zip(&r.oracle_hz)
                    .map(|(a, b)| (a - b).abs() / b)
                    .fold(0.0, f64::max);
                if worst <= tolerance {
                    within += 1;
                }
                worst_rel_error.push((r.case.case_id, worst));
            }
        }
        Agreement { tolerance, within, compared: damaged.len(), worst_rel_error }
    });

    let t = Instant::now();
    let c = &cfg.classifier;
    let train_set = full_study_dataset(
        &cfg.beam,
        c.pathway,
        c.noise_rel,
        c.replicates,
        cfg.master_seed,
        (c.pathway == Pathway::Identified).then_some(&setup),
    )?;
    let (model, _) = train_classifier(&train_set, &c.hyper)?;
    let eval_set = match c.pathway {
        Pathway::Oracle => &oracle,
        Pathway::Identified => ident.as_ref().unwrap_or(&train_set),
    };
    let metrics = evaluate(&model, &eval_set.rows)?;
    timings.push(("classifier".to_string(), t.elapsed().as_secs_f64()));

    let mut exclusions = oracle.exclusions.clone();
    if let Some(d) = &ident {
        exclusions.extend(d.exclusions.iter().cloned());
    }
    let report = StudyReport {
        master_seed: cfg.master_seed,
        excitation: cfg.excitation.kind,
        rows,
        exclusions,
        agreement,
        classifier_pathway: c.pathway,
        classifier: metrics,
        timings,
    };
    Ok(StudyOutputs { report, oracle, identified: ident, classifier: model })
}

/// Human-readable study summary.
pub fn study_summary(report: &StudyReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("study: {} cases, master_seed {}\n", report.rows.len(), report.master_seed));
    out.push_str("case sev len start   f1_oracle   f2_oracle   f3_oracle   f4_oracle");
    let with_id = report.rows.iter().any(|r| r.identified_hz.is_some());
    if with_id {
        out.push_str("   f1_ident   f2_ident   f3_ident   f4_ident");
    }
    out.push('\n');
    for r in &report.rows {
        let c = &r.case;
        out.push_str(&format!("{:4} {:3} {:3} {:5}", c.case_id, c.severity, c.length_elements, c.start_element));
        for f in r.oracle_hz {
            out.push_str(&format!(" {f:11.5}"));
        }
        if let Some(idf) = r.identified_hz {
            for f in idf {
                out.push_str(&format!(" {f:10.4}"));
            }
        }
        out.push('\n');
    }
    if !report.exclusions.is_empty() {
        out.push_str(&format!("excluded cases: {}\n", report.exclusions.len()));
        for e in &report.exclusions {
            out.push_str(&format!("  case {}: {}\n", e.case_id, e.reason));
        }
    }
    if let Some(a) = &report.agreement {
        out.push_str(&format!(
            "identified vs oracle within {:.1}%: {}/{} damaged cases\n",
            100.0 * a.tolerance,
            a.within,
            a.compared
        ));
    }
    let m = &report.classifier;
    out.push_str(&format!("classifier ({:?} pathway)\n", report.classifier_pathway));
    out.push_str(&format!("detection accuracy {:.1}%\n", 100.0 * m.detection_accuracy));
    out.push_str(&format_confusion("severity", &m.severity));
    out.push_str(&format_confusion("location", &m.location));
    out.push_str(&format_confusion("length", &m.length));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OnlineReport {
    pub damage: DamageSpec,
    pub lr: f64,
    pub decimation: usize,
    pub f1_pristine_fem: f64,
    pub f1_damaged_fem: f64,
    pub f1_frozen: Option<f64>,
    pub f1_online: Option<f64>,
    /// `1 − |f_online − f_damaged| / |f_frozen − f_damaged|`.
    pub gap_closed: Option<f64>,
    /// Mean squared one-step error over the final `eval_s` seconds.
    pub mse_frozen: f64,
    pub mse_online: f64,
    pub eval_s: f64,
}

fn first_mode(ar: &ArModel) -> Result<Option<f64>> {
    Ok(extract_modes(&stabilize(ar)?)?.first().map(|m| m.freq_hz))
}

/// Pristine for `pre_s` seconds, then `damage` for `post_s` seconds with
/// continuous state. The AR model fitted to the pristine part is streamed
/// through the whole record with NLMS and compared with its frozen copy.
pub fn online_demo(cfg: &RunConfig, damage: DamageSpec, pre_s: f64, post_s: f64, lr: f64, eval_s: f64) -> Result<OnlineReport> {
    cfg.validate()?;
    if !(pre_s > 0.0 && post_s > 0.0 && eval_s > 0.0 && eval_s <= post_s) {
        return Err(ShmError::invalid("online demo needs pre, post > 0 and 0 < eval <= post"));
    }
    let fs = cfg.sampling.fs;
    let (pristine_model, before) = case_modal(cfg, 0)?;
    let (damaged_model, after) = case_modal(cfg, damage.case_id)?;
    let f_max = *before.freqs_hz.last().expect("modes");
    let total = pre_s + post_s;
    let spec = ExcitationSpec { seed: derive_seed(cfg.master_seed, STREAM_ONLINE), ..cfg.excitation.clone() };
    let force = make_excitation(&spec, &pristine_model, fs, total)?;
    let switch = (pre_s * fs).round() as usize;
    let meta = SeriesMeta { case_id: Some(damage.case_id), seed: cfg.master_seed, sensors: Vec::new() };
    let series = simulate_transition(&before, &after, &damaged_model.mass, &force, &cfg.sensors[..1], fs, total, switch, meta)?;
    let x = &series.channels[0].values;

    let factor = cfg.sysid.decimation.unwrap_or_else(|| decimation_factor(fs, f_max));
    let settings = IdentifySettings { decimation: Some(factor), ..cfg.sysid.identify_settings() };
    let frozen = identify_ar(&x[..switch], fs, cfg.excitation.kind, cfg.beam.n_modes, f_max, &settings)?;
    let y = decimate(x, factor);
    let n = frozen.order();
    let eval_from = y.len().saturating_sub((eval_s * fs / factor as f64).round() as usize).max(n);

    let frozen_p = Predictor::Ar(frozen.clone());
    let mut online = frozen_p.clone();
    let (mut se_frozen, mut se_online, mut count) = (0.0, 0.0, 0usize);
    let mut window: Vec<f64> = Vec::with_capacity(n);
    for k in n..y.len() {
        window.clear();
        window.extend((1..=n).map(|j| y[k - j]));
        if k >= eval_from {
            se_frozen += (y[k] - predict_next(&frozen_p, &window)?).powi(2);
            se_online += (y[k] - predict_next(&online, &window)?).powi(2);
            count += 1;
        }
        online = online_update(&online, y[k], &window, lr)?;
    }
    let Predictor::Ar(adapted) = &online else { unreachable!("AR stays AR") };
    let f1_frozen = first_mode(&frozen)?;
    let f1_online = first_mode(adapted)?;
    let f1_damaged_fem = after.freqs_hz[0];
    let gap_closed = match (f1_frozen, f1_online) {
        (Some(a), Some(b)) if a != f1_damaged_fem => Some(1.0 - (b - f1_damaged_fem).abs() / (a - f1_damaged_fem).abs()),
        _ => None,
    };
    let count = count.max(1) as f64;
    Ok(OnlineReport {
        damage,
        lr,
        decimation: factor,
        f1_pristine_fem: before.freqs_hz[0],
        f1_damaged_fem,
        f1_frozen,
        f1_online,
        gap_closed,
        mse_frozen: se_frozen / count,
        mse_online: se_online / count,
        eval_s,
    })
}
