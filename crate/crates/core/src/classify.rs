//! Damage features from modal shifts and the three-headed damage classifier.
//!
//! A feature vector holds the relative drops `(f_base − f)/f_base` of the
//! first four natural frequencies. The classifier maps it to severity
//! (none, 1, 2, 3), one of ten locations and one of two lengths.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ShmError};
use crate::fem::{
    case_model, enumerate_damage_cases, solve_modes, BeamConfig, DamageSpec, DAMAGE_START_ELEMENTS,
};
use crate::network::{Adam, Gradients, Network};
use crate::seeds::{derive_seed, rng};
use crate::sim::{make_excitation, simulate_response, ExcitationSpec, SensorSpec, SeriesMeta};
use crate::sysid::{extract_modes, identify_ar, mean_std, IdentifySettings, Normalization, DIVERGENCE_FACTOR};

pub const N_FEATURES: usize = 4;
/// Logit counts of the severity, location and length heads.
pub const HEADS: [usize; 3] = [4, 10, 2];
/// Largest relative distance at which an identified mode can match a baseline mode.
pub const MATCH_TOL: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub rel_shifts: [f64; N_FEATURES],
}

impl FeatureVector {
    pub fn zero() -> Self {
        Self { rel_shifts: [0.0; N_FEATURES] }
    }

    pub fn norm(&self) -> f64 {
        self.rel_shifts.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn check_freqs(freqs: &[f64], what: &str) -> Result<()> {
    if freqs.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        return Err(ShmError::invalid(format!("{what} frequencies must be finite and positive")));
    }
    Ok(())
}

/// Pick, for each of the first four baseline modes, the nearest current mode.
///
/// Pairs are assigned greedily by relative distance, each mode used at most
/// once, and only within [`MATCH_TOL`].
pub fn match_modes(baseline: &[f64], current: &[f64]) -> Result<[f64; N_FEATURES]> {
    if baseline.len() < N_FEATURES {
        return Err(ShmError::invalid(format!(
            "baseline supplies {} frequencies, need {N_FEATURES}",
            baseline.len()
        )));
    }
    check_freqs(baseline, "baseline")?;
    check_freqs(current, "current")?;
    let base = &baseline[..N_FEATURES];
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, b) in base.iter().enumerate() {
        for (j, c) in current.iter().enumerate() {
            let d = (c - b).abs() / b;
            if d <= MATCH_TOL {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = [None; N_FEATURES];
    let mut used = vec![false; current.len()];
    for (_, i, j) in pairs {
        if out[i].is_none() && !used[j] {
            out[i] = Some(current[j]);
            used[j] = true;
        }
    }
    let matched = out.iter().filter(|v| v.is_some()).count();
    if matched < N_FEATURES {
        return Err(ShmError::InsufficientModes { matched, required: N_FEATURES });
    }
    Ok(out.map(|v| v.expect("all matched")))
}

pub fn extract_features(baseline: &[f64], current: &[f64]) -> Result<FeatureVector> {
    let matched = match_modes(baseline, current)?;
    let mut rel_shifts = [0.0; N_FEATURES];
    for i in 0..N_FEATURES {
        rel_shifts[i] = (baseline[i] - matched[i]) / baseline[i];
    }
    Ok(FeatureVector { rel_shifts })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pathway {
    Oracle,
    Identified,
}

impl std::str::FromStr for Pathway {
    type Err = ShmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Pathway::Oracle),
            "identified" => Ok(Pathway::Identified),
            _ => Err(ShmError::invalid(format!("unknown pathway {s:?} (oracle|identified)"))),
        }
    }
}

/// How the identified pathway turns a case into frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentifiedSetup {
    pub excitation: ExcitationSpec,
    pub fs: f64,
    pub duration: f64,
    pub sensor: SensorSpec,
    pub settings: IdentifySettings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub case: DamageSpec,
    pub replicate: usize,
    pub freqs_hz: [f64; N_FEATURES],
    pub features: FeatureVector,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Exclusion {
    pub case_id: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyDataset {
    pub pathway: Pathway,
    pub noise_rel: f64,
    pub replicates: usize,
    pub seed: u64,
    pub baseline_hz: [f64; N_FEATURES],
    pub rows: Vec<StudyRow>,
    pub exclusions: Vec<Exclusion>,
}

/// FEM frequencies of every case, in case order.
pub fn oracle_frequencies(cfg: &BeamConfig, cases: &[DamageSpec]) -> Result<Vec<Vec<f64>>> {
    cases
        .par_iter()
        .map(|c| {
            let model = case_model(cfg, c.case_id)?;
            Ok(solve_modes(&model, cfg.n_modes, cfg.damping_ratio)?.freqs_hz)
        })
        .collect()
}

/// Seed of the excitation record for one case.
pub fn case_excitation_seed(seed: u64, case_id: usize) -> u64 {
    derive_seed(derive_seed(seed, case_id as u64), 0)
}

fn replicate_seed(seed: u64, case_id: usize, replicate: usize) -> u64 {
    derive_seed(derive_seed(derive_seed(seed, case_id as u64), 1), replicate as u64)
}

/// Simulate one case, fit an AR model and return its accepted mode frequencies.
pub fn identify_case(cfg: &BeamConfig, case_id: usize, setup: &IdentifiedSetup, seed: u64, f_max: f64) -> Result<Vec<f64>> {
    let model = case_model(cfg, case_id)?;
    let modal = solve_modes(&model, cfg.n_modes, cfg.damping_ratio)?;
    let spec = ExcitationSpec { seed: case_excitation_seed(seed, case_id), ..setup.excitation.clone() };
    let force = make_excitation(&spec, &model, setup.fs, setup.duration)?;
    let meta = SeriesMeta { case_id: Some(case_id), seed, sensors: Vec::new() };
    let series = simulate_response(&modal, &force, std::slice::from_ref(&setup.sensor), setup.fs, setup.duration, meta)?;
    let ar = identify_ar(&series.channels[0].values, setup.fs, spec.kind, cfg.n_modes, f_max, &setup.settings)?;
    Ok(extract_modes(&ar)?.iter().map(|m| m.freq_hz).collect())
}

/// Labeled feature rows for `cases` under one pathway.
///
/// Each case contributes `replicates` rows; replicate frequencies are
/// perturbed by `f·(1 + σ·N(0,1))` before features are taken. Identified
/// cases whose modes cannot be matched are listed in `exclusions`.
pub fn build_study_dataset(
    cfg: &BeamConfig,
    cases: &[DamageSpec],
    pathway: Pathway,
    noise_rel: f64,
    replicates: usize,
    seed: u64,
    setup: Option<&IdentifiedSetup>,
) -> Result<StudyDataset> {
    if replicates == 0 {
        return Err(ShmError::invalid("replicates must be >= 1"));
    }
    if !(noise_rel >= 0.0 && noise_rel.is_finite()) {
        return Err(ShmError::invalid("noise level must be finite and >= 0"));
    }
    cfg.validate()?;
    let pristine = oracle_frequencies(cfg, &[DamageSpec::pristine()])?.remove(0);
    if pristine.len() < N_FEATURES {
        return Err(ShmError::invalid(format!("the beam model must retain at least {N_FEATURES} modes")));
    }
    let f_max = pristine[cfg.n_modes - 1];

    let (baseline, per_case): ([f64; N_FEATURES], Vec<Result<[f64; N_FEATURES]>>) = match pathway {
        Pathway::Oracle => {
            let freqs = oracle_frequencies(cfg, cases)?;
            let base = match_modes(&pristine, &pristine)?;
            (base, freqs.iter().map(|f| match_modes(&base, f)).collect())
        }
        Pathway::Identified => {
            let setup = setup.ok_or_else(|| ShmError::invalid("identified pathway needs an identification setup"))?;
            let base_modes = identify_case(cfg, 0, setup, seed, f_max)?;
            let base = match_modes(&pristine, &base_modes)?;
            let per_case = cases
                .par_iter()
                .map(|c| {
                    let modes = if c.case_id == 0 { base_modes.clone() } else { identify_case(cfg, c.case_id, setup, seed, f_max)? };
                    match_modes(&base, &modes)
                })
                .collect();
            (base, per_case)
        }
    };

    let mut rows = Vec::with_capacity(cases.len() * replicates);
    let mut exclusions = Vec::new();
    for (case, freqs) in cases.iter().zip(per_case) {
        let freqs = match freqs {
            Ok(f) => f,
            Err(e) => {
                exclusions.push(Exclusion { case_id: case.case_id, reason: e.to_string() });
                continue;
            }
        };
        for r in 0..replicates {
            let mut noisy = freqs;
            if noise_rel > 0.0 {
                let mut g = rng(replicate_seed(seed, case.case_id, r));
                for f in noisy.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut g);
                    *f *= 1.0 + noise_rel * z;
                }
            }
            let features = extract_features(&baseline, &noisy)?;
            rows.push(StudyRow { case: *case, replicate: r, freqs_hz: noisy, features });
        }
    }
    Ok(StudyDataset { pathway, noise_rel, replicates, seed, baseline_hz: baseline, rows, exclusions })
}

/// All 61 cases under one pathway.
pub fn full_study_dataset(
    cfg: &BeamConfig,
    pathway: Pathway,
    noise_rel: f64,
    replicates: usize,
    seed: u64,
    setup: Option<&IdentifiedSetup>,
) -> Result<StudyDataset> {
    build_study_dataset(cfg, &enumerate_damage_cases(), pathway, noise_rel, replicates, seed, setup)
}

pub const STUDY_CSV_HEADER: &str = "case_id,severity,length_elements,start_element,f1_hz,f2_hz,f3_hz,f4_hz";

/// One line per row; the pristine case has zero length and start element.
pub fn study_csv(rows: &[StudyRow]) -> String {
    let mut out = String::from(STUDY_CSV_HEADER);
    out.push('\n');
    for row in rows {
        let c = &row.case;
        let (len, start) = if c.is_pristine() { (0, 0) } else { (c.length_elements, c.start_element) };
        out.push_str(&format!("{},{},{},{}", c.case_id, c.severity, len, start));
        for f in row.freqs_hz {
            out.push_str(&format!(",{f:?}"));
        }
        out.push('\n');
    }
    out
}

/// Class indices of one row; location and length are `None` on pristine rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Labels {
    pub severity: usize,
    pub location: Option<usize>,
    pub length: Option<usize>,
}

impl Labels {
    pub fn of(case: &DamageSpec) -> Self {
        if case.is_pristine() {
            Self { severity: 0, location: None, length: None }
        } else {
            Self {
                severity: case.severity,
                location: Some(case.location_index()),
                length: Some(case.length_elements - 1),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierHyper {
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ClassifierHyper {
    fn default() -> Self {
        Self { hidden: 16, lr: 0.01, epochs: 3000, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMeta {
    pub seed: u64,
    pub noise_rel: f64,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub net: Network,
    /// Feature standardization; only the input half is used.
    pub norm: Normalization,
    pub heads: Vec<usize>,
    pub meta: ClassifierMeta,
}

pub fn init_classifier(hidden: usize, seed: u64) -> Result<ClassifierModel> {
    let n_out: usize = HEADS.iter().sum();
    Ok(ClassifierModel {
        net: Network::init(&[N_FEATURES, hidden, n_out], seed)?,
        norm: Normalization::identity(N_FEATURES),
        heads: HEADS.to_vec(),
        meta: ClassifierMeta { seed, noise_rel: 0.0, replicates: 1 },
    })
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn head_ranges(heads: &[usize]) -> Vec<std::ops::Range<usize>> {
    let mut start = 0;
    heads
        .iter()
        .map(|&h| {
            let r = start..start + h;
            start += h;
            r
        })
        .collect()
}

/// Mean over rows of the summed per-head cross-entropy, and its gradient.
///
/// Location and length terms are dropped on rows whose label is `None`.
/// `inputs` are already standardized.
pub fn classifier_loss_and_gradients(
    net: &Network,
    heads: &[usize],
    inputs: &[[f64; N_FEATURES]],
    labels: &[Labels],
) -> Result<(f64, Gradients)> {
    if inputs.is_empty() || inputs.len() != labels.len() {
        return Err(ShmError::invalid("classifier batch must be nonempty with one label per row"));
    }
    if net.output_dim() != heads.iter().sum::<usize>() || heads.len() != 3 {
        return Err(ShmError::invalid("network output does not match the head layout"));
    }
    let ranges = head_ranges(heads);
    let scale = 1.0 / inputs.len() as f64;
    let mut grads = Gradients::zeros_like(net);
    let mut loss = 0.0;
    for (x, lab) in inputs.iter().zip(labels) {
        let acts = net.forward_all(x);
        let logits = acts.last().expect("output");
        let mut d_out = vec![0.0; logits.len()];
        for (range, target) in ranges.iter().zip([Some(lab.severity), lab.location, lab.length]) {
            let Some(t) = target else { continue };
            if t >= range.len() {
                return Err(ShmError::invalid(format!("label {t} outside a head of {} classes", range.len())));
            }
            let p = softmax(&logits[range.clone()]);
            loss -= p[t].max(f64::MIN_POSITIVE).ln();
            for (k, pk) in p.iter().enumerate() {
                let onehot = if k == t { 1.0 } else { 0.0 };
                d_out[range.start + k] = (pk - onehot) * scale;
            }
        }
        net.backward(&acts, &d_out, &mut grads);
    }
    Ok((loss * scale, grads))
}

fn feature_set(model: &ClassifierModel, rows: &[StudyRow]) -> Vec<[f64; N_FEATURES]> {
    rows.iter()
        .map(|r| {
            let s = model.norm.standardize_input(&r.features.rel_shifts);
            [s[0], s[1], s[2], s[3]]
        })
        .collect()
}

/// Full-batch Adam on the masked cross-entropy, starting from `init`.
///
/// Feature statistics of `rows` become the model's standardization.
pub fn train_classifier_from(
    init: &ClassifierModel,
    rows: &[StudyRow],
    hyper: &ClassifierHyper,
    meta: ClassifierMeta,
) -> Result<(ClassifierModel, Vec<f64>)> {
    if rows.is_empty() {
        return Err(ShmError::invalid("empty training set"));
    }
    let mut classes: Vec<usize> = rows.iter().map(|r| r.case.severity).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(ShmError::invalid("training set must cover at least two severity classes"));
    }
    if !(hyper.lr >= 0.0 && hyper.lr.is_finite()) {
        return Err(ShmError::invalid("learning rate must be finite and >= 0"));
    }
    let (in_mean, in_std): (Vec<f64>, Vec<f64>) = (0..N_FEATURES)
        .map(|j| mean_std(rows.iter().map(move |r| r.features.rel_shifts[j])))
        .unzip();
    let mut model = init.clone();
    model.norm = Normalization { in_mean, in_std, out_mean: 0.0, out_std: 1.0 };
    model.meta = meta;
    let inputs = feature_set(&model, rows);
    let labels: Vec<Labels> = rows.iter().map(|r| Labels::of(&r.case)).collect();

    let mut opt = Adam::new(&model.net, hyper.lr);
    let mut history = Vec::with_capacity(hyper.epochs);
    let (initial, mut grads) = classifier_loss_and_gradients(&model.net, &model.heads, &inputs, &labels)?;
    for epoch in 0..hyper.epochs {
        opt.step(&mut model.net, &grads);
        let (loss, g) = classifier_loss_and_gradients(&model.net, &model.heads, &inputs, &labels)?;
        if !loss.is_finite() || loss > DIVERGENCE_FACTOR * initial.max(f64::MIN_POSITIVE) {
            return Err(ShmError::TrainingDiverged { epoch: epoch + 1, loss });
        }
        history.push(loss);
        grads = g;
    }
    Ok((model, history))
}

pub fn train_classifier(dataset: &StudyDataset, hyper: &ClassifierHyper) -> Result<(ClassifierModel, Vec<f64>)> {
    let init = init_classifier(hyper.hidden, hyper.seed)?;
    let meta = ClassifierMeta { seed: hyper.seed, noise_rel: dataset.noise_rel, replicates: dataset.replicates };
    train_classifier_from(&init, &dataset.rows, hyper, meta)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DamageReport {
    /// 0 = none, otherwise 1..=3.
    pub severity: usize,
    pub severity_confidence: Vec<f64>,
    /// Location bin 0..10, suppressed when no damage is reported.
    pub location: Option<usize>,
    pub location_confidence: Vec<f64>,
    /// Delamination length in elements (1 or 2), suppressed when no damage is reported.
    pub length: Option<usize>,
    pub length_confidence: Vec<f64>,
}

impl DamageReport {
    pub fn start_element(&self) -> Option<usize> {
        self.location.map(|l| DAMAGE_START_ELEMENTS[l])
    }
}

fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

pub fn classify(model: &ClassifierModel, features: &FeatureVector) -> Result<DamageReport> {
    if features.rel_shifts.iter().any(|v| !v.is_finite()) {
        return Err(ShmError::invalid("features must be finite"));
    }
    let x = model.norm.standardize_input(&features.rel_shifts);
    let logits = model.net.forward(&x);
    let ranges = head_ranges(&model.heads);
    let sev = softmax(&logits[ranges[0].clone()]);
    let loc = softmax(&logits[ranges[1].clone()]);
    let len = softmax(&logits[ranges[2].clone()]);
    let severity = argmax(&sev);
    let damaged = severity > 0;
    Ok(DamageReport {
        severity,
        location: damaged.then(|| argmax(&loc)),
        length: damaged.then(|| argmax(&len) + 1),
        severity_confidence: sev,
        location_confidence: loc,
        length_confidence: len,
    })
}

/// Accuracy and confusion matrix (rows = true class, columns = predicted).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadMetrics {
    pub accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
}

impl HeadMetrics {
    fn from_pairs(n: usize, pairs: &[(usize, usize)]) -> Self {
        let mut confusion = vec![vec![0; n]; n];
        for &(t, p) in pairs {
            confusion[t][p] += 1;
        }
        let correct = pairs.iter().filter(|(t, p)| t == p).count();
        let accuracy = if pairs.is_empty() { 0.0 } else { correct as f64 / pairs.len() as f64 };
        Self { accuracy, confusion }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassifierMetrics {
    pub severity: HeadMetrics,
    /// Over damaged rows, from the raw location head.
    pub location: HeadMetrics,
    /// Over damaged rows, from the raw length head.
    pub length: HeadMetrics,
    /// Fraction of rows whose damaged/pristine call is right.
    pub detection_accuracy: f64,
}

pub fn evaluate(model: &ClassifierModel, rows: &[StudyRow]) -> Result<ClassifierMetrics> {
    let (mut sev, mut loc, mut len) = (Vec::new(), Vec::new(), Vec::new());
    let mut detected = 0;
    for row in rows {
        let rep = classify(model, &row.features)?;
        let lab = Labels::of(&row.case);
        sev.push((lab.severity, rep.severity));
        if (lab.severity > 0) == (rep.severity > 0) {
            detected += 1;
        }
        if let (Some(l), Some(n)) = (lab.location, lab.length) {
            loc.push((l, argmax(&rep.location_confidence)));
            len.push((n, argmax(&rep.length_confidence)));
        }
    }
    Ok(ClassifierMetrics {
        severity: HeadMetrics::from_pairs(HEADS[0], &sev),
        location: HeadMetrics::from_pairs(HEADS[1], &loc),
        length: HeadMetrics::from_pairs(HEADS[2], &len),
        detection_accuracy: if rows.is_empty() { 0.0 } else { detected as f64 / rows.len() as f64 },
    })
}

/// Plain-text rendering of a confusion matrix.
pub fn format_confusion(title: &str, m: &HeadMetrics) -> String {
    let mut out = format!("{title} (accuracy {:.1}%)\n", 100.0 * m.accuracy);
    for row in &m.confusion {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:4}")).collect();
        out.push_str(&cells.join(""));
        out.push('\n');
    }
    out
}
