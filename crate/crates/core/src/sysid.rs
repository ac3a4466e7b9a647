//! Tapped-delay-line predictors of a sampled response `x(k)`.
//!
//! Both predictors see the window `[x(k−1), x(k−2), …, x(k−n)]` (newest
//! first) and estimate `x(k)`. The linear predictor is an AR model
//! `x̂(k) = Σ aⱼ·x(k−j)` whose characteristic roots are the discrete poles of
//! the structure; the nonlinear one is a two-hidden-layer sigmoid MLP.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ShmError};
use crate::network::{Gradients, Momentum, Network};
use crate::seeds::{derive_seed, rng};
use crate::sim::{ExcitationKind, TimeSeries};

/// Poles inside this radius are treated as over-modeling artifacts.
pub const ROOT_MIN_RADIUS: f64 = 0.5;
/// Slack above the unit circle for marginally stable (undamped) poles.
pub const ROOT_MAX_RADIUS: f64 = 1.0 + 1e-6;
/// Poles with a higher equivalent damping ratio are discarded.
pub const MAX_POLE_DAMPING: f64 = 0.2;
/// Regularizer in the NLMS step `lr/(ε + ‖w‖²)`.
pub const NLMS_EPS: f64 = 1e-8;
/// Relative tolerance on QR pivots below which an unregularized fit is rank deficient.
pub const RANK_TOL: f64 = 1e-13;

/// `round(fs / (2·f_max))`, raised to `2·n_modes` when a mode count is given.
pub fn window_size(fs: f64, f_max: f64, n_modes: Option<usize>) -> Result<usize> {
    if !(f_max > 0.0 && fs.is_finite() && f_max.is_finite()) || fs <= 2.0 * f_max {
        return Err(ShmError::invalid(format!(
            "sample rate {fs} Hz does not exceed twice the highest mode ({f_max} Hz)"
        )));
    }
    let n = (fs / (2.0 * f_max)).round() as usize;
    Ok(n.max(n_modes.map_or(1, |m| 2 * m)).max(1))
}

/// Identification order: `2·n_modes` for free decay, `⌈2.5·2·n_modes⌉` under random forcing.
pub fn default_ar_order(kind: ExcitationKind, n_modes: usize) -> usize {
    match kind {
        ExcitationKind::Pluck => 2 * n_modes,
        ExcitationKind::Random => (2.5 * (2 * n_modes) as f64).ceil() as usize,
    }
}

/// Identification sample rate is kept at or above this multiple of the highest mode.
pub const DECIMATION_MARGIN: f64 = 4.0;

/// Block-averaging factor `max(1, ⌊fs / (4·f_max)⌋)` used before fitting a
/// randomly excited response.
pub fn decimation_factor(fs: f64, f_max: f64) -> usize {
    if !(fs > 0.0 && f_max > 0.0) {
        return 1;
    }
    ((fs / (DECIMATION_MARGIN * f_max)).floor() as usize).max(1)
}

/// Non-overlapping block means of `factor` samples; a trailing partial block is dropped.
pub fn decimate(values: &[f64], factor: usize) -> Vec<f64> {
    if factor <= 1 {
        return values.to_vec();
    }
    values
        .chunks_exact(factor)
        .map(|c| c.iter().sum::<f64>() / factor as f64)
        .collect()
}

/// Standardization statistics. Only the MLP path applies them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub in_mean: Vec<f64>,
    pub in_std: Vec<f64>,
    pub out_mean: f64,
    pub out_std: f64,
}

impl Normalization {
    pub fn identity(n: usize) -> Self {
        Self { in_mean: vec![0.0; n], in_std: vec![1.0; n], out_mean: 0.0, out_std: 1.0 }
    }

    pub fn standardize_input(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.in_mean.iter().zip(&self.in_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn standardize_output(&self, y: f64) -> f64 {
        (y - self.out_mean) / self.out_std
    }

    pub fn destandardize_output(&self, z: f64) -> f64 {
        z * self.out_std + self.out_mean
    }
}

/// Mean and population std; a zero spread is replaced by 1.
pub(crate) fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std > 0.0 && std.is_finite() { std } else { 1.0 })
}

/// Sliding tapped-delay windows and their one-step targets.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    /// `rows × n`, row `r` is `[x(r+n−1), …, x(r)]`.
    pub inputs: DMatrix<f64>,
    pub targets: DVector<f64>,
    pub n: usize,
    pub fs: f64,
    pub norm: Normalization,
}

impl WindowedDataset {
    pub fn from_values(values: &[f64], n: usize, fs: f64) -> Result<Self> {
        if n == 0 || n >= values.len() {
            return Err(ShmError::invalid(format!(
                "window {n} needs 1 <= n < {} samples",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ShmError::invalid("series contains non-finite values"));
        }
        let rows = values.len() - n;
        let inputs = DMatrix::from_fn(rows, n, |r, j| values[r + n - 1 - j]);
        let targets = DVector::from_fn(rows, |r, _| values[r + n]);
        let (in_mean, in_std): (Vec<f64>, Vec<f64>) = (0..n)
            .map(|j| mean_std(inputs.column(j).iter().copied()))
            .unzip();
        let (out_mean, out_std) = mean_std(targets.iter().copied());
        Ok(Self {
            inputs,
            targets,
            n,
            fs,
            norm: Normalization { in_mean, in_std, out_mean, out_std },
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn row(&self, r: usize) -> Vec<f64> {
        self.inputs.row(r).iter().copied().collect()
    }

    /// Contiguous row range `[start, end)` as a new dataset with recomputed statistics.
    pub fn slice(&self, start: usize, end: usize) -> WindowedDataset {
        let inputs = self.inputs.rows(start, end - start).into_owned();
        let targets = self.targets.rows(start, end - start).into_owned();
        let (in_mean, in_std): (Vec<f64>, Vec<f64>) = (0..self.n)
            .map(|j| mean_std(inputs.column(j).iter().copied()))
            .unzip();
        let (out_mean, out_std) = mean_std(targets.iter().copied());
        WindowedDataset {
            inputs,
            targets,
            n: self.n,
            fs: self.fs,
            norm: Normalization { in_mean, in_std, out_mean, out_std },
        }
    }
}

pub fn build_windows(series: &TimeSeries, channel: &str, n: usize) -> Result<WindowedDataset> {
    WindowedDataset::from_values(series.channel(channel)?, n, series.fs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArModel {
    pub coeffs: Vec<f64>,
    pub fs: f64,
    pub residual_rms: f64,
}

impl ArModel {
    pub fn new(coeffs: Vec<f64>, fs: f64) -> Self {
        Self { coeffs, fs, residual_rms: 0.0 }
    }

    pub fn order(&self) -> usize {
        self.coeffs.len()
    }
}

/// Ridge-regularized least squares through a QR factorization of the
/// augmented system `[X; √λ·I]·a ≈ [y; 0]`.
pub fn fit_ar(data: &WindowedDataset, ridge: f64) -> Result<ArModel> {
    let (rows, n) = data.inputs.shape();
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(ShmError::invalid("ridge must be finite and >= 0"));
    }
    if rows < n {
        return Err(ShmError::invalid(format!("{rows} windows cannot determine {n} coefficients")));
    }
    let mut a = DMatrix::zeros(rows + n, n);
    a.rows_mut(0, rows).copy_from(&data.inputs);
    let mut b = DVector::zeros(rows + n);
    b.rows_mut(0, rows).copy_from(&data.targets);
    let sqrt_lambda = ridge.sqrt();
    for j in 0..n {
        a[(rows + j, j)] = sqrt_lambda;
    }

    let qr = a.qr();
    let r = qr.r();
    let max_pivot = r.diagonal().amax();
    if max_pivot == 0.0 {
        return Err(ShmError::numerical("all-zero input windows; use ridge > 0"));
    }
    let min_pivot = r.diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if ridge == 0.0 && min_pivot <= RANK_TOL * max_pivot {
        return Err(ShmError::numerical(format!(
            "rank-deficient regression (pivot ratio {:.1e}); use ridge > 0",
            min_pivot / max_pivot
        )));
    }
    let qtb = qr.q().transpose() * &b;
    let coeffs = r
        .solve_upper_triangular(&qtb)
        .ok_or_else(|| ShmError::numerical("singular triangular factor; use ridge > 0"))?;
    if coeffs.iter().any(|c| !c.is_finite()) {
        return Err(ShmError::numerical("non-finite AR coefficients"));
    }
    let resid = &data.targets - &data.inputs * &coeffs;
    Ok(ArModel {
        coeffs: coeffs.iter().copied().collect(),
        fs: data.fs,
        residual_rms: (resid.norm_squared() / rows as f64).sqrt(),
    })
}

/// Ridge weight `rel · trace(XᵀX)/n`, i.e. relative to the mean input power.
pub fn scaled_ridge(data: &WindowedDataset, rel: f64) -> f64 {
    if rel == 0.0 || data.n == 0 {
        return 0.0;
    }
    rel * data.inputs.norm_squared() / data.n as f64
}

/// Settings for turning one response channel into an AR model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentifySettings {
    /// Model order; `None` picks [`default_ar_order`].
    pub order: Option<usize>,
    /// Ridge weight relative to the mean input power (see [`scaled_ridge`]).
    pub ridge_rel: f64,
    /// Block-averaging factor; `None` applies [`decimation_factor`] to random
    /// responses and leaves free decays at the native rate.
    pub decimation: Option<usize>,
}

impl Default for IdentifySettings {
    fn default() -> Self {
        Self { order: None, ridge_rel: 0.0, decimation: None }
    }
}

/// Fit an AR model to one channel for modal identification.
///
/// Random responses are block-averaged down to about `4·f_max` first and
/// unstable roots of the fit are reflected inside the unit circle. Free
/// decays are fitted at the native rate as they are.
pub fn identify_ar(
    values: &[f64],
    fs: f64,
    kind: ExcitationKind,
    n_modes: usize,
    f_max: f64,
    settings: &IdentifySettings,
) -> Result<ArModel> {
    if !(settings.ridge_rel >= 0.0 && settings.ridge_rel.is_finite()) {
        return Err(ShmError::invalid("ridge_rel must be finite and >= 0"));
    }
    let order = settings.order.unwrap_or_else(|| default_ar_order(kind, n_modes));
    if order < 2 {
        return Err(ShmError::invalid("identification order must be >= 2"));
    }
    let factor = match (settings.decimation, kind) {
        (Some(0), _) => return Err(ShmError::invalid("decimation factor must be >= 1")),
        (Some(d), _) => d,
        (None, ExcitationKind::Random) => decimation_factor(fs, f_max),
        (None, ExcitationKind::Pluck) => 1,
    };
    let reduced = decimate(values, factor);
    let data = WindowedDataset::from_values(&reduced, order, fs / factor as f64)?;
    let model = fit_ar(&data, scaled_ridge(&data, settings.ridge_rel))?;
    match kind {
        ExcitationKind::Random => stabilize(&model),
        ExcitationKind::Pluck => Ok(model),
    }
}

/// Reflect roots outside the unit circle to `1/z̄` and rebuild the coefficients.
///
/// Returns the model unchanged when every root already lies inside.
pub fn stabilize(model: &ArModel) -> Result<ArModel> {
    let roots = characteristic_roots(&model.coeffs)?;
    if roots.iter().all(|z| z.norm() <= 1.0) {
        return Ok(model.clone());
    }
    let reflected: Vec<Complex64> = roots
        .into_iter()
        .map(|z| if z.norm() > 1.0 { 1.0 / z.conj() } else { z })
        .collect();
    Ok(ArModel { coeffs: ar_from_poles(&reflected), ..model.clone() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub net: Network,
    pub norm: Normalization,
    pub fs: f64,
}

impl MlpModel {
    pub fn window(&self) -> usize {
        self.net.input_dim()
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.net.layer_sizes
    }
}

/// Glorot-initialized predictor. `layer_sizes` must end in a single output.
pub fn init_mlp(layer_sizes: &[usize], seed: u64) -> Result<MlpModel> {
    if layer_sizes.last() != Some(&1) {
        return Err(ShmError::invalid("predictor output layer must have one node"));
    }
    let net = Network::init(layer_sizes, seed)?;
    Ok(MlpModel { norm: Normalization::identity(layer_sizes[0]), net, fs: 0.0 })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predictor {
    Ar(ArModel),
    Mlp(MlpModel),
}

impl Predictor {
    pub fn window(&self) -> usize {
        match self {
            Predictor::Ar(m) => m.order(),
            Predictor::Mlp(m) => m.window(),
        }
    }

    pub fn fs(&self) -> f64 {
        match self {
            Predictor::Ar(m) => m.fs,
            Predictor::Mlp(m) => m.fs,
        }
    }
}

fn check_window(window: &[f64], n: usize) -> Result<()> {
    if window.len() != n {
        return Err(ShmError::invalid(format!("window has {} values, model expects {n}", window.len())));
    }
    if window.iter().any(|v| !v.is_finite()) {
        return Err(ShmError::invalid("window contains non-finite values"));
    }
    Ok(())
}

pub fn predict_ar(model: &ArModel, window: &[f64]) -> Result<f64> {
    check_window(window, model.order())?;
    Ok(model.coeffs.iter().zip(window).map(|(a, x)| a * x).sum())
}

pub fn predict_mlp(model: &MlpModel, window: &[f64]) -> Result<f64> {
    check_window(window, model.window())?;
    let z = model.net.forward(&model.norm.standardize_input(window))[0];
    Ok(model.norm.destandardize_output(z))
}

pub fn predict_next(model: &Predictor, window: &[f64]) -> Result<f64> {
    match model {
        Predictor::Ar(m) => predict_ar(m, window),
        Predictor::Mlp(m) => predict_mlp(m, window),
    }
}

/// One-step normalized MSE over a raw series: `mean((x − x̂)²) / var(x)`.
pub fn one_step_nmse(model: &Predictor, values: &[f64]) -> Result<f64> {
    let n = model.window();
    let data = WindowedDataset::from_values(values, n, model.fs())?;
    let mut se = 0.0;
    for r in 0..data.len() {
        let e = data.targets[r] - predict_next(model, &data.row(r))?;
        se += e * e;
    }
    let (_, std) = mean_std(data.targets.iter().copied());
    Ok(se / data.len() as f64 / (std * std))
}

/// Network-space batch: inputs and targets already standardized.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

/// Mean squared error `(1/B)·Σ(ŷ − y)²` and its exact gradient.
pub fn gradients(model: &MlpModel, batch: &Batch) -> Result<(f64, Gradients)> {
    mse_gradients(&model.net, &batch.inputs, &batch.targets)
}

pub(crate) fn mse_gradients(net: &Network, inputs: &[Vec<f64>], targets: &[f64]) -> Result<(f64, Gradients)> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(ShmError::invalid("batch must be nonempty with one target per input"));
    }
    if inputs.iter().any(|x| x.len() != net.input_dim()) {
        return Err(ShmError::invalid("batch input width does not match the network"));
    }
    let scale = 1.0 / inputs.len() as f64;
    let mut grads = Gradients::zeros_like(net);
    let mut loss = 0.0;
    for (x, &y) in inputs.iter().zip(targets) {
        let acts = net.forward_all(x);
        let err = acts.last().expect("output")[0] - y;
        loss += err * err;
        net.backward(&acts, &[2.0 * err * scale], &mut grads);
    }
    Ok((loss * scale, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` disables shuffling (batches in data order).
    pub shuffle_seed: Option<u64>,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self { lr: 1e-3, momentum: 0.9, epochs: 100, batch_size: 32, shuffle_seed: Some(0) }
    }
}

/// Loss ratio over the initial loss that counts as divergence.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

fn standardized_set(model: &MlpModel, data: &WindowedDataset) -> (Vec<Vec<f64>>, Vec<f64>) {
    let inputs = (0..data.len())
        .map(|r| model.norm.standardize_input(&data.row(r)))
        .collect();
    let targets = data.targets.iter().map(|&y| model.norm.standardize_output(y)).collect();
    (inputs, targets)
}

/// Mini-batch momentum SGD on the standardized one-step MSE.
///
/// The dataset's statistics become the model's normalization. The returned
/// history holds the full-dataset MSE after each epoch.
pub fn train_predictor(model: &MlpModel, data: &WindowedDataset, hyper: &TrainHyper) -> Result<(MlpModel, Vec<f64>)> {
    if data.is_empty() {
        return Err(ShmError::invalid("empty training set"));
    }
    if data.n != model.window() {
        return Err(ShmError::invalid(format!(
            "dataset window {} does not match model input {}",
            data.n,
            model.window()
        )));
    }
    if hyper.batch_size == 0 {
        return Err(ShmError::invalid("batch_size must be positive"));
    }
    let mut model = MlpModel { norm: data.norm.clone(), fs: data.fs, ..model.clone() };
    let (inputs, targets) = standardized_set(&model, data);
    let initial = mse_gradients(&model.net, &inputs, &targets)?.0;
    let mut opt = Momentum::new(&model.net, hyper.lr, hyper.momentum);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        if let Some(seed) = hyper.shuffle_seed {
            order.shuffle(&mut rng(derive_seed(seed, epoch as u64)));
        }
        for chunk in order.chunks(hyper.batch_size) {
            let bx: Vec<Vec<f64>> = chunk.iter().map(|&i| inputs[i].clone()).collect();
            let by: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
            let (_, g) = mse_gradients(&model.net, &bx, &by)?;
            opt.step(&mut model.net, &g);
        }
        let loss = mse_gradients(&model.net, &inputs, &targets)?.0;
        if !loss.is_finite() || loss > DIVERGENCE_FACTOR * initial.max(f64::MIN_POSITIVE) {
            return Err(ShmError::TrainingDiverged { epoch: epoch + 1, loss });
        }
        history.push(loss);
    }
    Ok((model, history))
}

/// One stochastic step on the single pair `window → new_sample`.
///
/// AR models take a normalized-LMS step `a += lr·e·w / (ε + ‖w‖²)`;
/// MLPs take a plain gradient step on the standardized squared error.
pub fn online_update(model: &Predictor, new_sample: f64, window: &[f64], lr: f64) -> Result<Predictor> {
    if !new_sample.is_finite() {
        return Err(ShmError::invalid("non-finite sample"));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(ShmError::invalid("online learning rate must be positive"));
    }
    match model {
        Predictor::Ar(ar) => {
            let err = new_sample - predict_ar(ar, window)?;
            let power: f64 = window.iter().map(|x| x * x).sum();
            let step = lr * err / (NLMS_EPS + power);
            let mut next = ar.clone();
            for (a, x) in next.coeffs.iter_mut().zip(window) {
                *a += step * x;
            }
            Ok(Predictor::Ar(next))
        }
        Predictor::Mlp(mlp) => {
            check_window(window, mlp.window())?;
            let x = mlp.norm.standardize_input(window);
            let y = mlp.norm.standardize_output(new_sample);
            let (_, g) = mse_gradients(&mlp.net, &[x], &[y])?;
            let mut next = mlp.clone();
            for (p, gi) in next.net.params_mut().zip(g.iter()) {
                *p -= lr * gi;
            }
            Ok(Predictor::Mlp(next))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeEstimate {
    pub freq_hz: f64,
    pub zeta: f64,
    pub pole: Complex64,
}

fn horner(coeffs: &[f64], z: Complex64) -> (Complex64, Complex64) {
    // monic p(z) = zⁿ − a₁zⁿ⁻¹ − … − aₙ and p'(z)
    let mut p = Complex64::new(1.0, 0.0);
    let mut dp = Complex64::new(0.0, 0.0);
    for &a in coeffs {
        dp = dp * z + p;
        p = p * z - a;
    }
    (p, dp)
}

/// All roots of the AR characteristic polynomial.
///
/// Companion-matrix eigenvalues, each polished by Newton steps on the
/// polynomial itself.
pub fn characteristic_roots(coeffs: &[f64]) -> Result<Vec<Complex64>> {
    let n = coeffs.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut companion = DMatrix::<f64>::zeros(n, n);
    for (j, &a) in coeffs.iter().enumerate() {
        companion[(0, j)] = a;
    }
    for i in 1..n {
        companion[(i, i - 1)] = 1.0;
    }
    let eig = companion.complex_eigenvalues();
    let scale = coeffs.iter().fold(1.0f64, |m, a| m.max(a.abs()));
    let mut roots = Vec::with_capacity(n);
    for &z0 in eig.iter() {
        if !(z0.re.is_finite() && z0.im.is_finite()) {
            return Err(ShmError::numerical("companion eigen-solve failed"));
        }
        let mut z = z0;
        let mut best = (horner(coeffs, z).0.norm(), z);
        for _ in 0..30 {
            let (p, dp) = horner(coeffs, z);
            if dp.norm() == 0.0 {
                break;
            }
            z -= p / dp;
            let r = horner(coeffs, z).0.norm();
            if r < best.0 {
                best = (r, z);
            }
            if r <= 1e-15 * scale {
                break;
            }
        }
        if best.0 > 1e-8 * scale {
            return Err(ShmError::numerical(format!(
                "root {:.6}{:+.6}i residual {:.2e} above tolerance",
                best.1.re, best.1.im, best.0
            )));
        }
        roots.push(best.1);
    }
    Ok(roots)
}

/// Natural frequency (Hz) and damping of a discrete pole `z = e^{sΔt}`.
pub fn pole_to_mode(z: Complex64, fs: f64) -> (f64, f64) {
    let s = z.ln();
    let mag = s.norm();
    (mag * fs / (2.0 * std::f64::consts::PI), -s.re / mag)
}

/// Discrete pole of a mode with natural frequency `freq_hz` and damping `zeta`.
pub fn mode_to_pole(freq_hz: f64, zeta: f64, fs: f64) -> Complex64 {
    let w = 2.0 * std::f64::consts::PI * freq_hz;
    let s = Complex64::new(-zeta * w, w * (1.0 - zeta * zeta).sqrt());
    (s / fs).exp()
}

/// AR coefficients whose characteristic roots are exactly `poles` (conjugates included by the caller).
pub fn ar_from_poles(poles: &[Complex64]) -> Vec<f64> {
    let mut poly = vec![Complex64::new(1.0, 0.0)];
    for &p in poles {
        let mut next = vec![Complex64::new(0.0, 0.0); poly.len() + 1];
        for (i, &c) in poly.iter().enumerate() {
            next[i] += c;
            next[i + 1] -= c * p;
        }
        poly = next;
    }
    poly[1..].iter().map(|c| -c.re).collect()
}

pub fn pole_accepted(z: Complex64, fs: f64) -> bool {
    let r = z.norm();
    if !(z.im > 0.0 && r > ROOT_MIN_RADIUS && r < ROOT_MAX_RADIUS) {
        return false;
    }
    let (f, zeta) = pole_to_mode(z, fs);
    f > 0.0 && zeta < MAX_POLE_DAMPING
}

/// Modes of an AR model: accepted upper-half-plane roots, ascending in frequency.
pub fn extract_modes(model: &ArModel) -> Result<Vec<ModeEstimate>> {
    if model.order() < 2 {
        return Err(ShmError::invalid("mode extraction needs AR order >= 2"));
    }
    if !(model.fs > 0.0) {
        return Err(ShmError::invalid("AR model has no sample rate"));
    }
    let mut modes: Vec<ModeEstimate> = characteristic_roots(&model.coeffs)?
        .into_iter()
        .filter(|&z| pole_accepted(z, model.fs))
        .map(|z| {
            let (freq_hz, zeta) = pole_to_mode(z, model.fs);
            ModeEstimate { freq_hz, zeta, pole: z }
        })
        .collect();
    modes.sort_by(|a, b| a.freq_hz.total_cmp(&b.freq_hz));
    Ok(modes)
}
