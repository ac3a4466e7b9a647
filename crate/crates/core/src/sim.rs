//! Transient response of the beam in modal coordinates.
//!
//! Each retained mode is a damped SDOF oscillator driven by the projected
//! force. Forces are held constant between samples (zero-order hold), and
//! the oscillator is advanced with the exact state-transition matrix, so the
//! only approximation is modal truncation.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ShmError};
use crate::fem::{theta_dof, w_dof, FemModel, ModalData};
use crate::seeds::{derive_seed, rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExcitationKind {
    Random,
    Pluck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExcitationSpec {
    pub kind: ExcitationKind,
    /// 1-based node; `None` means the tip.
    #[serde(default)]
    pub node: Option<usize>,
    /// Force standard deviation (random) or initial deflection at `node` (pluck).
    pub amplitude: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ExcitationSpec {
    fn default() -> Self {
        Self {
            kind: ExcitationKind::Random,
            node: None,
            amplitude: 1.0,
            seed: 0,
        }
    }
}

impl ExcitationSpec {
    pub fn pluck(amplitude: f64) -> Self {
        Self { kind: ExcitationKind::Pluck, node: None, amplitude, seed: 0 }
    }

    pub fn random(amplitude: f64, seed: u64) -> Self {
        Self { kind: ExcitationKind::Random, node: None, amplitude, seed }
    }
}

/// Sampled point forces plus an optional initial static deflection.
#[derive(Debug, Clone)]
pub struct ForceSeries {
    pub fs: f64,
    pub n_samples: usize,
    /// `(node, samples)`; each sample is held for one step.
    pub point_forces: Vec<(usize, Vec<f64>)>,
    /// Initial displacement over the free DOFs.
    pub initial_displacement: Option<DVector<f64>>,
    /// `M·u₀`, used to project the initial state onto the modes.
    pub initial_mass_weighted: Option<DVector<f64>>,
}

impl ForceSeries {
    /// Superpose several excitations sampled on the same grid.
    pub fn sum(parts: &[ForceSeries]) -> Result<ForceSeries> {
        let first = parts
            .first()
            .ok_or_else(|| ShmError::invalid("no excitations to combine"))?;
        let mut out = ForceSeries {
            fs: first.fs,
            n_samples: first.n_samples,
            point_forces: Vec::new(),
            initial_displacement: None,
            initial_mass_weighted: None,
        };
        for p in parts {
            if p.fs != out.fs || p.n_samples != out.n_samples {
                return Err(ShmError::invalid("excitations sampled on different grids"));
            }
            out.point_forces.extend(p.point_forces.iter().cloned());
            for (dst, src) in [
                (&mut out.initial_displacement, &p.initial_displacement),
                (&mut out.initial_mass_weighted, &p.initial_mass_weighted),
            ] {
                if let Some(v) = src {
                    *dst = Some(match dst.take() {
                        Some(acc) => acc + v,
                        None => v.clone(),
                    });
                }
            }
        }
        Ok(out)
    }
}

fn n_samples_for(fs: f64, duration: f64) -> Result<usize> {
    if !(fs > 0.0 && fs.is_finite()) {
        return Err(ShmError::invalid("sample rate must be positive"));
    }
    let n = (fs * duration).round();
    if !(n >= 1.0) {
        return Err(ShmError::invalid("duration·fs must be at least 1"));
    }
    Ok(n as usize)
}

fn check_node(node: usize, n_elements: usize) -> Result<()> {
    if node < 2 || node > n_elements + 1 {
        return Err(ShmError::invalid(format!(
            "node {node} outside the free nodes 2..={}",
            n_elements + 1
        )));
    }
    Ok(())
}

pub fn make_excitation(
    spec: &ExcitationSpec,
    model: &FemModel,
    fs: f64,
    duration: f64,
) -> Result<ForceSeries> {
    let n_samples = n_samples_for(fs, duration)?;
    if !(spec.amplitude > 0.0 && spec.amplitude.is_finite()) {
        return Err(ShmError::invalid("excitation amplitude must be positive"));
    }
    let n_el = model.config.n_elements;
    let node = spec.node.unwrap_or(n_el + 1);
    check_node(node, n_el)?;
    let dof = w_dof(node).expect("checked free node");

    match spec.kind {
        ExcitationKind::Random => {
            let mut r = rng(spec.seed);
            let samples: Vec<f64> = (0..n_samples)
                .map(|_| spec.amplitude * r.sample::<f64, _>(StandardNormal))
                .collect();
            Ok(ForceSeries {
                fs,
                n_samples,
                point_forces: vec![(node, samples)],
                initial_displacement: None,
                initial_mass_weighted: None,
            })
        }
        ExcitationKind::Pluck => {
            let chol = model
                .stiffness
                .clone()
                .cholesky()
                .ok_or_else(|| ShmError::numerical("stiffness matrix is not positive definite"))?;
            let mut load = DVector::zeros(model.stiffness.nrows());
            load[dof] = 1.0;
            let shape = chol.solve(&load);
            let u0 = &shape * (spec.amplitude / shape[dof]);
            let mu0 = &model.mass * &u0;
            Ok(ForceSeries {
                fs,
                n_samples,
                point_forces: Vec::new(),
                initial_displacement: Some(u0),
                initial_mass_weighted: Some(mu0),
            })
        }
    }
}

/// Exact one-step propagator of `q̈ + 2ζωq̇ + ω²q = f` under a held force.
///
/// `[q, q̇]ₖ₊₁ = A·[q, q̇]ₖ + b·fₖ` with `A = exp(F·Δt)` for the companion
/// matrix `F = [[0, 1], [−ω², −2ζω]]` and `b = F⁻¹(A − I)·[0, 1]ᵀ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdofPropagator {
    pub a: [[f64; 2]; 2],
    pub b: [f64; 2],
}

impl SdofPropagator {
    pub fn new(omega: f64, zeta: f64, dt: f64) -> Result<Self> {
        if !(omega > 0.0 && omega.is_finite()) {
            return Err(ShmError::numerical(format!("singular oscillator, ω = {omega}")));
        }
        if !(0.0..1.0).contains(&zeta) {
            return Err(ShmError::invalid("damping ratio must lie in [0, 1)"));
        }
        let wd = omega * (1.0 - zeta * zeta).sqrt();
        let decay = (-zeta * omega * dt).exp();
        let (s, c) = (wd * dt).sin_cos();
        let zw = zeta * omega / wd;
        let a = [
            [decay * (c + zw * s), decay * s / wd],
            [-decay * omega * omega / wd * s, decay * (c - zw * s)],
        ];
        let b0 = if omega * dt < 1.0 {
            impulse_integral_series(omega, zeta, dt)
        } else {
            (1.0 - a[0][0]) / (omega * omega)
        };
        Ok(Self { a, b: [b0, a[0][1]] })
    }

    #[inline]
    pub fn step(&self, state: [f64; 2], force: f64) -> [f64; 2] {
        [
            self.a[0][0] * state[0] + self.a[0][1] * state[1] + self.b[0] * force,
            self.a[1][0] * state[0] + self.a[1][1] * state[1] + self.b[1] * force,
        ]
    }
}

/// `∫₀^h g(s) ds` for the impulse response `g` (`g(0) = 0`, `g'(0) = 1`).
///
/// The closed form `(1 − A₀₀)/ω²` loses digits to cancellation when `ωh` is
/// small, so the Taylor series of `g` is integrated term by term instead.
fn impulse_integral_series(omega: f64, zeta: f64, h: f64) -> f64 {
    let (c1, c0) = (2.0 * zeta * omega, omega * omega);
    // derivatives of g at 0: d[k+2] = −2ζω·d[k+1] − ω²·d[k]
    let (mut d_prev, mut d_cur) = (0.0_f64, 1.0_f64);
    // term k = d_k·h^(k+1)/(k+1)!
    let mut pow = h * h / 2.0;
    let mut sum = d_cur * pow;
    for k in 2..80 {
        let d_next = -c1 * d_cur - c0 * d_prev;
        d_prev = d_cur;
        d_cur = d_next;
        pow *= h / (k + 1) as f64;
        let term = d_cur * pow;
        sum += term;
        if term.abs() <= 1e-18 * sum.abs() && k > 4 {
            break;
        }
    }
    sum
}

/// Modal displacement and velocity at every sample instant (`n_samples × n_modes`).
#[derive(Debug, Clone)]
pub struct ModalTrajectory {
    pub q: DMatrix<f64>,
    pub qdot: DMatrix<f64>,
}

impl ModalTrajectory {
    /// Total modal energy `Σ ½(q̇ᵢ² + ωᵢ²qᵢ²)` at sample `k`.
    pub fn energy(&self, modal: &ModalData, k: usize) -> f64 {
        modal
            .omegas
            .iter()
            .enumerate()
            .map(|(i, w)| 0.5 * (self.qdot[(k, i)].powi(2) + (w * self.q[(k, i)]).powi(2)))
            .sum()
    }
}

pub fn propagate_modal(modal: &ModalData, force: &ForceSeries) -> Result<ModalTrajectory> {
    let q0: Vec<f64> = (0..modal.n_modes())
        .map(|i| {
            force
                .initial_mass_weighted
                .as_ref()
                .map_or(0.0, |mu| modal.shapes.column(i).dot(mu))
        })
        .collect();
    let qdot0 = vec![0.0; modal.n_modes()];
    propagate_modal_from(modal, force, &q0, &qdot0)
}

/// Like [`propagate_modal`] but from an explicit modal state; the force's
/// initial deflection is ignored.
pub fn propagate_modal_from(
    modal: &ModalData,
    force: &ForceSeries,
    q0: &[f64],
    qdot0: &[f64],
) -> Result<ModalTrajectory> {
    let n_modes = modal.n_modes();
    if q0.len() != n_modes || qdot0.len() != n_modes {
        return Err(ShmError::invalid("initial modal state does not match the mode count"));
    }
    let n = force.n_samples;
    let dt = 1.0 / force.fs;
    let props = modal
        .omegas
        .iter()
        .zip(&modal.zetas)
        .map(|(&w, &z)| SdofPropagator::new(w, z, dt))
        .collect::<Result<Vec<_>>>()?;

    let mut modal_force = DMatrix::<f64>::zeros(n, n_modes);
    for (node, samples) in &force.point_forces {
        check_node(*node, modal.n_elements)?;
        if samples.len() != n {
            return Err(ShmError::invalid("force series length mismatch"));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(ShmError::invalid("force series contains non-finite values"));
        }
        let dof = w_dof(*node).expect("checked free node");
        for i in 0..n_modes {
            let phi = modal.shapes[(dof, i)];
            for (k, f) in samples.iter().enumerate() {
                modal_force[(k, i)] += phi * f;
            }
        }
    }

    let mut q = DMatrix::zeros(n, n_modes);
    let mut qdot = DMatrix::zeros(n, n_modes);
    for (i, prop) in props.iter().enumerate() {
        let mut state = [q0[i], qdot0[i]];
        for k in 0..n {
            q[(k, i)] = state[0];
            qdot[(k, i)] = state[1];
            state = prop.step(state, modal_force[(k, i)]);
        }
    }
    Ok(ModalTrajectory { q, qdot })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensorKind {
    Displacement,
    Strain,
}

pub const DEFAULT_GAUGE_OFFSET: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    pub kind: SensorKind,
    /// 1-based node (displacement) or element (strain).
    pub location: usize,
    #[serde(default = "default_gauge_offset")]
    pub gauge_offset: f64,
    #[serde(default)]
    pub noise_sigma: f64,
}

fn default_gauge_offset() -> f64 {
    DEFAULT_GAUGE_OFFSET
}

impl SensorSpec {
    pub fn displacement(node: usize) -> Self {
        Self {
            kind: SensorKind::Displacement,
            location: node,
            gauge_offset: DEFAULT_GAUGE_OFFSET,
            noise_sigma: 0.0,
        }
    }

    pub fn strain(element: usize) -> Self {
        Self {
            kind: SensorKind::Strain,
            location: element,
            gauge_offset: DEFAULT_GAUGE_OFFSET,
            noise_sigma: 0.0,
        }
    }

    pub fn channel_name(&self) -> String {
        match self.kind {
            SensorKind::Displacement => format!("disp_n{}", self.location),
            SensorKind::Strain => format!("strain_e{}", self.location),
        }
    }

    pub fn validate(&self, n_elements: usize) -> Result<()> {
        match self.kind {
            SensorKind::Displacement if self.location < 1 || self.location > n_elements + 1 => {
                Err(ShmError::invalid(format!("displacement node {} outside mesh", self.location)))
            }
            SensorKind::Strain if self.location < 1 || self.location > n_elements => {
                Err(ShmError::invalid(format!("strain element {} outside mesh", self.location)))
            }
            SensorKind::Strain if !(self.gauge_offset > 0.0) => {
                Err(ShmError::invalid("strain gauge offset must be positive"))
            }
            _ if !(self.noise_sigma >= 0.0) => Err(ShmError::invalid("noise sigma must be >= 0")),
            _ => Ok(()),
        }
    }

    /// Linear map from modal coordinates to this sensor's reading.
    fn modal_gains(&self, modal: &ModalData) -> Result<Vec<f64>> {
        self.validate(modal.n_elements)?;
        let n = modal.n_modes();
        let dof_value = |dof: Option<usize>, i: usize| dof.map_or(0.0, |d| modal.shapes[(d, i)]);
        Ok(match self.kind {
            SensorKind::Displacement => (0..n).map(|i| dof_value(w_dof(self.location), i)).collect(),
            SensorKind::Strain => {
                // Hermite second derivatives at the element midpoint reduce to (θ₂ − θ₁)/l
                let (a, b) = (self.location, self.location + 1);
                (0..n)
                    .map(|i| {
                        let curvature = (dof_value(theta_dof(b), i) - dof_value(theta_dof(a), i))
                            / modal.element_length;
                        -self.gauge_offset * curvature
                    })
                    .collect()
            }
        })
    }
}

/// Read one sensor for a single modal state `q`.
pub fn sensor_readout(modal: &ModalData, q: &[f64], sensor: &SensorSpec) -> Result<f64> {
    if q.len() != modal.n_modes() {
        return Err(ShmError::invalid("modal state length mismatch"));
    }
    let gains = sensor.modal_gains(modal)?;
    Ok(gains.iter().zip(q).map(|(g, x)| g * x).sum())
}

/// Read one sensor from a full free-DOF displacement vector.
pub fn sensor_from_dofs(u: &DVector<f64>, element_length: f64, n_elements: usize, sensor: &SensorSpec) -> Result<f64> {
    sensor.validate(n_elements)?;
    let get = |dof: Option<usize>| dof.map_or(0.0, |d| u[d]);
    Ok(match sensor.kind {
        SensorKind::Displacement => get(w_dof(sensor.location)),
        SensorKind::Strain => {
            let curvature = (get(theta_dof(sensor.location + 1)) - get(theta_dof(sensor.location))) / element_length;
            -sensor.gauge_offset * curvature
        }
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SeriesMeta {
    pub case_id: Option<usize>,
    pub seed: u64,
    pub sensors: Vec<SensorSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub name: String,
    pub values: Vec<f64>,
}

/// Uniformly sampled multi-channel record.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub fs: f64,
    pub channels: Vec<Channel>,
    pub meta: SeriesMeta,
}

impl TimeSeries {
    pub fn new(fs: f64, channels: Vec<Channel>, meta: SeriesMeta) -> Result<Self> {
        let ts = Self { fs, channels, meta };
        ts.validate()?;
        Ok(ts)
    }

    /// Single unnamed-channel convenience constructor.
    pub fn from_values(fs: f64, name: &str, values: Vec<f64>) -> Result<Self> {
        Self::new(fs, vec![Channel { name: name.to_string(), values }], SeriesMeta::default())
    }

    pub fn n_samples(&self) -> usize {
        self.channels.first().map_or(0, |c| c.values.len())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return Err(ShmError::invalid("sample rate must be positive"));
        }
        let n = self.n_samples();
        for c in &self.channels {
            if c.values.len() != n {
                return Err(ShmError::invalid(format!("channel {} has a different length", c.name)));
            }
            if c.values.iter().any(|v| !v.is_finite()) {
                return Err(ShmError::invalid(format!("channel {} has non-finite values", c.name)));
            }
        }
        Ok(())
    }

    pub fn channel(&self, name: &str) -> Result<&[f64]> {
        self.channels
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.values.as_slice())
            .ok_or_else(|| ShmError::invalid(format!("no channel named {name}")))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# fs={}", self.fs);
        if let Some(id) = self.meta.case_id {
            let _ = writeln!(out, "# case_id={id}");
        }
        let _ = writeln!(out, "# seed={}", self.meta.seed);
        for s in &self.meta.sensors {
            let _ = writeln!(
                out,
                "# sensor={}",
                serde_json::to_string(s).expect("sensor spec serializes")
            );
        }
        out.push('t');
        for c in &self.channels {
            out.push(',');
            out.push_str(&c.name);
        }
        out.push('\n');
        for k in 0..self.n_samples() {
            let _ = write!(out, "{:.12e}", k as f64 / self.fs);
            for c in &self.channels {
                let _ = write!(out, ",{:e}", c.values[k]);
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, origin: &str) -> Result<Self> {
        let bad = |detail: String| ShmError::Malformed { path: origin.to_string(), detail };
        let mut fs = None;
        let mut meta = SeriesMeta::default();
        let mut lines = text.lines().enumerate();
        let header = loop {
            let Some((_, line)) = lines.next() else {
                return Err(bad("missing header line".into()));
            };
            let Some(comment) = line.strip_prefix('#') else { break line };
            let comment = comment.trim();
            if let Some(v) = comment.strip_prefix("fs=") {
                fs = Some(v.parse::<f64>().map_err(|e| bad(format!("fs: {e}")))?);
            } else if let Some(v) = comment.strip_prefix("case_id=") {
                meta.case_id = Some(v.parse().map_err(|e| bad(format!("case_id: {e}")))?);
            } else if let Some(v) = comment.strip_prefix("seed=") {
                meta.seed = v.parse().map_err(|e| bad(format!("seed: {e}")))?;
            } else if let Some(v) = comment.strip_prefix("sensor=") {
                meta.sensors.push(serde_json::from_str(v).map_err(|e| bad(format!("sensor: {e}")))?);
            }
        };
        let fs = fs.ok_or_else(|| bad("missing `# fs=` metadata line".into()))?;
        let mut names = header.split(',');
        if names.next() != Some("t") {
            return Err(bad("header must start with `t`".into()));
        }
        let mut channels: Vec<Channel> = names
            .map(|n| Channel { name: n.to_string(), values: Vec::new() })
            .collect();
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            fields.next();
            let mut count = 0;
            for (c, field) in channels.iter_mut().zip(fields.by_ref()) {
                c.values.push(
                    field
                        .trim()
                        .parse()
                        .map_err(|e| bad(format!("line {}: {e}", lineno + 1)))?,
                );
                count += 1;
            }
            if count != channels.len() || fields.next().is_some() {
                return Err(bad(format!("line {}: wrong field count", lineno + 1)));
            }
        }
        TimeSeries::new(fs, channels, meta).map_err(|e| bad(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| ShmError::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ShmError::io(path, e))?;
        Self::from_csv(&text, &path.display().to_string())
    }
}

/// Simulate the sensor channels for `duration` seconds at `fs`.
///
/// Channel `c` gets noise with seed `derive_seed(derive_seed(meta.seed, case_id), c)`.
pub fn simulate_response(
    modal: &ModalData,
    force: &ForceSeries,
    sensors: &[SensorSpec],
    fs: f64,
    duration: f64,
    meta: SeriesMeta,
) -> Result<TimeSeries> {
    let n = n_samples_for(fs, duration)?;
    if force.n_samples != n || force.fs != fs {
        return Err(ShmError::invalid(format!(
            "force series ({} samples at {} Hz) does not match {n} samples at {fs} Hz",
            force.n_samples, force.fs
        )));
    }
    if sensors.is_empty() {
        return Err(ShmError::invalid("at least one sensor is required"));
    }
    let gains = sensors
        .iter()
        .map(|s| s.modal_gains(modal))
        .collect::<Result<Vec<_>>>()?;
    let traj = propagate_modal(modal, force)?;
    let case_seed = derive_seed(meta.seed, meta.case_id.unwrap_or(0) as u64);

    let channels = sensors
        .iter()
        .zip(&gains)
        .enumerate()
        .map(|(c, (sensor, g))| {
            let gv = DVector::from_column_slice(g);
            let mut values: Vec<f64> = (&traj.q * gv).iter().copied().collect();
            if sensor.noise_sigma > 0.0 {
                add_noise_in_place(&mut values, sensor.noise_sigma, derive_seed(case_seed, c as u64));
            }
            Channel { name: sensor.channel_name(), values }
        })
        .collect();
    TimeSeries::new(fs, channels, SeriesMeta { sensors: sensors.to_vec(), ..meta })
}

/// Response of a structure whose modes change from `before` to `after` at
/// sample `switch`, with continuous displacement and velocity.
///
/// The physical state at the switch is projected onto the new modes through
/// `mass`. The force record runs uninterrupted across the switch; only a
/// free decay's initial deflection applies, at sample 0.
#[allow(clippy::too_many_arguments)]
pub fn simulate_transition(
    before: &ModalData,
    after: &ModalData,
    mass: &DMatrix<f64>,
    force: &ForceSeries,
    sensors: &[SensorSpec],
    fs: f64,
    duration: f64,
    switch: usize,
    meta: SeriesMeta,
) -> Result<TimeSeries> {
    let n = n_samples_for(fs, duration)?;
    if force.n_samples != n || force.fs != fs {
        return Err(ShmError::invalid("force series does not match the sampling grid"));
    }
    if switch == 0 || switch >= n {
        return Err(ShmError::invalid(format!("switch sample {switch} must lie in 1..{n}")));
    }
    if sensors.is_empty() {
        return Err(ShmError::invalid("at least one sensor is required"));
    }
    if before.n_modes() != after.n_modes() || before.shapes.nrows() != mass.nrows() || after.shapes.nrows() != mass.nrows() {
        return Err(ShmError::invalid("mode sets and mass matrix disagree in size"));
    }
    let head = ForceSeries {
        n_samples: switch + 1,
        point_forces: force.point_forces.iter().map(|(nd, v)| (*nd, v[..=switch].to_vec())).collect(),
        ..force.clone()
    };
    let tail = ForceSeries {
        n_samples: n - switch,
        point_forces: force.point_forces.iter().map(|(nd, v)| (*nd, v[switch..].to_vec())).collect(),
        initial_displacement: None,
        initial_mass_weighted: None,
        ..force.clone()
    };
    let first = propagate_modal(before, &head)?;
    let u = &before.shapes * first.q.row(switch).transpose();
    let v = &before.shapes * first.qdot.row(switch).transpose();
    let project = |x: &DVector<f64>| -> Vec<f64> { (after.shapes.transpose() * (mass * x)).iter().copied().collect() };
    let second = propagate_modal_from(after, &tail, &project(&u), &project(&v))?;

    let case_seed = derive_seed(meta.seed, meta.case_id.unwrap_or(0) as u64);
    let mut channels = Vec::with_capacity(sensors.len());
    for (c, sensor) in sensors.iter().enumerate() {
        let ga = DVector::from_column_slice(&sensor.modal_gains(before)?);
        let gb = DVector::from_column_slice(&sensor.modal_gains(after)?);
        let mut values: Vec<f64> = (&first.q * ga).iter().take(switch).copied().collect();
        values.extend((&second.q * gb).iter().copied());
        if sensor.noise_sigma > 0.0 {
            add_noise_in_place(&mut values, sensor.noise_sigma, derive_seed(case_seed, c as u64));
        }
        channels.push(Channel { name: sensor.channel_name(), values });
    }
    TimeSeries::new(fs, channels, SeriesMeta { sensors: sensors.to_vec(), ..meta })
}

fn add_noise_in_place(values: &mut [f64], sigma: f64, seed: u64) {
    let mut r = rng(seed);
    for v in values {
        *v += sigma * r.sample::<f64, _>(StandardNormal);
    }
}

/// Add i.i.d. Gaussian noise to every channel; channel `c` uses `derive_seed(seed, c)`.
pub fn add_noise(series: &TimeSeries, sigma: f64, seed: u64) -> Result<TimeSeries> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(ShmError::invalid("noise sigma must be >= 0"));
    }
    let mut out = series.clone();
    if sigma > 0.0 {
        for (c, ch) in out.channels.iter_mut().enumerate() {
            add_noise_in_place(&mut ch.values, sigma, derive_seed(seed, c as u64));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{pristine_model, solve_modes, BeamConfig};

    fn pristine(n_modes: usize, zeta: f64) -> (FemModel, ModalData) {
        let model = pristine_model(&BeamConfig::default()).unwrap();
        let modal = solve_modes(&model, n_modes, zeta).unwrap();
        (model, modal)
    }

    fn std_dev(v: &[f64]) -> f64 {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
    }

    #[test]
    fn random_excitation_is_seeded() {
        let (model, _) = pristine(4, 0.0);
        let spec = ExcitationSpec::random(1.0, 42);
        let a = make_excitation(&spec, &model, 1000.0, 1.0).unwrap();
        let b = make_excitation(&spec, &model, 1000.0, 1.0).unwrap();
        assert_eq!(a.n_samples, 1000);
        assert_eq!(a.point_forces, b.point_forces);
        let c = make_excitation(&ExcitationSpec::random(1.0, 43), &model, 1000.0, 1.0).unwrap();
        assert_ne!(a.point_forces, c.point_forces);
    }

    #[test]
    fn random_excitation_has_requested_std() {
        let (model, _) = pristine(4, 0.0);
        let f = make_excitation(&ExcitationSpec::random(2.5, 7), &model, 1000.0, 100.0).unwrap();
        let s = std_dev(&f.point_forces[0].1);
        assert!((s - 2.5).abs() / 2.5 < 0.02, "{s}");
    }

    #[test]
    fn pluck_sets_initial_tip_deflection() {
        let (model, _) = pristine(4, 0.0);
        let f = make_excitation(&ExcitationSpec::pluck(0.3), &model, 1000.0, 1.0).unwrap();
        assert!(f.point_forces.is_empty());
        let u0 = f.initial_displacement.unwrap();
        assert!((u0[w_dof(37).unwrap()] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_excitation() {
        let (model, _) = pristine(4, 0.0);
        assert!(make_excitation(&ExcitationSpec::random(0.0, 1), &model, 1000.0, 1.0).is_err());
        let bad_node = ExcitationSpec { node: Some(40), ..ExcitationSpec::random(1.0, 1) };
        assert!(make_excitation(&bad_node, &model, 1000.0, 1.0).is_err());
        assert!(make_excitation(&ExcitationSpec::random(1.0, 1), &model, 1000.0, 0.0).is_err());
    }

    #[test]
    fn propagator_semigroup() {
        for &(w, z) in &[(10.0, 0.0), (62.7, 0.005), (343.9, 0.3), (1.0, 0.95)] {
            let one = SdofPropagator::new(w, z, 1e-3).unwrap();
            let two = SdofPropagator::new(w, z, 2e-3).unwrap();
            // A(Δt)² vs A(2Δt); forcing: b(2Δt) = A(Δt)·b(Δt) + b(Δt)
            for i in 0..2 {
                for j in 0..2 {
                    let sq: f64 = (0..2).map(|k| one.a[i][k] * one.a[k][j]).sum();
                    assert!((sq - two.a[i][j]).abs() <= 1e-12 * two.a[i][j].abs().max(1.0));
                }
                let b2: f64 = (0..2).map(|k| one.a[i][k] * one.b[k]).sum::<f64>() + one.b[i];
                assert!((b2 - two.b[i]).abs() <= 1e-12 * two.b[i].abs().max(1e-300));
            }
        }
    }

    #[test]
    fn zero_omega_is_numerical_error() {
        assert!(matches!(SdofPropagator::new(0.0, 0.0, 1e-3), Err(ShmError::Numerical(_))));
    }

    #[test]
    fn single_mode_pluck_is_a_cosine() {
        let (model, modal) = pristine(1, 0.0);
        let force = make_excitation(&ExcitationSpec::pluck(1.0), &model, 1000.0, 10.0).unwrap();
        let ts = simulate_response(&modal, &force, &[SensorSpec::displacement(37)], 1000.0, 10.0, SeriesMeta::default())
            .unwrap();
        let x = ts.channel("disp_n37").unwrap();
        let amp = x[0];
        assert!(amp > 0.9 && amp <= 1.0);
        let w = modal.omegas[0];
        for (k, v) in x.iter().enumerate() {
            let expect = amp * (w * k as f64 / 1000.0).cos();
            assert!((v - expect).abs() <= 1e-9 * amp, "k={k}: {v} vs {expect}");
        }
    }

    #[test]
    fn undamped_free_vibration_conserves_energy() {
        let (model, modal) = pristine(4, 0.0);
        let force = make_excitation(&ExcitationSpec::pluck(1.0), &model, 1000.0, 10.0).unwrap();
        let traj = propagate_modal(&modal, &force).unwrap();
        let e0 = traj.energy(&modal, 0);
        for k in (0..10_000).step_by(97) {
            assert!((traj.energy(&modal, k) - e0).abs() <= 1e-6 * e0);
        }
    }

    #[test]
    fn response_is_linear_in_force() {
        let (model, modal) = pristine(4, 0.005);
        let f = make_excitation(&ExcitationSpec::random(1.0, 3), &model, 1000.0, 2.0).unwrap();
        let mut f3 = f.clone();
        for v in &mut f3.point_forces[0].1 {
            *v *= 3.0;
        }
        let sensors = [SensorSpec::displacement(37), SensorSpec::strain(1)];
        let a = simulate_response(&modal, &f, &sensors, 1000.0, 2.0, SeriesMeta::default()).unwrap();
        let b = simulate_response(&modal, &f3, &sensors, 1000.0, 2.0, SeriesMeta::default()).unwrap();
        for (ca, cb) in a.channels.iter().zip(&b.channels) {
            let scale = ca.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (x, y) in ca.values.iter().zip(&cb.values) {
                assert!((3.0 * x - y).abs() <= 1e-12 * 3.0 * scale);
            }
        }
    }

    #[test]
    fn nan_force_is_rejected() {
        let (model, modal) = pristine(4, 0.005);
        let mut f = make_excitation(&ExcitationSpec::random(1.0, 3), &model, 1000.0, 1.0).unwrap();
        f.point_forces[0].1[10] = f64::NAN;
        let r = simulate_response(&modal, &f, &[SensorSpec::displacement(37)], 1000.0, 1.0, SeriesMeta::default());
        assert!(matches!(r, Err(ShmError::InvalidInput(_))));
    }

    #[test]
    fn readout_of_zero_state_is_zero() {
        let (_, modal) = pristine(4, 0.0);
        for s in [SensorSpec::displacement(37), SensorSpec::displacement(1), SensorSpec::strain(1), SensorSpec::strain(36)] {
            assert_eq!(sensor_readout(&modal, &[0.0; 4], &s).unwrap(), 0.0);
        }
        assert!(sensor_readout(&modal, &[0.0; 4], &SensorSpec::strain(37)).is_err());
        assert!(sensor_readout(&modal, &[0.0; 4], &SensorSpec::displacement(38)).is_err());
    }

    #[test]
    fn rigid_translation_has_no_strain() {
        let mut u = DVector::zeros(72);
        for node in 2..=37 {
            u[w_dof(node).unwrap()] = 1.0;
        }
        for e in 2..=36 {
            assert_eq!(sensor_from_dofs(&u, 1.0, 36, &SensorSpec::strain(e)).unwrap(), 0.0);
        }
    }

    #[test]
    fn first_mode_strain_is_largest_at_root() {
        let (_, modal) = pristine(4, 0.0);
        let q = [1.0, 0.0, 0.0, 0.0];
        let root = sensor_readout(&modal, &q, &SensorSpec::strain(1)).unwrap();
        let tip = sensor_readout(&modal, &q, &SensorSpec::strain(36)).unwrap();
        assert!(root.abs() > tip.abs());
        // modal readout agrees with reading the reconstructed DOF vector
        let u = modal.shapes.column(0).into_owned();
        let direct = sensor_from_dofs(&u, 1.0, 36, &SensorSpec::strain(1)).unwrap();
        assert!((direct - root).abs() < 1e-15);
    }

    #[test]
    fn noise_behaviour() {
        let zero = TimeSeries::from_values(1000.0, "x", vec![0.0; 100_000]).unwrap();
        assert_eq!(add_noise(&zero, 0.0, 1).unwrap(), zero);
        let a = add_noise(&zero, 0.1, 5).unwrap();
        let b = add_noise(&zero, 0.1, 5).unwrap();
        assert_eq!(a, b);
        let s = std_dev(&a.channels[0].values);
        assert!((s - 0.1).abs() / 0.1 < 0.02, "{s}");
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let (model, modal) = pristine(4, 0.005);
        let f = make_excitation(&ExcitationSpec::random(1.0, 11), &model, 1000.0, 0.5).unwrap();
        let sensors = [SensorSpec::displacement(37), SensorSpec { noise_sigma: 1e-4, ..SensorSpec::strain(2) }];
        let meta = SeriesMeta { case_id: Some(12), seed: 99, sensors: vec![] };
        let ts = simulate_response(&modal, &f, &sensors, 1000.0, 0.5, meta).unwrap();
        let text = ts.to_csv();
        assert!(text.starts_with("# fs=1000\n# case_id=12\n# seed=99\n# sensor="));
        assert!(text.contains("\nt,disp_n37,strain_e2\n"));
        let back = TimeSeries::from_csv(&text, "mem").unwrap();
        assert_eq!(back, ts);
    }

    #[test]
    fn csv_rejects_ragged_rows() {
        let text = "# fs=10\nt,a,b\n0,1,2\n0.1,1\n";
        assert!(matches!(TimeSeries::from_csv(text, "mem"), Err(ShmError::Malformed { .. })));
    }
}
