//! Run configuration: one JSON document describing a whole experiment.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classify::{ClassifierHyper, Pathway};
use crate::error::{Result, ShmError};
use crate::fem::BeamConfig;
use crate::sim::{ExcitationKind, ExcitationSpec, SensorSpec};
use crate::sysid::{IdentifySettings, TrainHyper};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub fs: f64,
    pub duration_s: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { fs: 1000.0, duration_s: 20.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ar,
    Mlp,
}

impl std::str::FromStr for Method {
    type Err = ShmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ar" => Ok(Method::Ar),
            "mlp" => Ok(Method::Mlp),
            _ => Err(ShmError::invalid(format!("unknown method {s:?} (ar|mlp)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SysidConfig {
    pub method: Method,
    /// MLP tapped-delay window; `None` applies the half-period rule.
    pub window: Option<usize>,
    /// AR order; `None` picks the excitation-dependent default.
    pub order: Option<usize>,
    pub ridge_rel: f64,
    pub decimation: Option<usize>,
    pub hidden: Vec<usize>,
    pub train: TrainHyper,
    pub online_lr: f64,
}

impl Default for SysidConfig {
    fn default() -> Self {
        Self {
            method: Method::Ar,
            window: None,
            order: None,
            ridge_rel: 0.0,
            decimation: None,
            hidden: vec![25, 25],
            train: TrainHyper::default(),
            online_lr: 1e-4,
        }
    }
}

impl SysidConfig {
    pub fn identify_settings(&self) -> IdentifySettings {
        IdentifySettings { order: self.order, ridge_rel: self.ridge_rel, decimation: self.decimation }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub pathway: Pathway,
    pub noise_rel: f64,
    pub replicates: usize,
    pub hyper: ClassifierHyper,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { pathway: Pathway::Oracle, noise_rel: 0.005, replicates: 10, hyper: ClassifierHyper::default() }
    }
}

fn default_sensors() -> Vec<SensorSpec> {
    vec![SensorSpec::displacement(37)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub beam: BeamConfig,
    #[serde(default)]
    pub excitation: ExcitationSpec,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default = "default_sensors")]
    pub sensors: Vec<SensorSpec>,
    #[serde(default)]
    pub sysid: SysidConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    pub master_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            beam: BeamConfig::default(),
            excitation: ExcitationSpec::default(),
            sampling: SamplingConfig::default(),
            sensors: default_sensors(),
            sysid: SysidConfig::default(),
            classifier: ClassifierConfig::default(),
            master_seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| ShmError::Malformed { path: origin.to_string(), detail: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ShmError::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.beam.validate()?;
        let s = &self.sampling;
        if !(s.fs > 0.0 && s.fs.is_finite()) {
            return Err(ShmError::invalid("sampling.fs must be positive"));
        }
        if !(s.duration_s > 0.0 && s.duration_s.is_finite() && s.fs * s.duration_s >= 2.0) {
            return Err(ShmError::invalid("sampling.duration_s must cover at least two samples"));
        }
        if !(self.excitation.amplitude > 0.0 && self.excitation.amplitude.is_finite()) {
            return Err(ShmError::invalid("excitation.amplitude must be positive"));
        }
        if let Some(node) = self.excitation.node {
            if node < 2 || node > self.beam.n_elements + 1 {
                return Err(ShmError::invalid(format!("excitation.node {node} is not a free node")));
            }
        }
        if self.sensors.is_empty() {
            return Err(ShmError::invalid("at least one sensor is required"));
        }
        for sensor in &self.sensors {
            sensor.validate(self.beam.n_elements)?;
        }
        let id = &self.sysid;
        if id.window == Some(0) {
            return Err(ShmError::invalid("sysid.window must be >= 1"));
        }
        if matches!(id.order, Some(n) if n < 2) {
            return Err(ShmError::invalid("sysid.order must be >= 2"));
        }
        if !(id.ridge_rel >= 0.0 && id.ridge_rel.is_finite()) {
            return Err(ShmError::invalid("sysid.ridge_rel must be >= 0"));
        }
        if id.decimation == Some(0) {
            return Err(ShmError::invalid("sysid.decimation must be >= 1"));
        }
        if id.hidden.is_empty() || id.hidden.contains(&0) {
            return Err(ShmError::invalid("sysid.hidden needs at least one nonzero layer"));
        }
        if !(id.online_lr > 0.0 && id.online_lr.is_finite()) {
            return Err(ShmError::invalid("sysid.online_lr must be positive"));
        }
        if id.train.batch_size == 0 || !(id.train.lr >= 0.0 && id.train.lr.is_finite()) {
            return Err(ShmError::invalid("sysid.train needs batch_size >= 1 and a finite lr >= 0"));
        }
        let c = &self.classifier;
        if !(c.noise_rel >= 0.0 && c.noise_rel.is_finite()) {
            return Err(ShmError::invalid("classifier.noise_rel must be >= 0"));
        }
        if c.replicates == 0 {
            return Err(ShmError::invalid("classifier.replicates must be >= 1"));
        }
        if c.hyper.hidden == 0 || !(c.hyper.lr >= 0.0 && c.hyper.lr.is_finite()) {
            return Err(ShmError::invalid("classifier.hyper needs hidden >= 1 and a finite lr >= 0"));
        }
        Ok(())
    }

    pub fn excitation_kind(&self) -> ExcitationKind {
        self.excitation.kind
    }
}
