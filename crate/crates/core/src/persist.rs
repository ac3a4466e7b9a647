//! JSON persistence of predictors and classifiers.
//!
//! Every file carries `"format_version": 1` and a `"kind"` of `ar`, `mlp` or
//! `classifier`. Floats are written in shortest round-trip form, so a loaded
//! model reproduces the saved one bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::classify::{ClassifierMeta, ClassifierModel, HEADS, N_FEATURES};
use crate::error::{Result, ShmError};
use crate::network::Network;
use crate::sysid::{ArModel, MlpModel, Normalization, Predictor};

pub const FORMAT_VERSION: i64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum SavedModel {
    Predictor(Predictor),
    Classifier(ClassifierModel),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArFile {
    format_version: i64,
    kind: String,
    fs: f64,
    window: usize,
    coeffs: Vec<f64>,
    #[serde(default)]
    residual_rms: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MlpFile {
    format_version: i64,
    kind: String,
    fs: f64,
    window: usize,
    layer_sizes: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    norm: Normalization,
    #[serde(skip_serializing_if = "Option::is_none")]
    heads: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    training: Option<ClassifierMeta>,
}

fn all_finite<'a>(values: impl IntoIterator<Item = &'a f64>) -> bool {
    values.into_iter().all(|v| v.is_finite())
}

pub fn model_to_json(model: &SavedModel) -> Result<String> {
    let value = match model {
        SavedModel::Predictor(Predictor::Ar(ar)) => {
            if !all_finite(&ar.coeffs) {
                return Err(ShmError::invalid("cannot save non-finite AR coefficients"));
            }
            serde_json::to_value(ArFile {
                format_version: FORMAT_VERSION,
                kind: "ar".into(),
                fs: ar.fs,
                window: ar.order(),
                coeffs: ar.coeffs.clone(),
                residual_rms: ar.residual_rms,
            })
        }
        SavedModel::Predictor(Predictor::Mlp(m)) => {
            m.net.validate()?;
            serde_json::to_value(MlpFile {
                format_version: FORMAT_VERSION,
                kind: "mlp".into(),
                fs: m.fs,
                window: m.window(),
                layer_sizes: m.net.layer_sizes.clone(),
                weights: m.net.weights.clone(),
                biases: m.net.biases.clone(),
                norm: m.norm.clone(),
                heads: None,
                training: None,
            })
        }
        SavedModel::Classifier(c) => {
            c.net.validate()?;
            serde_json::to_value(MlpFile {
                format_version: FORMAT_VERSION,
                kind: "classifier".into(),
                fs: 0.0,
                window: c.net.input_dim(),
                layer_sizes: c.net.layer_sizes.clone(),
                weights: c.net.weights.clone(),
                biases: c.net.biases.clone(),
                norm: c.norm.clone(),
                heads: Some(c.heads.clone()),
                training: Some(c.meta.clone()),
            })
        }
    }
    .map_err(|e| ShmError::invalid(format!("serialization failed: {e}")))?;
    Ok(serde_json::to_string_pretty(&value).expect("value serializes"))
}

pub fn save_model(model: &SavedModel, path: &Path) -> Result<()> {
    let text = model_to_json(model)?;
    std::fs::write(path, text + "\n").map_err(|e| ShmError::io(path, e))
}

fn malformed(origin: &str, detail: impl Into<String>) -> ShmError {
    ShmError::Malformed { path: origin.to_string(), detail: detail.into() }
}

fn check_norm(norm: &Normalization, n: usize, origin: &str) -> Result<()> {
    if norm.in_mean.len() != n || norm.in_std.len() != n {
        return Err(malformed(origin, format!("norm statistics must have {n} entries")));
    }
    if !all_finite(norm.in_mean.iter().chain(&norm.in_std)) || !norm.out_mean.is_finite() || !norm.out_std.is_finite() {
        return Err(malformed(origin, "norm statistics must be finite"));
    }
    if norm.in_std.iter().any(|s| *s <= 0.0) || norm.out_std <= 0.0 {
        return Err(malformed(origin, "norm standard deviations must be positive"));
    }
    Ok(())
}

const AR_FIELDS: [&str; 5] = ["format_version", "kind", "fs", "window", "coeffs"];
const MLP_FIELDS: [&str; 8] = ["format_version", "kind", "fs", "window", "layer_sizes", "weights", "biases", "norm"];

/// Describe a parse failure, naming required keys that never appear in the text.
fn syntax_detail(text: &str, err: &serde_json::Error) -> String {
    let has = |key: &str| text.contains(&format!("\"{key}\""));
    let fields: &[&str] = if text.contains("\"ar\"") { &AR_FIELDS } else { &MLP_FIELDS };
    let mut missing: Vec<&str> = fields.iter().copied().filter(|k| !has(k)).collect();
    if text.contains("\"classifier\"") && !has("heads") {
        missing.push("heads");
    }
    match missing.first() {
        Some(first) => format!("missing field `{first}` (file ends early: {err})"),
        None => err.to_string(),
    }
}

pub fn model_from_json(text: &str, origin: &str) -> Result<SavedModel> {
    let value: Value = serde_json::from_str(text).map_err(|e| malformed(origin, syntax_detail(text, &e)))?;
    let obj = value.as_object().ok_or_else(|| malformed(origin, "top level must be an object"))?;
    let version = obj
        .get("format_version")
        .ok_or_else(|| malformed(origin, "missing field `format_version`"))?
        .as_i64()
        .ok_or_else(|| malformed(origin, "`format_version` must be an integer"))?;
    if version != FORMAT_VERSION {
        return Err(ShmError::UnsupportedVersion(version));
    }
    let kind = obj
        .get("kind")
        .ok_or_else(|| malformed(origin, "missing field `kind`"))?
        .as_str()
        .ok_or_else(|| malformed(origin, "`kind` must be a string"))?
        .to_string();
    let detail = |e: serde_json::Error| malformed(origin, e.to_string());
    match kind.as_str() {
        "ar" => {
            let f: ArFile = serde_json::from_value(value).map_err(detail)?;
            if f.coeffs.len() != f.window {
                return Err(malformed(origin, format!("window {} but {} coeffs", f.window, f.coeffs.len())));
            }
            if !all_finite(&f.coeffs) || !(f.fs > 0.0 && f.fs.is_finite()) {
                return Err(malformed(origin, "coeffs must be finite and fs positive"));
            }
            Ok(SavedModel::Predictor(Predictor::Ar(ArModel { coeffs: f.coeffs, fs: f.fs, residual_rms: f.residual_rms })))
        }
        "mlp" | "classifier" => {
            let f: MlpFile = serde_json::from_value(value).map_err(detail)?;
            let net = Network { layer_sizes: f.layer_sizes, weights: f.weights, biases: f.biases };
            net.validate().map_err(|e| malformed(origin, e.to_string()))?;
            if f.window != net.input_dim() {
                return Err(malformed(origin, "window does not match the input layer"));
            }
            check_norm(&f.norm, net.input_dim(), origin)?;
            if kind == "mlp" {
                if net.output_dim() != 1 {
                    return Err(malformed(origin, "predictor must have one output"));
                }
                if !(f.fs > 0.0 && f.fs.is_finite()) {
                    return Err(malformed(origin, "fs must be positive"));
                }
                return Ok(SavedModel::Predictor(Predictor::Mlp(MlpModel { net, norm: f.norm, fs: f.fs })));
            }
            let heads = f.heads.ok_or_else(|| malformed(origin, "missing field `heads`"))?;
            if heads != HEADS || net.input_dim() != N_FEATURES || net.output_dim() != heads.iter().sum::<usize>() {
                return Err(malformed(origin, format!("classifier heads must be {HEADS:?} over {N_FEATURES} features")));
            }
            let meta = f.training.unwrap_or(ClassifierMeta { seed: 0, noise_rel: 0.0, replicates: 1 });
            Ok(SavedModel::Classifier(ClassifierModel { net, norm: f.norm, heads, meta }))
        }
        other => Err(malformed(origin, format!("unknown kind {other:?} (ar|mlp|classifier)"))),
    }
}

pub fn load_model(path: &Path) -> Result<SavedModel> {
    let text = std::fs::read_to_string(path).map_err(|e| ShmError::io(path, e))?;
    model_from_json(&text, &path.display().to_string())
}
