//! Euler–Bernoulli finite-element model of a clamped composite beam.
//!
//! The laminate is homogenized into a per-element bending stiffness `EI`.
//! Each node carries two DOFs `[w, θ]`; node 1 is clamped, so the free DOF
//! of node `j` (1-based, `j >= 2`) starts at index `2 * (j - 2)`.
//!
//! Delamination damage is a multiplicative knockdown on the `EI` of a
//! contiguous run of elements.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ShmError};

/// `(βL)²` for the first four modes of a uniform clamped-free beam.
pub const CANTILEVER_BETA_L_SQ: [f64; 4] = [3.51602, 22.0345, 61.6972, 120.902];

/// EI multiplier indexed by severity level 0..=3.
pub const KNOCKDOWN_FACTORS: [f64; 4] = [1.0, 0.9, 0.75, 0.5];

/// 1-based start elements of the ten damage locations.
pub const DAMAGE_START_ELEMENTS: [usize; 10] = [3, 6, 9, 12, 15, 18, 21, 24, 27, 30];

/// Pristine case plus 3 severities x 2 lengths x 10 locations.
pub const N_CASES: usize = 61;

/// Relative residual bound `‖Kφ − ω²Mφ‖ ≤ tol·‖Kφ‖` for every returned mode.
pub const EIGEN_RESIDUAL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamConfig {
    /// Beam length in inches.
    pub length: f64,
    pub n_elements: usize,
    /// Ply count of the laminate. Metadata only.
    pub plies: usize,
    /// Target fundamental frequency in rad/s.
    pub omega1_target: f64,
    pub mass_per_length: f64,
    pub n_modes: usize,
    pub damping_ratio: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            length: 36.0,
            n_elements: 36,
            plies: 18,
            omega1_target: 10.0,
            mass_per_length: 1.0,
            n_modes: 4,
            damping_ratio: 0.005,
        }
    }
}

impl BeamConfig {
    pub fn n_nodes(&self) -> usize {
        self.n_elements + 1
    }

    pub fn n_free_dofs(&self) -> usize {
        2 * self.n_elements
    }

    pub fn element_length(&self) -> f64 {
        self.length / self.n_elements as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_elements < 1 {
            return Err(ShmError::invalid("n_elements must be at least 1"));
        }
        if !(self.length > 0.0 && self.length.is_finite()) {
            return Err(ShmError::invalid("beam length must be positive"));
        }
        if !(self.omega1_target > 0.0 && self.omega1_target.is_finite()) {
            return Err(ShmError::invalid("omega1_target must be positive"));
        }
        if !(self.mass_per_length > 0.0 && self.mass_per_length.is_finite()) {
            return Err(ShmError::invalid("mass_per_length must be positive"));
        }
        if !(0.0..1.0).contains(&self.damping_ratio) {
            return Err(ShmError::invalid("damping_ratio must lie in [0, 1)"));
        }
        if self.n_modes == 0 || self.n_modes > self.n_free_dofs() {
            return Err(ShmError::invalid(format!(
                "n_modes {} outside 1..={}",
                self.n_modes,
                self.n_free_dofs()
            )));
        }
        Ok(())
    }
}

/// One delamination scenario. `case_id` 0 is the undamaged beam.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DamageSpec {
    pub case_id: usize,
    pub severity: usize,
    pub length_elements: usize,
    pub start_element: usize,
}

impl DamageSpec {
    pub fn pristine() -> Self {
        Self {
            case_id: 0,
            severity: 0,
            length_elements: 1,
            start_element: DAMAGE_START_ELEMENTS[0],
        }
    }

    /// Canonical case numbering:
    /// `case_id = 1 + (severity − 1)·20 + (length − 1)·10 + location_index`.
    pub fn from_case_id(case_id: usize) -> Result<Self> {
        if case_id == 0 {
            return Ok(Self::pristine());
        }
        if case_id >= N_CASES {
            return Err(ShmError::invalid(format!(
                "case_id {case_id} outside 0..{N_CASES}"
            )));
        }
        let k = case_id - 1;
        Ok(Self {
            case_id,
            severity: k / 20 + 1,
            length_elements: (k % 20) / 10 + 1,
            start_element: DAMAGE_START_ELEMENTS[k % 10],
        })
    }

    pub fn from_parts(severity: usize, length_elements: usize, location_index: usize) -> Result<Self> {
        if severity == 0 {
            return Ok(Self::pristine());
        }
        if severity > 3 || !(1..=2).contains(&length_elements) || location_index >= 10 {
            return Err(ShmError::invalid(format!(
                "damage parts out of range: severity {severity}, length {length_elements}, location {location_index}"
            )));
        }
        Self::from_case_id(1 + (severity - 1) * 20 + (length_elements - 1) * 10 + location_index)
    }

    pub fn knockdown_factor(&self) -> f64 {
        KNOCKDOWN_FACTORS[self.severity]
    }

    pub fn location_index(&self) -> usize {
        DAMAGE_START_ELEMENTS
            .iter()
            .position(|&s| s == self.start_element)
            .unwrap_or(0)
    }

    pub fn is_pristine(&self) -> bool {
        self.severity == 0
    }
}

/// All 61 cases in `case_id` order.
pub fn enumerate_damage_cases() -> Vec<DamageSpec> {
    (0..N_CASES)
        .map(|id| DamageSpec::from_case_id(id).expect("case id in range"))
        .collect()
}

/// Assembled system over the free DOFs of the clamped beam.
#[derive(Debug, Clone)]
pub struct FemModel {
    pub config: BeamConfig,
    pub stiffness: DMatrix<f64>,
    pub mass: DMatrix<f64>,
    pub element_ei: Vec<f64>,
    pub element_length: f64,
}

/// Modal solution. `shapes` has one mass-normalized column per mode.
#[derive(Debug, Clone)]
pub struct ModalData {
    pub omegas: Vec<f64>,
    pub freqs_hz: Vec<f64>,
    pub zetas: Vec<f64>,
    pub shapes: DMatrix<f64>,
    pub element_length: f64,
    pub n_elements: usize,
}

impl ModalData {
    pub fn n_modes(&self) -> usize {
        self.omegas.len()
    }

    /// Keep only the first `n` modes.
    pub fn truncated(&self, n: usize) -> ModalData {
        let n = n.min(self.n_modes());
        ModalData {
            omegas: self.omegas[..n].to_vec(),
            freqs_hz: self.freqs_hz[..n].to_vec(),
            zetas: self.zetas[..n].to_vec(),
            shapes: self.shapes.columns(0, n).into_owned(),
            element_length: self.element_length,
            n_elements: self.n_elements,
        }
    }
}

/// Free-DOF index of `w` at a 1-based node, `None` for the clamped root.
pub fn w_dof(node: usize) -> Option<usize> {
    (node >= 2).then(|| 2 * (node - 2))
}

/// Free-DOF index of `θ` at a 1-based node, `None` for the clamped root.
pub fn theta_dof(node: usize) -> Option<usize> {
    (node >= 2).then(|| 2 * (node - 2) + 1)
}

/// Uniform EI giving the requested analytic fundamental frequency:
/// `ω₁ = (βL)₁²·√(EI / (ρA·L⁴))`.
pub fn calibrate_bending_stiffness(cfg: &BeamConfig) -> Result<f64> {
    cfg.validate()?;
    let ratio = cfg.omega1_target / CANTILEVER_BETA_L_SQ[0];
    Ok(ratio * ratio * cfg.mass_per_length * cfg.length.powi(4))
}

/// Closed-form uniform-cantilever frequencies (rad/s) for the first four modes.
pub fn analytic_omegas(cfg: &BeamConfig, ei: f64) -> [f64; 4] {
    let scale = (ei / (cfg.mass_per_length * cfg.length.powi(4))).sqrt();
    CANTILEVER_BETA_L_SQ.map(|c| c * scale)
}

/// 4x4 Hermite bending stiffness for DOFs `[w1, θ1, w2, θ2]`.
pub fn element_stiffness(ei: f64, l: f64) -> [[f64; 4]; 4] {
    let c = ei / (l * l * l);
    let l2 = l * l;
    [
        [12.0 * c, 6.0 * l * c, -12.0 * c, 6.0 * l * c],
        [6.0 * l * c, 4.0 * l2 * c, -6.0 * l * c, 2.0 * l2 * c],
        [-12.0 * c, -6.0 * l * c, 12.0 * c, -6.0 * l * c],
        [6.0 * l * c, 2.0 * l2 * c, -6.0 * l * c, 4.0 * l2 * c],
    ]
}

/// 4x4 consistent mass matrix for DOFs `[w1, θ1, w2, θ2]`.
pub fn element_mass(rho_a: f64, l: f64) -> [[f64; 4]; 4] {
    let c = rho_a * l / 420.0;
    let l2 = l * l;
    [
        [156.0 * c, 22.0 * l * c, 54.0 * c, -13.0 * l * c],
        [22.0 * l * c, 4.0 * l2 * c, 13.0 * l * c, -3.0 * l2 * c],
        [54.0 * c, 13.0 * l * c, 156.0 * c, -22.0 * l * c],
        [-13.0 * l * c, -3.0 * l2 * c, -22.0 * l * c, 4.0 * l2 * c],
    ]
}

/// Assemble `K` and `M` with the root node eliminated.
pub fn assemble_system(cfg: &BeamConfig, ei_per_element: &[f64]) -> Result<FemModel> {
    cfg.validate()?;
    if ei_per_element.len() != cfg.n_elements {
        return Err(ShmError::invalid(format!(
            "expected {} element stiffnesses, got {}",
            cfg.n_elements,
            ei_per_element.len()
        )));
    }
    if let Some((i, ei)) = ei_per_element
        .iter()
        .enumerate()
        .find(|(_, &ei)| !(ei > 0.0 && ei.is_finite()))
    {
        return Err(ShmError::invalid(format!(
            "element {} has non-positive bending stiffness {ei}",
            i + 1
        )));
    }

    let n = cfg.n_free_dofs();
    let l = cfg.element_length();
    let me = element_mass(cfg.mass_per_length, l);
    let mut stiffness = DMatrix::zeros(n, n);
    let mut mass = DMatrix::zeros(n, n);

    for (e, &ei) in ei_per_element.iter().enumerate() {
        let ke = element_stiffness(ei, l);
        // element e (0-based) spans nodes e+1 and e+2 (1-based)
        let dofs = [
            w_dof(e + 1),
            theta_dof(e + 1),
            w_dof(e + 2),
            theta_dof(e + 2),
        ];
        for (a, da) in dofs.iter().enumerate() {
            let Some(i) = *da else { continue };
            for (b, db) in dofs.iter().enumerate() {
                let Some(j) = *db else { continue };
                stiffness[(i, j)] += ke[a][b];
                mass[(i, j)] += me[a][b];
            }
        }
    }

    Ok(FemModel {
        config: cfg.clone(),
        stiffness,
        mass,
        element_ei: ei_per_element.to_vec(),
        element_length: l,
    })
}

/// Calibrated undamaged model.
pub fn pristine_model(cfg: &BeamConfig) -> Result<FemModel> {
    let ei = calibrate_bending_stiffness(cfg)?;
    assemble_system(cfg, &vec![ei; cfg.n_elements])
}

/// Knock down `EI` on the damaged span and re-assemble.
pub fn apply_damage(model: &FemModel, spec: &DamageSpec) -> Result<FemModel> {
    if spec.severity > 3 {
        return Err(ShmError::invalid(format!("severity {} > 3", spec.severity)));
    }
    if spec.is_pristine() {
        return Ok(model.clone());
    }
    let n = model.config.n_elements;
    let end = spec.start_element + spec.length_elements - 1;
    if spec.start_element == 0 || spec.length_elements == 0 || end > n {
        return Err(ShmError::invalid(format!(
            "damage span {}..={} outside elements 1..={n}",
            spec.start_element, end
        )));
    }
    let factor = spec.knockdown_factor();
    let mut ei = model.element_ei.clone();
    for v in &mut ei[spec.start_element - 1..end] {
        *v *= factor;
    }
    assemble_system(&model.config, &ei)
}

/// Model for a numbered case, built from the calibrated pristine beam.
pub fn case_model(cfg: &BeamConfig, case_id: usize) -> Result<FemModel> {
    let spec = DamageSpec::from_case_id(case_id)?;
    apply_damage(&pristine_model(cfg)?, &spec)
}

/// Lowest `n_modes` of `K·φ = ω²·M·φ`, mass-normalized.
///
/// `K` is Cholesky-factored and the reciprocal problem
/// `L⁻¹ M L⁻ᵀ y = (1/ω²) y` is solved, so the low modes sit at the top of
/// the spectrum where the symmetric solver is most accurate.
pub fn solve_modes(model: &FemModel, n_modes: usize, zeta: f64) -> Result<ModalData> {
    let n = model.stiffness.nrows();
    if n_modes == 0 || n_modes > n {
        return Err(ShmError::invalid(format!(
            "n_modes {n_modes} outside 1..={n}"
        )));
    }
    if !(0.0..1.0).contains(&zeta) {
        return Err(ShmError::invalid("damping ratio must lie in [0, 1)"));
    }
    if model.mass.clone().cholesky().is_none() {
        return Err(ShmError::numerical("mass matrix is not positive definite"));
    }
    let chol_k = model
        .stiffness
        .clone()
        .cholesky()
        .ok_or_else(|| ShmError::numerical("stiffness matrix is not positive definite"))?;
    let l = chol_k.l();

    // C = L⁻¹ M L⁻ᵀ
    let x = l
        .solve_lower_triangular(&model.mass)
        .ok_or_else(|| ShmError::numerical("singular stiffness factor"))?;
    let c = l
        .solve_lower_triangular(&x.transpose())
        .ok_or_else(|| ShmError::numerical("singular stiffness factor"))?;
    let c = (&c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(c);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let lt = l.transpose();
    let mut shapes = DMatrix::zeros(n, n_modes);
    let mut omegas = Vec::with_capacity(n_modes);
    for (col, &idx) in order.iter().take(n_modes).enumerate() {
        let mu = eig.eigenvalues[idx];
        if !(mu > 0.0) {
            return Err(ShmError::numerical("non-positive generalized eigenvalue"));
        }
        let y = eig.eigenvectors.column(idx).into_owned();
        let mut phi = lt
            .solve_upper_triangular(&y)
            .ok_or_else(|| ShmError::numerical("singular stiffness factor"))?;

        let m_norm = (&model.mass * &phi).dot(&phi).sqrt();
        phi /= m_norm;
        // sign convention: tip displacement positive
        if phi[n - 2] < 0.0 {
            phi = -phi;
        }
        let omega2 = (&model.stiffness * &phi).dot(&phi);

        let kphi = &model.stiffness * &phi;
        let resid = (&kphi - (&model.mass * &phi) * omega2).norm();
        if resid > EIGEN_RESIDUAL_TOL * kphi.norm() {
            return Err(ShmError::numerical(format!(
                "mode {} residual {:.3e} exceeds tolerance",
                col + 1,
                resid / kphi.norm()
            )));
        }
        shapes.set_column(col, &phi);
        omegas.push(omega2.sqrt());
    }

    for w in omegas.windows(2) {
        if !(w[1] > w[0]) {
            return Err(ShmError::numerical("eigenvalues not strictly ascending"));
        }
    }

    Ok(ModalData {
        freqs_hz: omegas
            .iter()
            .map(|w| w / (2.0 * std::f64::consts::PI))
            .collect(),
        zetas: vec![zeta; n_modes],
        omegas,
        shapes,
        element_length: model.element_length,
        n_elements: model.config.n_elements,
    })
}

/// Modal solution of a numbered case using the config's mode count and damping.
pub fn case_modes(cfg: &BeamConfig, case_id: usize) -> Result<ModalData> {
    solve_modes(&case_model(cfg, case_id)?, cfg.n_modes, cfg.damping_ratio)
}
