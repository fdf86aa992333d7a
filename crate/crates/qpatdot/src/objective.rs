//! Objective functionals for the coupled inversion.
//!
//! The photoacoustic misfit comes in four variants, all driven by the
//! internal maps `H_j = Γ·σ·U_j` against measured `H*_j`:
//!
//! - `full-pairs`: `½ Σ_{i>j} ∫ ((H*_i·H_j − H_i·H*_j)/(H*_i·H*_j))² dx`,
//!   the data-rescaled cross-product misfit over every source pair. Its
//!   minimizer over `(γ, σ)` does not move with the `Γ` used to form the
//!   model maps, because `Γσ` enters every `H_j` as a common factor.
//! - `fixed-reference`: the same pair terms restricted to pairs with source
//!   1, cutting the double sum to a single one.
//! - `ratio`: `½ Σ_{i>j} ∫ (U_i/U_j − H*_i/H*_j)² dx` — the model ratio is
//!   formed directly from the photon densities so the efficiency and
//!   absorption factors cancel identically.
//! - `plain-least-squares`: `½ Σ_j ∫ (H_j − H*_j)² dx`, the direct misfit
//!   used by the single-stage baseline (and the absorption refinement step);
//!   this one does depend on `Γ`.
//!
//! The optical misfit is the data-rescaled boundary-current residual
//! `½ Σ_j Σ_i ∮ |(γ∂u/∂n − J*)/J*|² dS`; rescaling keeps far-from-source
//! detectors, whose signals decay fast, contributing at the same order as
//! near ones. Regularization is Tikhonov on gradients with separate weights
//! per coefficient.
//!
//! Area integrals use the lumped P1 quadrature (`Σ w_n·f_n`), boundary
//! integrals the per-edge midpoint rule — both consistent with the
//! discretization order.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::assembly::stiffness_pairing;
use crate::error::{Error, Result};
use crate::forward::{DataSet, ModelParts, ModelState};
use crate::mesh::{lumped_area_weights, Mesh};

/// Magnitude floor for data denominators in the rescaled functionals.
pub const DATA_FLOOR: f64 = 1e-14;

/// Photoacoustic misfit variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatVariant {
    FullPairs,
    FixedReference,
    Ratio,
    PlainLeastSquares,
}

impl PatVariant {
    /// Ordered source pairs `(i, j)`, `i > j`, contributing to the variant.
    pub fn pairs(&self, n_sources: usize) -> Vec<(usize, usize)> {
        match self {
            PatVariant::FullPairs | PatVariant::Ratio => {
                let mut out = Vec::new();
                for i in 1..n_sources {
                    for j in 0..i {
                        out.push((i, j));
                    }
                }
                out
            }
            PatVariant::FixedReference => (1..n_sources).map(|i| (i, 0)).collect(),
            PatVariant::PlainLeastSquares => Vec::new(),
        }
    }
}

/// Weights and switches for the total objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    /// Tikhonov weight on `∇σ` (default 1e-6).
    pub beta_sigma: f64,
    /// Tikhonov weight on `∇γ` (default 1e-5).
    pub beta_gamma: f64,
    pub pat_variant: PatVariant,
    pub include_dot: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            beta_sigma: 1e-6,
            beta_gamma: 1e-5,
            pat_variant: PatVariant::FixedReference,
            include_dot: true,
        }
    }
}

/// Per-term values of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Breakdown {
    pub pat: f64,
    pub dot: f64,
    pub reg: f64,
    pub total: f64,
}

/// Floored rescaling denominator `max(H*_i·H*_j, 1e-14)` for one node.
///
/// The floor keeps regions where the measured maps decay to nothing from
/// dominating the misfit through the rescaling: below it the data carries
/// no usable signal and the residual is effectively switched off. It
/// depends on data only, so the functional stays smooth in the model
/// coefficients.
#[inline]
pub(crate) fn pair_denominator(hd_i: f64, hd_j: f64) -> Result<f64> {
    let denom = hd_i * hd_j;
    if denom == 0.0 {
        return Err(Error::InvalidData(
            "internal-data product vanishes; rescaled misfit undefined".into(),
        ));
    }
    Ok(denom.abs().max(DATA_FLOOR))
}

/// Nodal cross-product residual
/// `Z_ij = (H*_i·H_j − H_i·H*_j)/max(H*_i·H*_j, 1e-14)` for one source pair.
pub(crate) fn pair_residual(
    h_model_i: &[f64],
    h_model_j: &[f64],
    h_data_i: &[f64],
    h_data_j: &[f64],
) -> Result<Vec<f64>> {
    let mut z = Vec::with_capacity(h_model_i.len());
    for n in 0..h_model_i.len() {
        let denom = pair_denominator(h_data_i[n], h_data_j[n])?;
        z.push((h_data_i[n] * h_model_j[n] - h_model_i[n] * h_data_j[n]) / denom);
    }
    Ok(z)
}

/// Photoacoustic misfit for a solved model state.
pub fn pat_value(state: &ModelState, data: &DataSet, variant: PatVariant) -> Result<f64> {
    let w = lumped_area_weights(&state.mesh);
    let nn = state.mesh.node_count();
    match variant {
        PatVariant::FullPairs | PatVariant::FixedReference => {
            if state.h_model.is_empty() {
                return Err(Error::InvalidArgument(
                    "model state carries no internal maps; supply an efficiency field".into(),
                ));
            }
            let mut acc = 0.0;
            for (i, j) in variant.pairs(data.sources.len()) {
                let z = pair_residual(
                    &state.h_model[i],
                    &state.h_model[j],
                    &data.internal[i],
                    &data.internal[j],
                )?;
                let term: f64 = (0..nn).map(|n| w[n] * z[n] * z[n]).sum();
                acc += 0.5 * term;
            }
            Ok(acc)
        }
        PatVariant::Ratio => {
            let mut acc = 0.0;
            for (i, j) in variant.pairs(data.sources.len()) {
                let mut term = 0.0;
                for n in 0..nn {
                    let uj = state.u_pat[j][n];
                    let dj = data.internal[j][n];
                    if uj.abs() < DATA_FLOOR || dj.abs() < DATA_FLOOR {
                        return Err(Error::InvalidData(format!(
                            "ratio denominator below {DATA_FLOOR:.0e} at node {n}"
                        )));
                    }
                    let rho = state.u_pat[i][n] / uj - data.internal[i][n] / dj;
                    term += w[n] * rho * rho;
                }
                acc += 0.5 * term;
            }
            Ok(acc)
        }
        PatVariant::PlainLeastSquares => {
            if state.h_model.is_empty() {
                return Err(Error::InvalidArgument(
                    "model state carries no internal maps; supply an efficiency field".into(),
                ));
            }
            let mut acc = 0.0;
            for j in 0..data.sources.len() {
                let mut term = 0.0;
                for n in 0..nn {
                    let r = state.h_model[j][n] - data.internal[j][n];
                    term += w[n] * r * r;
                }
                acc += 0.5 * term;
            }
            Ok(acc)
        }
    }
}

/// Rescaled optical (boundary-current) misfit for a solved model state.
pub fn dot_value(state: &ModelState, data: &DataSet) -> Result<f64> {
    let len = state.mesh.boundary_edge_length();
    let mut acc = 0.0;
    for (fi, _) in data.omega_c.iter().enumerate() {
        for j in 0..data.sources.len() {
            let model = &state.j_model[fi][j];
            let meas = &data.currents[j][fi];
            let mut term = 0.0;
            for e in 0..meas.len() {
                if meas[e].norm() < DATA_FLOOR {
                    return Err(Error::InvalidData(format!(
                        "measured current below {DATA_FLOOR:.0e} at detector {e}; rescaling undefined"
                    )));
                }
                let r = (model[e] - meas[e]) / meas[e];
                term += len * r.norm_sqr();
            }
            acc += 0.5 * term;
        }
    }
    Ok(acc)
}

/// Tikhonov regularization `½(β_γ‖∇γ‖² + β_σ‖∇σ‖²)` via exact P1
/// stiffness quadratic forms.
pub fn reg_value(mesh: &Mesh, gamma: &[f64], sigma: &[f64], beta_gamma: f64, beta_sigma: f64) -> f64 {
    0.5 * (beta_gamma * stiffness_pairing(mesh, gamma, gamma)
        + beta_sigma * stiffness_pairing(mesh, sigma, sigma))
}

/// Evaluate the configured total objective, returning the per-term breakdown.
pub fn total_value(
    state: &ModelState,
    data: &DataSet,
    gamma: &[f64],
    sigma: &[f64],
    config: &ObjectiveConfig,
) -> Result<Breakdown> {
    let pat = pat_value(state, data, config.pat_variant)?;
    let dot = if config.include_dot {
        dot_value(state, data)?
    } else {
        0.0
    };
    let reg = reg_value(
        &state.mesh,
        gamma,
        sigma,
        config.beta_gamma,
        config.beta_sigma,
    );
    Ok(Breakdown {
        pat,
        dot,
        reg,
        total: pat + dot + reg,
    })
}

fn state_for(
    mesh: &std::sync::Arc<Mesh>,
    gamma: &[f64],
    sigma: &[f64],
    grueneisen: Option<&[f64]>,
    data: &DataSet,
    config: &ObjectiveConfig,
) -> Result<ModelState> {
    let parts = ModelParts {
        photoacoustic: true,
        optical: config.include_dot,
    };
    ModelState::new(mesh, gamma, sigma, grueneisen, data, parts)
}

/// Full-pair rescaled photoacoustic misfit.
pub fn phi_pat_full(
    mesh: &std::sync::Arc<Mesh>,
    gamma: &[f64],
    sigma: &[f64],
    grueneisen: &[f64],
    data: &DataSet,
) -> Result<f64> {
    let state = ModelState::new(
        mesh,
        gamma,
        sigma,
        Some(grueneisen),
        data,
        ModelParts::photoacoustic_only(),
    )?;
    pat_value(&state, data, PatVariant::FullPairs)
}

/// Fixed-reference rescaled photoacoustic misfit (pairs with source 1 only).
pub fn phi_pat_fixed_ref(
    mesh: &std::sync::Arc<Mesh>,
    gamma: &[f64],
    sigma: &[f64],
    grueneisen: &[f64],
    data: &DataSet,
) -> Result<f64> {
    let state = ModelState::new(
        mesh,
        gamma,
        sigma,
        Some(grueneisen),
        data,
        ModelParts::photoacoustic_only(),
    )?;
    pat_value(&state, data, PatVariant::FixedReference)
}

/// Ratio-normalized photoacoustic misfit; independent of any efficiency
/// field by construction (the model ratio is formed from photon densities).
pub fn phi_pat_ratio(
    mesh: &std::sync::Arc<Mesh>,
    gamma: &[f64],
    sigma: &[f64],
    data: &DataSet,
) -> Result<f64> {
    let state = ModelState::new(
        mesh,
        gamma,
        sigma,
        None,
        data,
        ModelParts::photoacoustic_only(),
    )?;
    pat_value(&state, data, PatVariant::Ratio)
}

/// Plain least-squares photoacoustic misfit (depends on the efficiency).
pub fn phi_pat_plain(
    mesh: &std::sync::Arc<Mesh>,
    gamma: &[f64],
    sigma: &[f64],
    grueneisen: &[f64],
    data: &DataSet,
) -> Result<f64> {
    let state = ModelState::new(
        mesh,
        gamma,
        sigma,
        Some(grueneisen),
        data,
        ModelParts::photoacoustic_only(),
    )?;
    pat_value(&state, data, PatVariant::PlainLeastSquares)
}

/// Rescaled optical misfit over all sources and frequencies.
pub fn phi_dot(
    mesh: &std::sync::Arc<Mesh>,
    gamma: &[f64],
    sigma: &[f64],
    data: &DataSet,
) -> Result<f64> {
    let state = ModelState::new(
        mesh,
        gamma,
        sigma,
        None,
        data,
        ModelParts {
            photoacoustic: false,
            optical: true,
        },
    )?;
    dot_value(&state, data)
}

/// Configured total objective with per-term breakdown.
pub fn total_objective(
    mesh: &std::sync::Arc<Mesh>,
    gamma: &[f64],
    sigma: &[f64],
    grueneisen: &[f64],
    data: &DataSet,
    config: &ObjectiveConfig,
) -> Result<Breakdown> {
    let state = state_for(mesh, gamma, sigma, Some(grueneisen), data, config)?;
    total_value(&state, data, gamma, sigma, config)
}

/// Drop complex values to their real parts (zero-frequency data helper).
pub fn real_parts(values: &[Complex64]) -> Vec<f64> {
    values.iter().map(|z| z.re).collect()
}
