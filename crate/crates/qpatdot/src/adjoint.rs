//! Adjoint-state gradients of the objective terms with respect to the nodal
//! diffusion and absorption coefficients.
//!
//! Every gradient here is the exact derivative of the *discrete* functional
//! implemented in [`crate::objective`], assembled from adjoint solves that
//! reuse the forward factorizations:
//!
//! - the photoacoustic terms drive one adjoint solve per source with the
//!   stationary operator, its right-hand side accumulating the residual
//!   pressure sensitivities over all contributing pairs;
//! - the optical terms drive one adjoint solve per (source, frequency) with
//!   the same complex-symmetric operator as the forward problem (the plain
//!   transpose equals the matrix itself, so factorizations are shared; the
//!   conjugate-frequency form of the adjoint equation is this solve read
//!   through complex conjugation);
//! - the Tikhonov term differentiates exactly to the weighted stiffness
//!   matvec.
//!
//! Under Dirichlet conditions the boundary-current map itself depends on the
//! coefficients through the residual flux; that explicit dependence enters
//! as a boundary-supported multiplier folded into the effective adjoint.
//!
//! Diffusion gradients are returned with boundary entries zeroed: the
//! boundary trace of `γ` is pinned (by the analytic recovery stage, or at
//! its initial value for the single-stage baseline), so admissible
//! perturbations vanish there.

use num_complex::Complex64;

use crate::assembly::{
    accumulate_stiffness_sensitivity, accumulate_stiffness_sensitivity_complex,
    add_stiffness_matvec, BoundaryKind,
};
use crate::error::{Error, Result};
use crate::forward::{DataSet, ModelParts, ModelState};
use crate::mesh::{lumped_area_weights, Mesh};
use crate::objective::{
    dot_value, pair_residual, pat_value, reg_value, Breakdown, ObjectiveConfig, PatVariant,
    DATA_FLOOR,
};

/// Nodal gradient vectors for one objective term (or their sum).
#[derive(Debug, Clone)]
pub struct GradientPair {
    pub d_gamma: Vec<f64>,
    pub d_sigma: Vec<f64>,
}

impl GradientPair {
    pub fn zeros(n: usize) -> Self {
        Self {
            d_gamma: vec![0.0; n],
            d_sigma: vec![0.0; n],
        }
    }

    pub fn add_scaled(&mut self, other: &GradientPair, s: f64) {
        for i in 0..self.d_gamma.len() {
            self.d_gamma[i] += s * other.d_gamma[i];
            self.d_sigma[i] += s * other.d_sigma[i];
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.d_gamma
            .iter()
            .chain(self.d_sigma.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn zero_gamma_boundary(&mut self, mesh: &Mesh) {
        for &v in &mesh.boundary_nodes {
            self.d_gamma[v] = 0.0;
        }
    }
}

/// Accumulate one solved adjoint/forward pair into the gradient:
/// `dγ -= λᵀ(∂K/∂γ_n)u`, `dσ -= w_n λ_n u_n`.
fn accumulate_real(mesh: &Mesh, w: &[f64], lambda: &[f64], u: &[f64], grad: &mut GradientPair) {
    accumulate_stiffness_sensitivity(mesh, lambda, u, -1.0, &mut grad.d_gamma);
    for n in 0..u.len() {
        grad.d_sigma[n] -= w[n] * lambda[n] * u[n];
    }
}

fn accumulate_complex(
    mesh: &Mesh,
    w: &[f64],
    lambda: &[Complex64],
    u: &[Complex64],
    grad: &mut GradientPair,
) {
    accumulate_stiffness_sensitivity_complex(mesh, lambda, u, -1.0, &mut grad.d_gamma);
    for n in 0..u.len() {
        grad.d_sigma[n] -= w[n] * (lambda[n] * u[n]).re;
    }
}

/// Photoacoustic-term gradient from a solved model state.
///
/// Adjoint right-hand sides are accumulated per source over the variant's
/// pair set, so the count of adjoint solves equals the count of sources
/// regardless of how many pairs contribute.
pub fn pat_gradient(
    state: &ModelState,
    data: &DataSet,
    variant: PatVariant,
) -> Result<GradientPair> {
    let mesh = &state.mesh;
    let nn = mesh.node_count();
    let ns = data.sources.len();
    let w = lumped_area_weights(mesh);
    let pat = state
        .pat
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("state carries no photoacoustic solves".into()))?;

    let mut rhs = vec![vec![0.0; nn]; ns];
    let mut grad = GradientPair::zeros(nn);

    match variant {
        PatVariant::FullPairs | PatVariant::FixedReference => {
            let grueneisen = state.grueneisen.as_deref().ok_or_else(|| {
                Error::InvalidArgument("state carries no efficiency field".into())
            })?;
            for (i, j) in variant.pairs(ns) {
                let z = pair_residual(
                    &state.h_model[i],
                    &state.h_model[j],
                    &data.internal[i],
                    &data.internal[j],
                )?;
                for n in 0..nn {
                    let wz = w[n] * z[n];
                    let hd_i = data.internal[i][n];
                    let hd_j = data.internal[j][n];
                    let denom = crate::objective::pair_denominator(hd_i, hd_j)?;
                    // ∂H/∂U = Γσ (taken from the formed maps to avoid a
                    // second product), ∂H/∂σ = Γ·U.
                    let gs_j = state.h_model[j][n] / state.u_pat[j][n];
                    let gs_i = state.h_model[i][n] / state.u_pat[i][n];
                    rhs[j][n] += wz * hd_i * gs_j / denom;
                    rhs[i][n] -= wz * hd_j * gs_i / denom;
                    grad.d_sigma[n] += wz * grueneisen[n]
                        * (hd_i * state.u_pat[j][n] - state.u_pat[i][n] * hd_j)
                        / denom;
                }
            }
        }
        PatVariant::Ratio => {
            for (i, j) in variant.pairs(ns) {
                for n in 0..nn {
                    let uj = state.u_pat[j][n];
                    let dj = data.internal[j][n];
                    if uj.abs() < DATA_FLOOR || dj.abs() < DATA_FLOOR {
                        return Err(Error::InvalidData(format!(
                            "ratio denominator below {DATA_FLOOR:.0e} at node {n}"
                        )));
                    }
                    let rho = state.u_pat[i][n] / uj - data.internal[i][n] / dj;
                    rhs[i][n] += w[n] * rho / uj;
                    rhs[j][n] -= w[n] * rho * state.u_pat[i][n] / (uj * uj);
                }
            }
        }
        PatVariant::PlainLeastSquares => {
            let grueneisen = state.grueneisen.as_deref().ok_or_else(|| {
                Error::InvalidArgument("state carries no efficiency field".into())
            })?;
            for j in 0..ns {
                for n in 0..nn {
                    let r = state.h_model[j][n] - data.internal[j][n];
                    let gs = state.h_model[j][n] / state.u_pat[j][n];
                    rhs[j][n] += w[n] * r * gs;
                    grad.d_sigma[n] += w[n] * r * grueneisen[n] * state.u_pat[j][n];
                }
            }
        }
    }

    for k in 0..ns {
        if rhs[k].iter().all(|&v| v == 0.0) {
            continue;
        }
        let lambda = pat.solve_dual(&rhs[k])?;
        accumulate_real(mesh, &w, &lambda, &state.u_pat[k], &mut grad);
    }
    grad.zero_gamma_boundary(mesh);
    Ok(grad)
}

/// Gradient of the plain least-squares photoacoustic misfit with respect to
/// the nodal efficiency: `dΓ_n = w_n·(H_n − H*_n)·σ_n·U_n`, summed over
/// sources. Only the single-stage baseline needs it; no adjoint solve is
/// involved because `H` depends on `Γ` pointwise.
pub fn pat_plain_grueneisen_gradient(
    state: &ModelState,
    data: &DataSet,
    sigma: &[f64],
) -> Result<Vec<f64>> {
    if state.h_model.is_empty() {
        return Err(Error::InvalidArgument(
            "state carries no internal maps; supply an efficiency field".into(),
        ));
    }
    let w = lumped_area_weights(&state.mesh);
    let nn = state.mesh.node_count();
    let mut grad = vec![0.0; nn];
    for j in 0..data.sources.len() {
        for n in 0..nn {
            let r = state.h_model[j][n] - data.internal[j][n];
            grad[n] += w[n] * r * sigma[n] * state.u_pat[j][n];
        }
    }
    Ok(grad)
}

/// Optical-term gradient from a solved model state.
pub fn dot_gradient(state: &ModelState, data: &DataSet) -> Result<GradientPair> {
    let mesh = &state.mesh;
    let nn = mesh.node_count();
    let w = lumped_area_weights(mesh);
    let len = mesh.boundary_edge_length();
    let h = mesh.boundary_edge_length();
    let mut grad = GradientPair::zeros(nn);

    for (fi, solver) in state.dot.iter().enumerate() {
        for j in 0..data.sources.len() {
            let model = &state.j_model[fi][j];
            let meas = &data.currents[j][fi];
            let u = &state.u_dot[fi][j];

            match state.bc {
                BoundaryKind::Robin(kappa) => {
                    // dφ = Re Σ_e len·(r̄/J*)·dJ_e with dJ_e = −(dû_a+dû_b)/(2κ).
                    let mut g_dual = vec![Complex64::new(0.0, 0.0); nn];
                    for (e, edge) in mesh.boundary_edges.iter().enumerate() {
                        if meas[e].norm() < DATA_FLOOR {
                            return Err(Error::InvalidData(format!(
                                "measured current below floor at detector {e}"
                            )));
                        }
                        let r = (model[e] - meas[e]) / meas[e];
                        let factor = -(len / (2.0 * kappa)) * (r.conj() / meas[e]);
                        g_dual[edge[0]] += factor;
                        g_dual[edge[1]] += factor;
                    }
                    let lambda = solver.solve_dual(&g_dual)?;
                    accumulate_complex(mesh, &w, &lambda, u, &mut grad);
                }
                BoundaryKind::Dirichlet => {
                    // The residual-flux map J_b = (A_free û)_b / h carries an
                    // explicit coefficient dependence; ψ is its multiplier.
                    let mut psi = vec![Complex64::new(0.0, 0.0); nn];
                    for (e, edge) in mesh.boundary_edges.iter().enumerate() {
                        if meas[e].norm() < DATA_FLOOR {
                            return Err(Error::InvalidData(format!(
                                "measured current below floor at detector {e}"
                            )));
                        }
                        let r = (model[e] - meas[e]) / meas[e];
                        let factor = (len / (2.0 * h)) * (r.conj() / meas[e]);
                        psi[edge[0]] += factor;
                        psi[edge[1]] += factor;
                    }
                    let rhs = solver.apply_free(&psi);
                    let wsol = solver.solve_dual(&rhs)?;
                    let lambda: Vec<Complex64> =
                        wsol.iter().zip(&psi).map(|(a, b)| a - b).collect();
                    accumulate_complex(mesh, &w, &lambda, u, &mut grad);
                }
            }
        }
    }
    grad.zero_gamma_boundary(mesh);
    Ok(grad)
}

/// Exact derivative of the Tikhonov term: weighted stiffness matvecs.
pub fn reg_gradient(
    mesh: &Mesh,
    gamma: &[f64],
    sigma: &[f64],
    beta_gamma: f64,
    beta_sigma: f64,
) -> GradientPair {
    let nn = mesh.node_count();
    let mut kg = vec![0.0; nn];
    add_stiffness_matvec(mesh, gamma, &mut kg);
    let mut ks = vec![0.0; nn];
    add_stiffness_matvec(mesh, sigma, &mut ks);
    let mut grad = GradientPair {
        d_gamma: kg.iter().map(|v| beta_gamma * v).collect(),
        d_sigma: ks.iter().map(|v| beta_sigma * v).collect(),
    };
    grad.zero_gamma_boundary(mesh);
    grad
}

/// Evaluate the configured total objective and its gradient in one pass over
/// a shared model state.
pub fn total_with_gradient(
    state: &ModelState,
    data: &DataSet,
    gamma: &[f64],
    sigma: &[f64],
    config: &ObjectiveConfig,
) -> Result<(Breakdown, GradientPair)> {
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
    let mut grad = pat_gradient(state, data, config.pat_variant)?;
    if config.include_dot {
        let gd = dot_gradient(state, data)?;
        grad.add_scaled(&gd, 1.0);
    }
    let gr = reg_gradient(
        &state.mesh,
        gamma,
        sigma,
        config.beta_gamma,
        config.beta_sigma,
    );
    grad.add_scaled(&gr, 1.0);
    Ok((
        Breakdown {
            pat,
            dot,
            reg,
            total: pat + dot + reg,
        },
        grad,
    ))
}

/// Build the state and evaluate value plus gradient of the configured total.
pub fn grad_total(
    mesh: &std::sync::Arc<Mesh>,
    gamma: &[f64],
    sigma: &[f64],
    grueneisen: &[f64],
    data: &DataSet,
    config: &ObjectiveConfig,
) -> Result<(Breakdown, GradientPair)> {
    let parts = ModelParts {
        photoacoustic: true,
        optical: config.include_dot,
    };
    let state = ModelState::new(mesh, gamma, sigma, Some(grueneisen), data, parts)?;
    total_with_gradient(&state, data, gamma, sigma, config)
}

/// Photoacoustic-term gradient (builds its own state).
pub fn grad_pat(
    mesh: &std::sync::Arc<Mesh>,
    gamma: &[f64],
    sigma: &[f64],
    grueneisen: &[f64],
    data: &DataSet,
    variant: PatVariant,
) -> Result<GradientPair> {
    let state = ModelState::new(
        mesh,
        gamma,
        sigma,
        Some(grueneisen),
        data,
        ModelParts::photoacoustic_only(),
    )?;
    pat_gradient(&state, data, variant)
}

/// Optical-term gradient (builds its own state).
pub fn grad_dot(
    mesh: &std::sync::Arc<Mesh>,
    gamma: &[f64],
    sigma: &[f64],
    data: &DataSet,
) -> Result<GradientPair> {
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
    dot_gradient(&state, data)
}

/// Per-pair adjoint solves `(W_i, W̃_j)` for the cross-product misfit:
/// `A·W_i = −w⊙Z⊙(Γσ)/H*_i` and `A·W̃_j = +w⊙Z⊙(Γσ)/H*_j`, homogeneous
/// boundary data. Exposed for verification; [`pat_gradient`] aggregates the
/// same right-hand sides per source instead.
pub fn pat_adjoint_solves(
    state: &ModelState,
    data: &DataSet,
    i: usize,
    j: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let pat = state
        .pat
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("state carries no photoacoustic solves".into()))?;
    let w = lumped_area_weights(&state.mesh);
    let z = pair_residual(
        &state.h_model[i],
        &state.h_model[j],
        &data.internal[i],
        &data.internal[j],
    )?;
    let nn = state.mesh.node_count();
    let mut rhs_i = vec![0.0; nn];
    let mut rhs_j = vec![0.0; nn];
    for n in 0..nn {
        let denom =
            crate::objective::pair_denominator(data.internal[i][n], data.internal[j][n])?;
        let gs_i = state.h_model[i][n] / state.u_pat[i][n];
        let gs_j = state.h_model[j][n] / state.u_pat[j][n];
        rhs_i[n] = -w[n] * z[n] * gs_i * data.internal[j][n] / denom;
        rhs_j[n] = w[n] * z[n] * gs_j * data.internal[i][n] / denom;
    }
    Ok((pat.solve_dual(&rhs_i)?, pat.solve_dual(&rhs_j)?))
}

/// Adjoint solve for one (source, frequency) optical residual, as used
/// inside [`dot_gradient`] (Robin form).
pub fn dot_adjoint_solves(
    state: &ModelState,
    data: &DataSet,
    source: usize,
    freq: usize,
) -> Result<Vec<Complex64>> {
    let mesh = &state.mesh;
    let solver = &state.dot[freq];
    let model = &state.j_model[freq][source];
    let meas = &data.currents[source][freq];
    let len = mesh.boundary_edge_length();
    let nn = mesh.node_count();
    let kappa = match state.bc {
        BoundaryKind::Robin(k) => k,
        BoundaryKind::Dirichlet => {
            return Err(Error::InvalidArgument(
                "per-pair optical adjoint exposed for Robin conditions only".into(),
            ))
        }
    };
    let mut g_dual = vec![Complex64::new(0.0, 0.0); nn];
    for (e, edge) in mesh.boundary_edges.iter().enumerate() {
        if meas[e].norm() < DATA_FLOOR {
            return Err(Error::InvalidData(format!(
                "measured current below floor at detector {e}"
            )));
        }
        let r = (model[e] - meas[e]) / meas[e];
        let factor = -(len / (2.0 * kappa)) * (r.conj() / meas[e]);
        g_dual[edge[0]] += factor;
        g_dual[edge[1]] += factor;
    }
    solver.solve_dual(&g_dual)
}
