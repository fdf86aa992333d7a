//! Forward models and synthetic data generation.
//!
//! Two discrete problems share one assembly:
//!
//! - the frequency-domain optical problem
//!   `i·(ω/c)·û − ∇·γ∇û + σû = 0`, `û + κγ∂û/∂n = g` — solved per source
//!   and per modulation frequency, measured as the boundary current
//!   `J = γ∂û/∂n` at the detectors;
//! - the stationary photoacoustic problem (the `ω = 0` time-integrated
//!   limit) `−∇·γ∇U + σU = 0`, `U + κγ∂U/∂n = G` — solved per source,
//!   measured as the internal map `H = Γ·σ·U`.
//!
//! Boundary currents are recovered by the Robin identity `J = (g − u)/κ`
//! when `κ > 0` (exact at the discrete level) and by residual-based
//! consistent flux when `κ = 0`: the boundary rows of the free operator
//! applied to the solution, scaled by the lumped boundary mass. Both choices
//! make the discrete absorption/flux balance
//! `∫ H/Γ dx = ∮ J⁰ dS` close to solver precision on clean data.

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::assembly::{
    apply_free_complex, apply_free_real, assemble_complex, assemble_real, BoundaryKind,
    InteriorMap,
};
use crate::error::{Error, Result};
use crate::linalg::{solve_checked, BandedLdl, BandedMatrix};
use crate::mesh::Mesh;

/// Relative residual accepted from the direct solver.
pub const SOLVE_TOL: f64 = 1e-10;

/// A boundary illumination: scaled Gaussian bump over a baseline,
/// `g(x) = baseline + amplitude·exp(−|x − center|²/width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSpec {
    pub center: [f64; 2],
    pub baseline: f64,
    pub amplitude: f64,
    pub width: f64,
}

impl SourceSpec {
    /// Standard profile: baseline 1, amplitude 5, width 0.02.
    pub fn standard(center: [f64; 2]) -> Self {
        Self {
            center,
            baseline: 1.0,
            amplitude: 5.0,
            width: 0.02,
        }
    }

    /// Euclidean-distance profile value at a point.
    pub fn value(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.center[0];
        let dy = y - self.center[1];
        self.baseline + self.amplitude * (-(dx * dx + dy * dy) / self.width).exp()
    }

    /// Discrete boundary data: per-edge (midpoint) and per-boundary-node values.
    pub fn boundary_source(&self, mesh: &Mesh) -> BoundarySource {
        let edge_values = (0..mesh.boundary_edges.len())
            .map(|k| {
                let m = mesh.boundary_edge_midpoint(k);
                self.value(m[0], m[1])
            })
            .collect();
        let node_values = mesh
            .boundary_nodes
            .iter()
            .map(|&v| {
                let p = mesh.nodes[v];
                self.value(p[0], p[1])
            })
            .collect();
        BoundarySource {
            edge_values,
            node_values,
        }
    }
}

/// Discrete boundary data for one source: values at boundary-edge midpoints
/// (the detector positions, used for Robin loads) and at boundary nodes in
/// loop order (used for Dirichlet imposition).
#[derive(Debug, Clone)]
pub struct BoundarySource {
    pub edge_values: Vec<f64>,
    pub node_values: Vec<f64>,
}

/// Place `count` standard sources evenly along the boundary loop, starting
/// at the origin corner.
pub fn evenly_spaced_sources(mesh: &Mesh, count: usize) -> Vec<SourceSpec> {
    let total = mesh.boundary_length();
    (0..count)
        .map(|k| {
            let s = k as f64 * total / count as f64;
            SourceSpec::standard(mesh.boundary_point_at_arc(s))
        })
        .collect()
}

/// Stationary (real, `ω = 0`) solver with a shared factorization.
pub struct StationarySolver {
    pub mesh: Arc<Mesh>,
    pub bc: BoundaryKind,
    gamma: Vec<f64>,
    sigma: Vec<f64>,
    weights: Vec<f64>,
    matrix: BandedMatrix<f64>,
    ldl: BandedLdl<f64>,
    interior: Option<InteriorMap>,
}

impl StationarySolver {
    pub fn new(mesh: &Arc<Mesh>, gamma: &[f64], sigma: &[f64], bc: BoundaryKind) -> Result<Self> {
        let sys = assemble_real(mesh, gamma, sigma, bc)?;
        let ldl = sys.matrix.factor()?;
        Ok(Self {
            mesh: mesh.clone(),
            bc,
            gamma: gamma.to_vec(),
            sigma: sigma.to_vec(),
            weights: sys.weights,
            matrix: sys.matrix,
            ldl,
            interior: sys.interior,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Solve for one boundary source; returns the full nodal solution.
    pub fn solve(&self, bs: &BoundarySource) -> Result<Vec<f64>> {
        let mesh = &self.mesh;
        match self.bc {
            BoundaryKind::Robin(kappa) => {
                let mut b = vec![0.0; mesh.node_count()];
                let half = mesh.boundary_edge_length() / 2.0;
                for (k, e) in mesh.boundary_edges.iter().enumerate() {
                    let load = bs.edge_values[k] * half / kappa;
                    b[e[0]] += load;
                    b[e[1]] += load;
                }
                solve_checked(&self.matrix, &self.ldl, &b, SOLVE_TOL)
            }
            BoundaryKind::Dirichlet => {
                let map = self.interior.as_ref().expect("interior map");
                let mut ext = vec![0.0; mesh.node_count()];
                for (k, &v) in mesh.boundary_nodes.iter().enumerate() {
                    ext[v] = bs.node_values[k];
                }
                let free = apply_free_real(mesh, &self.gamma, &self.sigma, &self.weights, &ext);
                let rhs: Vec<f64> = map.nodes.iter().map(|&v| -free[v]).collect();
                let xi = solve_checked(&self.matrix, &self.ldl, &rhs, SOLVE_TOL)?;
                let mut full = ext;
                for (ci, &v) in map.nodes.iter().enumerate() {
                    full[v] = xi[ci];
                }
                Ok(full)
            }
        }
    }

    /// Solve against a dual (right-hand-side) vector over all nodes, with
    /// homogeneous boundary data: Robin keeps the full system, Dirichlet
    /// solves the interior block and pins the boundary to zero.
    pub fn solve_dual(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        match self.bc {
            BoundaryKind::Robin(_) => solve_checked(&self.matrix, &self.ldl, rhs, SOLVE_TOL),
            BoundaryKind::Dirichlet => {
                let map = self.interior.as_ref().expect("interior map");
                let ri: Vec<f64> = map.nodes.iter().map(|&v| rhs[v]).collect();
                let xi = solve_checked(&self.matrix, &self.ldl, &ri, SOLVE_TOL)?;
                let mut full = vec![0.0; rhs.len()];
                for (ci, &v) in map.nodes.iter().enumerate() {
                    full[v] = xi[ci];
                }
                Ok(full)
            }
        }
    }

    /// Boundary current at the detectors (boundary-edge midpoints).
    pub fn boundary_current(&self, bs: &BoundarySource, u: &[f64]) -> Vec<f64> {
        match self.bc {
            BoundaryKind::Robin(kappa) => robin_current(&self.mesh, bs, u, kappa),
            BoundaryKind::Dirichlet => {
                let free = apply_free_real(&self.mesh, &self.gamma, &self.sigma, &self.weights, u);
                residual_current(&self.mesh, &free)
            }
        }
    }
}

/// Frequency-domain (complex) solver with a shared factorization.
pub struct FrequencySolver {
    pub mesh: Arc<Mesh>,
    pub bc: BoundaryKind,
    pub omega_c: f64,
    gamma: Vec<f64>,
    sigma: Vec<f64>,
    weights: Vec<f64>,
    matrix: BandedMatrix<Complex64>,
    ldl: BandedLdl<Complex64>,
    interior: Option<InteriorMap>,
}

impl FrequencySolver {
    pub fn new(
        mesh: &Arc<Mesh>,
        gamma: &[f64],
        sigma: &[f64],
        bc: BoundaryKind,
        omega_c: f64,
    ) -> Result<Self> {
        let sys = assemble_complex(mesh, gamma, sigma, bc, omega_c)?;
        let ldl = sys.matrix.factor()?;
        Ok(Self {
            mesh: mesh.clone(),
            bc,
            omega_c,
            gamma: gamma.to_vec(),
            sigma: sigma.to_vec(),
            weights: sys.weights,
            matrix: sys.matrix,
            ldl,
            interior: sys.interior,
        })
    }

    pub fn solve(&self, bs: &BoundarySource) -> Result<Vec<Complex64>> {
        let mesh = &self.mesh;
        match self.bc {
            BoundaryKind::Robin(kappa) => {
                let mut b = vec![Complex64::new(0.0, 0.0); mesh.node_count()];
                let half = mesh.boundary_edge_length() / 2.0;
                for (k, e) in mesh.boundary_edges.iter().enumerate() {
                    let load = Complex64::new(bs.edge_values[k] * half / kappa, 0.0);
                    b[e[0]] += load;
                    b[e[1]] += load;
                }
                solve_checked(&self.matrix, &self.ldl, &b, SOLVE_TOL)
            }
            BoundaryKind::Dirichlet => {
                let map = self.interior.as_ref().expect("interior map");
                let mut ext = vec![Complex64::new(0.0, 0.0); mesh.node_count()];
                for (k, &v) in mesh.boundary_nodes.iter().enumerate() {
                    ext[v] = Complex64::new(bs.node_values[k], 0.0);
                }
                let free = apply_free_complex(
                    mesh,
                    &self.gamma,
                    &self.sigma,
                    &self.weights,
                    self.omega_c,
                    &ext,
                );
                let rhs: Vec<Complex64> = map.nodes.iter().map(|&v| -free[v]).collect();
                let xi = solve_checked(&self.matrix, &self.ldl, &rhs, SOLVE_TOL)?;
                let mut full = ext;
                for (ci, &v) in map.nodes.iter().enumerate() {
                    full[v] = xi[ci];
                }
                Ok(full)
            }
        }
    }

    /// Solve against a dual vector with homogeneous boundary data.
    pub fn solve_dual(&self, rhs: &[Complex64]) -> Result<Vec<Complex64>> {
        match self.bc {
            BoundaryKind::Robin(_) => solve_checked(&self.matrix, &self.ldl, rhs, SOLVE_TOL),
            BoundaryKind::Dirichlet => {
                let map = self.interior.as_ref().expect("interior map");
                let ri: Vec<Complex64> = map.nodes.iter().map(|&v| rhs[v]).collect();
                let xi = solve_checked(&self.matrix, &self.ldl, &ri, SOLVE_TOL)?;
                let mut full = vec![Complex64::new(0.0, 0.0); rhs.len()];
                for (ci, &v) in map.nodes.iter().enumerate() {
                    full[v] = xi[ci];
                }
                Ok(full)
            }
        }
    }

    /// Free-operator action `(K(γ) + M(σ) + i·ωc·M_w)·v` for this solver's
    /// coefficients.
    pub fn apply_free(&self, v: &[Complex64]) -> Vec<Complex64> {
        apply_free_complex(
            &self.mesh,
            &self.gamma,
            &self.sigma,
            &self.weights,
            self.omega_c,
            v,
        )
    }

    /// Boundary current at the detectors.
    pub fn boundary_current(&self, bs: &BoundarySource, u: &[Complex64]) -> Vec<Complex64> {
        match self.bc {
            BoundaryKind::Robin(kappa) => {
                let mut out = Vec::with_capacity(self.mesh.boundary_edges.len());
                for (k, e) in self.mesh.boundary_edges.iter().enumerate() {
                    let ubar = (u[e[0]] + u[e[1]]).scale_re(0.5);
                    out.push((Complex64::new(bs.edge_values[k], 0.0) - ubar).scale_re(1.0 / kappa));
                }
                out
            }
            BoundaryKind::Dirichlet => {
                let free = apply_free_complex(
                    &self.mesh,
                    &self.gamma,
                    &self.sigma,
                    &self.weights,
                    self.omega_c,
                    u,
                );
                let h = self.mesh.boundary_edge_length();
                let nodal: Vec<Complex64> = self
                    .mesh
                    .boundary_nodes
                    .iter()
                    .map(|&v| free[v].scale_re(1.0 / h))
                    .collect();
                edge_average_complex(&nodal)
            }
        }
    }
}

trait ScaleRe {
    fn scale_re(self, s: f64) -> Self;
}
impl ScaleRe for Complex64 {
    fn scale_re(self, s: f64) -> Self {
        Complex64::new(self.re * s, self.im * s)
    }
}

/// Robin-identity current `J_e = (g_e − ū_e)/κ` at edge midpoints.
pub fn robin_current(mesh: &Mesh, bs: &BoundarySource, u: &[f64], kappa: f64) -> Vec<f64> {
    mesh.boundary_edges
        .iter()
        .enumerate()
        .map(|(k, e)| (bs.edge_values[k] - 0.5 * (u[e[0]] + u[e[1]])) / kappa)
        .collect()
}

/// Residual-based consistent flux: nodal `r_b / h` averaged to edge midpoints.
/// `free` is the free operator applied to the solution.
pub fn residual_current(mesh: &Mesh, free: &[f64]) -> Vec<f64> {
    let h = mesh.boundary_edge_length();
    let nodal: Vec<f64> = mesh.boundary_nodes.iter().map(|&v| free[v] / h).collect();
    edge_average(&nodal)
}

/// Average per-boundary-node values (loop order) onto edge midpoints.
pub fn edge_average(nodal: &[f64]) -> Vec<f64> {
    let nb = nodal.len();
    (0..nb).map(|k| 0.5 * (nodal[k] + nodal[(k + 1) % nb])).collect()
}

fn edge_average_complex(nodal: &[Complex64]) -> Vec<Complex64> {
    let nb = nodal.len();
    (0..nb)
        .map(|k| (nodal[k] + nodal[(k + 1) % nb]).scale_re(0.5))
        .collect()
}

/// Average per-edge (midpoint) values onto boundary nodes (loop order):
/// node `k` sits between edges `k-1` and `k`.
pub fn node_average_from_edges(values: &[f64]) -> Vec<f64> {
    let ne = values.len();
    (0..ne)
        .map(|k| 0.5 * (values[(k + ne - 1) % ne] + values[k]))
        .collect()
}

/// Internal photoacoustic map `H = Γ·σ·U`, nodewise.
pub fn internal_data(grueneisen: &[f64], sigma: &[f64], u: &[f64]) -> Vec<f64> {
    grueneisen
        .iter()
        .zip(sigma)
        .zip(u)
        .map(|((g, s), uu)| g * s * uu)
        .collect()
}

/// Discrete absorption/flux balance residual
/// `∫ H/Γ dx − ∮ J⁰ dS`, with the P1 lumped area quadrature for the volume
/// term and the edge (midpoint) rule for the flux term.
pub fn compatibility_residual(
    mesh: &Mesh,
    h_map: &[f64],
    grueneisen: &[f64],
    j_zero: &[Complex64],
) -> Result<f64> {
    if grueneisen.iter().any(|&g| !(g > 0.0)) {
        return Err(Error::InvalidArgument(
            "efficiency coefficient must be strictly positive for the balance check".into(),
        ));
    }
    let w = crate::mesh::lumped_area_weights(mesh);
    let volume: f64 = (0..h_map.len()).map(|i| w[i] * h_map[i] / grueneisen[i]).sum();
    let len = mesh.boundary_edge_length();
    let flux: f64 = j_zero.iter().map(|j| len * j.re).sum();
    Ok(volume - flux)
}

/// One synthetic measurement set: boundary currents per source and
/// frequency, internal maps per source.
#[derive(Debug, Clone)]
pub struct DataSet {
    pub mesh_n: usize,
    pub kappa: f64,
    pub omega_c: Vec<f64>,
    pub sources: Vec<SourceSpec>,
    /// `currents[source][freq][detector]`.
    pub currents: Vec<Vec<Vec<Complex64>>>,
    /// `internal[source][node]`.
    pub internal: Vec<Vec<f64>>,
}

impl DataSet {
    pub fn detector_count(&self) -> usize {
        self.currents
            .first()
            .and_then(|s| s.first())
            .map_or(0, |f| f.len())
    }

    /// Index of the zero-frequency entry.
    pub fn zero_frequency_index(&self) -> Result<usize> {
        self.omega_c
            .iter()
            .position(|&w| w == 0.0)
            .ok_or_else(|| Error::InvalidData("dataset has no zero-frequency entry".into()))
    }
}

/// Generate clean synthetic data for the given truth coefficients.
///
/// Sources are spread evenly along the boundary; detectors are all
/// boundary-edge midpoints. Every (source, frequency) optical solve shares
/// one factorization per frequency; solves run in parallel per source.
pub fn generate_dataset(
    mesh: &Arc<Mesh>,
    sigma: &[f64],
    gamma: &[f64],
    grueneisen: &[f64],
    kappa: f64,
    omega_c: &[f64],
    n_sources: usize,
) -> Result<DataSet> {
    let bc = BoundaryKind::from_kappa(kappa)?;
    let sources = evenly_spaced_sources(mesh, n_sources);
    let boundary: Vec<BoundarySource> = sources.iter().map(|s| s.boundary_source(mesh)).collect();

    // Photoacoustic pass: one real factorization, all sources.
    let pat = StationarySolver::new(mesh, gamma, sigma, bc)?;
    let internal: Vec<Vec<f64>> = boundary
        .par_iter()
        .map(|bs| pat.solve(bs).map(|u| internal_data(grueneisen, sigma, &u)))
        .collect::<Result<_>>()?;
    for h in &internal {
        if h.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidData(
                "internal map is not strictly positive; sources must be positive".into(),
            ));
        }
    }

    // Optical pass: one complex factorization per frequency.
    let mut currents = vec![Vec::with_capacity(omega_c.len()); n_sources];
    for &w in omega_c {
        let solver = FrequencySolver::new(mesh, gamma, sigma, bc, w)?;
        let per_source: Vec<Vec<Complex64>> = boundary
            .par_iter()
            .map(|bs| {
                solver
                    .solve(bs)
                    .map(|u| solver.boundary_current(bs, &u))
            })
            .collect::<Result<_>>()?;
        for (j, row) in per_source.into_iter().enumerate() {
            currents[j].push(row);
        }
    }

    Ok(DataSet {
        mesh_n: mesh.n,
        kappa,
        omega_c: omega_c.to_vec(),
        sources,
        currents,
        internal,
    })
}

/// Multiplicative noise: every datum `d` becomes `d·(1 + level·ξ)` with
/// `ξ ~ U[-1, 1]` i.i.d., drawn in a fixed order (currents by source,
/// frequency, detector; then internal maps by source, node) so a seed fully
/// determines the result.
pub fn add_noise(data: &DataSet, level: f64, seed: u64) -> Result<DataSet> {
    use rand::{Rng, SeedableRng};
    if level < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "noise level must be nonnegative, got {level}"
        )));
    }
    let mut out = data.clone();
    if level == 0.0 {
        return Ok(out);
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut draw = move || -> f64 { rng.gen_range(-1.0..=1.0) };
    for source in &mut out.currents {
        for freq in source {
            for j in freq {
                *j = j.scale_re(1.0 + level * draw());
            }
        }
    }
    for h in &mut out.internal {
        for v in h {
            *v *= 1.0 + level * draw();
        }
    }
    Ok(out)
}

/// Which forward solves a [`ModelState`] should carry.
#[derive(Debug, Clone, Copy)]
pub struct ModelParts {
    pub photoacoustic: bool,
    pub optical: bool,
}

impl ModelParts {
    pub fn all() -> Self {
        Self {
            photoacoustic: true,
            optical: true,
        }
    }
    pub fn photoacoustic_only() -> Self {
        Self {
            photoacoustic: true,
            optical: false,
        }
    }
}

/// All forward solves for one coefficient iterate, shared by objective and
/// gradient evaluation.
pub struct ModelState {
    pub mesh: Arc<Mesh>,
    pub bc: BoundaryKind,
    pub boundary: Vec<BoundarySource>,
    /// Efficiency field used to form the model internal maps, if any.
    pub grueneisen: Option<Vec<f64>>,
    /// Stationary solver (present when photoacoustic solves were requested).
    pub pat: Option<StationarySolver>,
    /// `u_pat[source][node]`.
    pub u_pat: Vec<Vec<f64>>,
    /// `h_model[source][node]` — only when an efficiency field was supplied.
    pub h_model: Vec<Vec<f64>>,
    /// One frequency solver per modulation frequency.
    pub dot: Vec<FrequencySolver>,
    /// `u_dot[freq][source][node]`.
    pub u_dot: Vec<Vec<Vec<Complex64>>>,
    /// `j_model[freq][source][detector]`.
    pub j_model: Vec<Vec<Vec<Complex64>>>,
}

impl ModelState {
    pub fn new(
        mesh: &Arc<Mesh>,
        gamma: &[f64],
        sigma: &[f64],
        grueneisen: Option<&[f64]>,
        data: &DataSet,
        parts: ModelParts,
    ) -> Result<Self> {
        let bc = BoundaryKind::from_kappa(data.kappa)?;
        let boundary: Vec<BoundarySource> =
            data.sources.iter().map(|s| s.boundary_source(mesh)).collect();

        let mut pat = None;
        let mut u_pat = Vec::new();
        let mut h_model = Vec::new();
        if parts.photoacoustic {
            let solver = StationarySolver::new(mesh, gamma, sigma, bc)?;
            u_pat = boundary
                .par_iter()
                .map(|bs| solver.solve(bs))
                .collect::<Result<_>>()?;
            if let Some(g) = grueneisen {
                h_model = u_pat.iter().map(|u| internal_data(g, sigma, u)).collect();
            }
            pat = Some(solver);
        }

        let mut dot = Vec::new();
        let mut u_dot = Vec::new();
        let mut j_model = Vec::new();
        if parts.optical {
            for &w in &data.omega_c {
                let solver = FrequencySolver::new(mesh, gamma, sigma, bc, w)?;
                let us: Vec<Vec<Complex64>> = boundary
                    .par_iter()
                    .map(|bs| solver.solve(bs))
                    .collect::<Result<_>>()?;
                let js: Vec<Vec<Complex64>> = us
                    .iter()
                    .zip(&boundary)
                    .map(|(u, bs)| solver.boundary_current(bs, u))
                    .collect();
                dot.push(solver);
                u_dot.push(us);
                j_model.push(js);
            }
        }

        Ok(Self {
            mesh: mesh.clone(),
            bc,
            boundary,
            grueneisen: grueneisen.map(|g| g.to_vec()),
            pat,
            u_pat,
            h_model,
            dot,
            u_dot,
            j_model,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_structured_mesh;

    fn mesh(n: usize) -> Arc<Mesh> {
        Arc::new(build_structured_mesh(n).unwrap())
    }

    fn constant_source(c: f64) -> SourceSpec {
        SourceSpec {
            center: [0.0, 0.0],
            baseline: c,
            amplitude: 0.0,
            width: 0.02,
        }
    }

    #[test]
    fn constant_data_zero_absorption_gives_constant_solution() {
        let m = mesh(9);
        let gamma = vec![0.03; m.node_count()];
        let sigma = vec![0.0; m.node_count()];
        let solver =
            StationarySolver::new(&m, &gamma, &sigma, BoundaryKind::Robin(0.2)).unwrap();
        let bs = constant_source(2.5).boundary_source(&m);
        let u = solver.solve(&bs).unwrap();
        for v in &u {
            assert!((v - 2.5).abs() < 1e-11);
        }
        // Constant solution with matching data: zero boundary current.
        let j = solver.boundary_current(&bs, &u);
        for v in &j {
            assert!(v.abs() < 1e-10);
        }
    }

    #[test]
    fn zero_source_gives_zero_solution() {
        let m = mesh(9);
        let gamma = vec![0.03; m.node_count()];
        let sigma = vec![0.2; m.node_count()];
        for bc in [BoundaryKind::Robin(0.2), BoundaryKind::Dirichlet] {
            let solver = StationarySolver::new(&m, &gamma, &sigma, bc).unwrap();
            let bs = constant_source(0.0).boundary_source(&m);
            let u = solver.solve(&bs).unwrap();
            for v in &u {
                assert!(v.abs() < 1e-12);
            }
        }
    }

    /// Separable boundary data `A e^{λx} + B e^{-λx}` with `λ = √(σ/γ)` is an
    /// exact solution of the continuum problem; the discrete solution must
    /// converge to it at second order, and the recovered current on the left
    /// edge must approach `-γλ(A - B)`.
    #[test]
    fn manufactured_exponential_solution_converges() {
        let gamma0 = 0.5f64;
        let sigma0 = 2.0f64;
        let lam = (sigma0 / gamma0).sqrt();
        let (a, b) = (1.0, 0.5);
        let exact = |x: f64| a * (lam * x).exp() + b * (-lam * x).exp();
        let mut errors = Vec::new();
        let mut flux_errors = Vec::new();
        for n in [9usize, 17, 33] {
            let m = mesh(n);
            let gamma = vec![gamma0; m.node_count()];
            let sigma = vec![sigma0; m.node_count()];
            let solver =
                StationarySolver::new(&m, &gamma, &sigma, BoundaryKind::Dirichlet).unwrap();
            let edge_values = (0..m.boundary_edges.len())
                .map(|k| exact(m.boundary_edge_midpoint(k)[0]))
                .collect();
            let node_values = m
                .boundary_nodes
                .iter()
                .map(|&v| exact(m.nodes[v][0]))
                .collect();
            let bs = BoundarySource {
                edge_values,
                node_values,
            };
            let u = solver.solve(&bs).unwrap();
            let err = m
                .nodes
                .iter()
                .zip(&u)
                .map(|(p, v)| (v - exact(p[0])).abs())
                .fold(0.0, f64::max);
            errors.push(err);

            // Left edge runs over arc positions in [6, 8): x = 0 there.
            // Corner-adjacent detectors are excluded: the nodal residual at a
            // corner mixes the fluxes of both incident sides, so those two
            // midpoint values do not converge pointwise.
            let j = solver.boundary_current(&bs, &u);
            let expect = -gamma0 * lam * (a - b);
            let ne = m.boundary_edges.len();
            let left = (3 * ne / 4 + 1)..(ne - 1);
            let ferr = left
                .map(|k| (j[k] - expect).abs())
                .fold(0.0, f64::max);
            flux_errors.push(ferr);
        }
        // Second-order interior convergence.
        assert!(errors[1] / errors[0] < 0.35, "{errors:?}");
        assert!(errors[2] / errors[1] < 0.35, "{errors:?}");
        // Flux converges at first order or better.
        assert!(flux_errors[2] < flux_errors[0], "{flux_errors:?}");
        assert!(flux_errors[2] / flux_errors[1] < 0.75, "{flux_errors:?}");
    }

    #[test]
    fn robin_flux_satisfies_the_discrete_weak_identity() {
        let m = mesh(17);
        let gamma: Vec<f64> = m.nodes.iter().map(|p| 0.03 + 0.01 * p[0]).collect();
        let sigma: Vec<f64> = m.nodes.iter().map(|p| 0.2 + 0.05 * p[1]).collect();
        let kappa = 0.2;
        let solver =
            StationarySolver::new(&m, &gamma, &sigma, BoundaryKind::Robin(kappa)).unwrap();
        let src = SourceSpec::standard([1.0, 0.0]);
        let bs = src.boundary_source(&m);
        let u = solver.solve(&bs).unwrap();
        // The Robin current is the algebraic identity J = (g - u)/kappa.
        let j_robin = solver.boundary_current(&bs, &u);
        for (k, e) in m.boundary_edges.iter().enumerate() {
            let expect = (bs.edge_values[k] - 0.5 * (u[e[0]] + u[e[1]])) / kappa;
            assert_eq!(j_robin[k], expect);
        }
        // Weak-form identity at every boundary node: the free-operator
        // residual equals the Robin boundary terms of the solved system.
        let w = crate::mesh::lumped_area_weights(&m);
        let free = apply_free_real(&m, &gamma, &sigma, &w, &u);
        let h = m.boundary_edge_length();
        for (kb, &b) in m.boundary_nodes.iter().enumerate() {
            let _ = kb;
            let mut robin_terms = 0.0;
            for (k, e) in m.boundary_edges.iter().enumerate() {
                if e[0] == b || e[1] == b {
                    let other = if e[0] == b { e[1] } else { e[0] };
                    robin_terms +=
                        (bs.edge_values[k] * h / 2.0 - h / 6.0 * (2.0 * u[b] + u[other])) / kappa;
                }
            }
            assert!(
                (free[b] - robin_terms).abs() < 1e-10 * (1.0 + free[b].abs()),
                "node {b}: {} vs {}",
                free[b],
                robin_terms
            );
        }
        // Away from the under-resolved source peak the two flux recoveries
        // agree; near it they smear the profile differently.
        let j_res = residual_current(&m, &free);
        let ne = m.boundary_edges.len();
        for k in ne / 4 + 1..ne / 2 - 1 {
            assert!(
                (j_robin[k] - j_res[k]).abs() < 0.15 * j_robin[k].abs().max(0.05),
                "detector {k}: robin {} vs residual {}",
                j_robin[k],
                j_res[k]
            );
        }
    }

    #[test]
    fn zero_frequency_optical_solution_matches_stationary() {
        let m = mesh(11);
        let gamma: Vec<f64> = m.nodes.iter().map(|p| 0.02 + 0.01 * p[1]).collect();
        let sigma: Vec<f64> = m.nodes.iter().map(|p| 0.3 + 0.1 * p[0]).collect();
        for bc in [BoundaryKind::Robin(0.2), BoundaryKind::Dirichlet] {
            let stat = StationarySolver::new(&m, &gamma, &sigma, bc).unwrap();
            let freq = FrequencySolver::new(&m, &gamma, &sigma, bc, 0.0).unwrap();
            let bs = SourceSpec::standard([0.5, 0.0]).boundary_source(&m);
            let u = stat.solve(&bs).unwrap();
            let uc = freq.solve(&bs).unwrap();
            for v in 0..u.len() {
                assert!((uc[v].re - u[v]).abs() < 1e-12);
                assert!(uc[v].im.abs() < 1e-13);
            }
        }
    }

    #[test]
    fn internal_map_is_nodewise_product() {
        let m = mesh(5);
        let g = vec![2.0; m.node_count()];
        let s = vec![0.5; m.node_count()];
        let u = vec![3.0; m.node_count()];
        let h = internal_data(&g, &s, &u);
        assert!(h.iter().all(|&v| v == 3.0));
        let mut s2 = s.clone();
        s2[7] = 0.0;
        let h2 = internal_data(&g, &s2, &u);
        assert_eq!(h2[7], 0.0);
        //

        let (sig, gam, gru) = crate::fields::phantom_gaussian_mixture(&m);
        let _ = gam;
        let u: Vec<f64> = (0..m.node_count()).map(|k| 1.0 + k as f64 * 0.01).collect();
        let h = internal_data(&gru.values, &sig.values, &u);
        for i in 0..h.len() {
            assert_eq!(h[i], gru.values[i] * sig.values[i] * u[i]);
        }
    }

    #[test]
    fn absorption_flux_balance_closes_on_clean_robin_data() {
        let m = mesh(17);
        let (sigma, gamma, grueneisen) = crate::fields::phantom_gaussian_mixture(&m);
        let data = generate_dataset(
            &m,
            &sigma.values,
            &gamma.values,
            &grueneisen.values,
            0.2,
            &[0.0, 2e-7],
            3,
        )
        .unwrap();
        let w0 = data.zero_frequency_index().unwrap();
        for j in 0..data.sources.len() {
            let res = compatibility_residual(
                &m,
                &data.internal[j],
                &grueneisen.values,
                &data.currents[j][w0],
            )
            .unwrap();
            let volume: f64 = {
                let w = crate::mesh::lumped_area_weights(&m);
                (0..data.internal[j].len())
                    .map(|i| w[i] * data.internal[j][i] / grueneisen.values[i])
                    .sum()
            };
            assert!(
                res.abs() <= 1e-10 * volume,
                "source {j}: residual {res:.3e} vs volume {volume:.3e}"
            );

            // Linearity: doubling H shifts the residual by the volume term.
            let doubled: Vec<f64> = data.internal[j].iter().map(|v| 2.0 * v).collect();
            let res2 = compatibility_residual(
                &m,
                &doubled,
                &grueneisen.values,
                &data.currents[j][w0],
            )
            .unwrap();
            assert!((res2 - (res + volume)).abs() < 1e-9 * volume);
        }
    }

    #[test]
    fn balance_is_trivially_zero_without_absorption() {
        let m = mesh(9);
        let gamma = vec![0.03; m.node_count()];
        let sigma = vec![0.0; m.node_count()];
        let gru = vec![1.0; m.node_count()];
        let solver =
            StationarySolver::new(&m, &gamma, &sigma, BoundaryKind::Robin(0.2)).unwrap();
        let bs = constant_source(1.0).boundary_source(&m);
        let u = solver.solve(&bs).unwrap();
        let h = internal_data(&gru, &sigma, &u);
        let j: Vec<Complex64> = solver
            .boundary_current(&bs, &u)
            .iter()
            .map(|&v| Complex64::new(v, 0.0))
            .collect();
        let res = compatibility_residual(&m, &h, &gru, &j).unwrap();
        assert!(res.abs() < 1e-10);
    }

    #[test]
    fn dataset_counts_and_determinism() {
        let m = mesh(9);
        let (sigma, gamma, grueneisen) = crate::fields::phantom_gaussian_mixture(&m);
        let freqs = [0.0, 2e-7];
        let data = generate_dataset(
            &m,
            &sigma.values,
            &gamma.values,
            &grueneisen.values,
            0.2,
            &freqs,
            2,
        )
        .unwrap();
        assert_eq!(data.sources.len(), 2);
        assert_eq!(data.currents.len(), 2);
        assert_eq!(data.currents[0].len(), 2);
        assert_eq!(data.currents[0][0].len(), m.boundary_edges.len());
        assert_eq!(data.internal.len(), 2);
        assert_eq!(data.internal[0].len(), m.node_count());

        let single = generate_dataset(
            &m,
            &sigma.values,
            &gamma.values,
            &grueneisen.values,
            0.2,
            &[0.0],
            1,
        )
        .unwrap();
        assert_eq!(single.currents.len(), 1);
        assert_eq!(single.currents[0].len(), 1);
        assert_eq!(single.internal.len(), 1);

        let n1 = add_noise(&data, 0.05, 42).unwrap();
        let n2 = add_noise(&data, 0.05, 42).unwrap();
        for j in 0..n1.currents.len() {
            for i in 0..n1.currents[j].len() {
                assert_eq!(n1.currents[j][i], n2.currents[j][i]);
            }
            assert_eq!(n1.internal[j], n2.internal[j]);
        }
    }

    #[test]
    fn noise_level_bounds_and_identity() {
        let m = mesh(9);
        let (sigma, gamma, grueneisen) = crate::fields::phantom_gaussian_mixture(&m);
        let data = generate_dataset(
            &m,
            &sigma.values,
            &gamma.values,
            &grueneisen.values,
            0.2,
            &[0.0],
            2,
        )
        .unwrap();
        let same = add_noise(&data, 0.0, 1).unwrap();
        assert_eq!(same.internal, data.internal);
        let noisy = add_noise(&data, 0.05, 7).unwrap();
        let mut max_rel: f64 = 0.0;
        for j in 0..data.internal.len() {
            for i in 0..data.internal[j].len() {
                max_rel = max_rel.max((noisy.internal[j][i] / data.internal[j][i] - 1.0).abs());
            }
            for f in 0..data.currents[j].len() {
                for d in 0..data.currents[j][f].len() {
                    let ratio = noisy.currents[j][f][d] / data.currents[j][f][d];
                    max_rel = max_rel.max((ratio - Complex64::new(1.0, 0.0)).norm());
                }
            }
        }
        assert!(max_rel <= 0.05 + 1e-12);
        assert!(max_rel > 0.04, "noise should come close to its bound");
        assert!(add_noise(&data, -0.1, 1).is_err());
    }

    #[test]
    fn noise_draws_have_zero_mean() {
        // One synthetic dataset with a million unit entries exercises the
        // generator directly: the empirical mean of (noisy - 1)/level must
        // sit within three standard errors of zero.
        let data = DataSet {
            mesh_n: 2,
            kappa: 0.2,
            omega_c: vec![0.0],
            sources: vec![SourceSpec::standard([0.0, 0.0])],
            currents: vec![vec![vec![Complex64::new(1.0, 0.0); 1_000_000]]],
            internal: vec![vec![1.0; 4]],
        };
        let noisy = add_noise(&data, 0.05, 12345).unwrap();
        let n = 1_000_000f64;
        let mean: f64 = noisy.currents[0][0]
            .iter()
            .map(|z| (z.re - 1.0) / 0.05)
            .sum::<f64>()
            / n;
        // Var(U[-1,1]) = 1/3.
        let stderr = (1.0f64 / 3.0).sqrt() / n.sqrt();
        assert!(mean.abs() < 3.0 * stderr, "mean {mean:.3e} vs {stderr:.3e}");
    }

    #[test]
    fn solution_responds_continuously_to_coefficients() {
        let m = mesh(11);
        let (sigma, gamma, _) = crate::fields::phantom_gaussian_mixture(&m);
        let bc = BoundaryKind::Robin(0.2);
        let bs = SourceSpec::standard([1.0, 0.0]).boundary_source(&m);
        let base = StationarySolver::new(&m, &gamma.values, &sigma.values, bc)
            .unwrap()
            .solve(&bs)
            .unwrap();
        let bumped: Vec<f64> = gamma.values.iter().map(|g| g * 1.01).collect();
        let pert = StationarySolver::new(&m, &bumped, &sigma.values, bc)
            .unwrap()
            .solve(&bs)
            .unwrap();
        let rel = base
            .iter()
            .zip(&pert)
            .map(|(a, b)| (a - b).abs() / a.abs().max(1e-30))
            .fold(0.0, f64::max);
        assert!(rel > 0.0 && rel < 0.1, "1% coefficient change moved u by {rel}");
    }
}
