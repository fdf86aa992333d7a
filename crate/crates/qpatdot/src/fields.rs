//! Nodal coefficient fields, benchmark phantoms, smoothed initial guesses,
//! and error maps.
//!
//! All three optical coefficients — absorption `σ`, diffusion `γ`, and the
//! photoacoustic efficiency `Γ` — live as one scalar per mesh node. Phantom
//! generators evaluate smooth closed-form functions (or indicator sums) at
//! the node coordinates, so refining the mesh only refines the sampling.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mesh::{self, Mesh};

/// Which coefficient a field represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldName {
    Sigma,
    Gamma,
    Grueneisen,
    Other,
}

impl FieldName {
    pub fn label(&self) -> &'static str {
        match self {
            FieldName::Sigma => "sigma",
            FieldName::Gamma => "gamma",
            FieldName::Grueneisen => "Gamma",
            FieldName::Other => "field",
        }
    }
}

/// A scalar field with one value per mesh node.
#[derive(Debug, Clone)]
pub struct CoefficientField {
    pub mesh: Arc<Mesh>,
    pub values: Vec<f64>,
    pub name: FieldName,
}

impl CoefficientField {
    pub fn new(mesh: Arc<Mesh>, values: Vec<f64>, name: FieldName) -> Result<Self> {
        if values.len() != mesh.node_count() {
            return Err(Error::InvalidArgument(format!(
                "field has {} values for a mesh with {} nodes",
                values.len(),
                mesh.node_count()
            )));
        }
        Ok(Self { mesh, values, name })
    }

    pub fn constant(mesh: Arc<Mesh>, value: f64, name: FieldName) -> Self {
        let values = vec![value; mesh.node_count()];
        Self { mesh, values, name }
    }

    /// Evaluate a function of position at every node.
    pub fn from_fn(mesh: Arc<Mesh>, name: FieldName, f: impl Fn(f64, f64) -> f64) -> Self {
        let values = mesh.nodes.iter().map(|p| f(p[0], p[1])).collect();
        Self { mesh, values, name }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.values.iter().all(|&v| v > 0.0)
    }

    /// Sample onto an `m × m` grid (row-major); see [`mesh::sample_to_grid`].
    pub fn sample_to_grid(&self, m: usize) -> Result<Vec<f64>> {
        mesh::sample_to_grid(&self.mesh, &self.values, m)
    }

    /// Nodewise product with another field on the same mesh.
    pub fn product(&self, other: &CoefficientField, name: FieldName) -> Result<CoefficientField> {
        check_same_mesh(self, other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .collect();
        Ok(CoefficientField {
            mesh: self.mesh.clone(),
            values,
            name,
        })
    }
}

fn check_same_mesh(a: &CoefficientField, b: &CoefficientField) -> Result<()> {
    if !Arc::ptr_eq(&a.mesh, &b.mesh) && a.mesh.n != b.mesh.n {
        return Err(Error::InvalidArgument(
            "fields are defined on different meshes".into(),
        ));
    }
    Ok(())
}

fn rotate(theta: f64, v: [f64; 2]) -> [f64; 2] {
    let (s, c) = theta.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

/// `exp(-|S·R_θ(x-x0)|²/2)` — an anisotropic Gaussian bump with axis scales
/// `S = diag(sx, sy)` applied after rotating the offset by `θ`.
fn rotated_gaussian(x: f64, y: f64, center: [f64; 2], theta: f64, sx: f64, sy: f64) -> f64 {
    let w = rotate(theta, [x - center[0], y - center[1]]);
    let u = sx * w[0];
    let v = sy * w[1];
    (-0.5 * (u * u + v * v)).exp()
}

/// Smooth phantom triple: superpositions of rotated anisotropic Gaussians.
///
/// `σ` and `Γ` each stack two bumps centered at `(0.5, 1.5)` and `(1.5, 0.5)`
/// (rotation `±π/3` for `σ`, `±π/8` for `Γ`, axis scales `(0.25, 4)`); `γ` is
/// a single wide bump of amplitude 0.04 at `(1, 1)` (rotation `π/6`, axis
/// scales `(0.01, 0.1)`). The `+` angle goes with the first bump and `-`
/// with the second.
pub fn phantom_gaussian_mixture(
    mesh: &Arc<Mesh>,
) -> (CoefficientField, CoefficientField, CoefficientField) {
    use std::f64::consts::PI;
    let sigma = CoefficientField::from_fn(mesh.clone(), FieldName::Sigma, |x, y| {
        rotated_gaussian(x, y, [0.5, 1.5], PI / 3.0, 0.25, 4.0)
            + rotated_gaussian(x, y, [1.5, 0.5], -PI / 3.0, 0.25, 4.0)
    });
    let gamma = CoefficientField::from_fn(mesh.clone(), FieldName::Gamma, |x, y| {
        0.04 * rotated_gaussian(x, y, [1.0, 1.0], PI / 6.0, 0.01, 0.1)
    });
    let grueneisen = CoefficientField::from_fn(mesh.clone(), FieldName::Grueneisen, |x, y| {
        rotated_gaussian(x, y, [0.5, 1.5], PI / 8.0, 0.25, 4.0)
            + rotated_gaussian(x, y, [1.5, 0.5], -PI / 8.0, 0.25, 4.0)
    });
    (sigma, gamma, grueneisen)
}

fn in_ball(x: f64, y: f64, center: [f64; 2], r: f64) -> bool {
    let dx = x - center[0];
    let dy = y - center[1];
    dx * dx + dy * dy <= r * r
}

fn in_rect(x: f64, y: f64, x0: f64, x1: f64, y0: f64, y1: f64) -> bool {
    x >= x0 && x <= x1 && y >= y0 && y <= y1
}

/// Discontinuous phantom triple: positive backgrounds with ball and
/// rectangle inclusions.
pub fn phantom_piecewise(
    mesh: &Arc<Mesh>,
) -> (CoefficientField, CoefficientField, CoefficientField) {
    let sigma = CoefficientField::from_fn(mesh.clone(), FieldName::Sigma, |x, y| {
        let mut v = 0.2;
        if in_ball(x, y, [1.0, 1.5], 0.2) {
            v += 0.2;
        }
        if in_ball(x, y, [1.7, 0.4], 0.2) {
            v += 0.2;
        }
        if in_ball(x, y, [0.5, 0.4], 0.2) {
            v += 0.2;
        }
        v
    });
    let gamma = CoefficientField::from_fn(mesh.clone(), FieldName::Gamma, |x, y| {
        let mut v = 0.02;
        if in_rect(x, y, 0.5, 0.8, 0.5, 0.8) {
            v += 0.02;
        }
        if in_rect(x, y, 1.4, 1.7, 1.4, 1.7) {
            v += 0.02;
        }
        if in_rect(x, y, 1.0, 1.8, 0.3, 0.6) {
            v += 0.02;
        }
        v
    });
    let grueneisen = CoefficientField::from_fn(mesh.clone(), FieldName::Grueneisen, |x, y| {
        let mut v = 0.5;
        if in_ball(x, y, [0.5, 1.2], 0.3) {
            v += 0.2;
        }
        if in_ball(x, y, [1.4, 1.6], 0.2) {
            v += 0.3;
        }
        if in_ball(x, y, [1.7, 0.4], 0.2) {
            v += 0.3;
        }
        v
    });
    (sigma, gamma, grueneisen)
}

/// Point-Gaussian phantom pair used by the Γ-sensitivity experiment:
/// `σ = 0.3·exp(-10|x-(0.4,1.5)|²)` and `γ = 0.04·exp(-10|x-(1,1)|²)`.
pub fn phantom_point_gaussians(mesh: &Arc<Mesh>) -> (CoefficientField, CoefficientField) {
    let sigma = CoefficientField::from_fn(mesh.clone(), FieldName::Sigma, |x, y| {
        let dx = x - 0.4;
        let dy = y - 1.5;
        0.3 * (-10.0 * (dx * dx + dy * dy)).exp()
    });
    let gamma = CoefficientField::from_fn(mesh.clone(), FieldName::Gamma, |x, y| {
        let dx = x - 1.0;
        let dy = y - 1.0;
        0.04 * (-10.0 * (dx * dx + dy * dy)).exp()
    });
    (sigma, gamma)
}

/// First efficiency choice for the sensitivity experiment:
/// `Γ₁ = 0.3·exp(-10|x-(1.4,0.6)|²)`.
pub fn sensitivity_grueneisen_bump(mesh: &Arc<Mesh>) -> CoefficientField {
    CoefficientField::from_fn(mesh.clone(), FieldName::Grueneisen, |x, y| {
        let dx = x - 1.4;
        let dy = y - 0.6;
        0.3 * (-10.0 * (dx * dx + dy * dy)).exp()
    })
}

/// Second efficiency choice for the sensitivity experiment: `Γ₂ ≡ 16`.
pub fn sensitivity_grueneisen_constant(mesh: &Arc<Mesh>) -> CoefficientField {
    CoefficientField::constant(mesh.clone(), 16.0, FieldName::Grueneisen)
}

/// Gaussian-smooth a field on its node grid.
///
/// The nodal layout of the structured mesh *is* an `n × n` grid, so the field
/// is convolved in place with a truncated 2D Gaussian kernel of standard
/// deviation `std` grid cells (radius `⌈2·std⌉`, replicate padding at the
/// edges) and the result read back as nodal values. Unit kernel mass means
/// constants pass through unchanged, so strictly positive input stays
/// strictly positive.
pub fn smooth_init(field: &CoefficientField, std: f64) -> Result<CoefficientField> {
    if !(std > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "smoothing width must be positive, got {std}"
        )));
    }
    let n = field.mesh.n;
    let radius = (2.0 * std).ceil() as i64;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for k in -radius..=radius {
        kernel.push((-(k as f64) * (k as f64) / (2.0 * std * std)).exp());
    }
    let total: f64 = kernel.iter().sum();
    for w in &mut kernel {
        *w /= total;
    }

    let clamp = |k: i64| k.clamp(0, n as i64 - 1) as usize;
    // Separable convolution: rows, then columns.
    let src = &field.values;
    let mut tmp = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                let ii = clamp(i as i64 + t as i64 - radius);
                acc += w * src[j * n + ii];
            }
            tmp[j * n + i] = acc;
        }
    }
    let mut out = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                let jj = clamp(j as i64 + t as i64 - radius);
                acc += w * tmp[jj * n + i];
            }
            out[j * n + i] = acc;
        }
    }
    Ok(CoefficientField {
        mesh: field.mesh.clone(),
        values: out,
        name: field.name,
    })
}

/// Nodewise relative error `|recon - truth| / |truth|`.
///
/// `|truth|` is floored at 1e-12 to guard rounding; if more than 1% of the
/// nodes carry an exactly zero truth value the map is meaningless and an
/// error is returned instead.
pub fn relative_error_map(
    recon: &CoefficientField,
    truth: &CoefficientField,
) -> Result<CoefficientField> {
    check_same_mesh(recon, truth)?;
    let zeros = truth.values.iter().filter(|&&v| v == 0.0).count();
    if zeros * 100 > truth.values.len() {
        return Err(Error::InvalidData(format!(
            "truth field is zero at {zeros} of {} nodes",
            truth.values.len()
        )));
    }
    let values = recon
        .values
        .iter()
        .zip(&truth.values)
        .map(|(r, t)| (r - t).abs() / t.abs().max(1e-12))
        .collect();
    Ok(CoefficientField {
        mesh: recon.mesh.clone(),
        values,
        name: FieldName::Other,
    })
}

/// Relative L² error `‖recon - truth‖ / ‖truth‖` under the lumped P1 area
/// quadrature.
pub fn relative_l2_error(recon: &CoefficientField, truth: &CoefficientField) -> Result<f64> {
    check_same_mesh(recon, truth)?;
    let w = mesh::lumped_area_weights(&truth.mesh);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..w.len() {
        let d = recon.values[i] - truth.values[i];
        num += w[i] * d * d;
        den += w[i] * truth.values[i] * truth.values[i];
    }
    Ok((num / den).sqrt())
}

/// Relative L∞ error `max|recon - truth| / max|truth|`.
pub fn relative_linf_error(recon: &CoefficientField, truth: &CoefficientField) -> Result<f64> {
    check_same_mesh(recon, truth)?;
    let num = recon
        .values
        .iter()
        .zip(&truth.values)
        .map(|(r, t)| (r - t).abs())
        .fold(0.0, f64::max);
    let den = truth.values.iter().map(|t| t.abs()).fold(0.0, f64::max);
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_structured_mesh;
    use std::f64::consts::PI;

    fn mesh(n: usize) -> Arc<Mesh> {
        Arc::new(build_structured_mesh(n).unwrap())
    }

    fn eval_at(f: &CoefficientField, x: f64, y: f64) -> f64 {
        mesh::interpolate(&f.mesh, &f.values, x, y)
    }

    #[test]
    fn gaussian_mixture_values() {
        let m = mesh(81);
        let (sigma, gamma, grueneisen) = phantom_gaussian_mixture(&m);
        // γ at its own center: amplitude with zero exponent.
        assert!((eval_at(&gamma, 1.0, 1.0) - 0.04).abs() < 1e-12);
        // σ at the first bump center: 1 plus the tail of the second bump,
        // computed here directly from the formula.
        let tail = rotated_gaussian(0.5, 1.5, [1.5, 0.5], -PI / 3.0, 0.25, 4.0);
        assert!((eval_at(&sigma, 0.5, 1.5) - (1.0 + tail)).abs() < 1e-12);
        assert!(tail < 0.05);
        // Γ at the far corner: two small exponential tails, well below 1.
        let t1 = rotated_gaussian(0.0, 0.0, [0.5, 1.5], PI / 8.0, 0.25, 4.0);
        let t2 = rotated_gaussian(0.0, 0.0, [1.5, 0.5], -PI / 8.0, 0.25, 4.0);
        let corner = grueneisen.values[0];
        assert!((corner - (t1 + t2)).abs() < 1e-15);
        assert!(corner < 1.0 && corner > 0.0);
        for f in [&sigma, &gamma, &grueneisen] {
            assert!(f.is_strictly_positive());
        }
    }

    #[test]
    fn piecewise_values() {
        let m = mesh(81);
        let (sigma, gamma, grueneisen) = phantom_piecewise(&m);
        assert_eq!(eval_at(&sigma, 1.0, 1.5), 0.4);
        assert_eq!(eval_at(&gamma, 0.1, 1.9), 0.02);
        assert_eq!(eval_at(&grueneisen, 1.7, 0.4), 0.8);
        assert_eq!(eval_at(&sigma, 0.0, 0.0), 0.2);
        assert_eq!(eval_at(&gamma, 0.65, 0.65), 0.04);
    }

    #[test]
    fn point_gaussian_values() {
        let m = mesh(41);
        let (sigma, gamma) = phantom_point_gaussians(&m);
        assert!((eval_at(&sigma, 0.4, 1.5) - 0.3).abs() < 1e-12);
        assert!((eval_at(&gamma, 1.0, 1.0) - 0.04).abs() < 1e-12);
        let g2 = sensitivity_grueneisen_constant(&m);
        assert!(g2.values.iter().all(|&v| v == 16.0));
        let g1 = sensitivity_grueneisen_bump(&m);
        assert!((eval_at(&g1, 1.4, 0.6) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn phantoms_are_resolution_independent_samplings() {
        let coarse = mesh(11);
        let fine = mesh(21);
        let (sc, _, _) = phantom_gaussian_mixture(&coarse);
        let (sf, _, _) = phantom_gaussian_mixture(&fine);
        // Every coarse node is also a fine node; values must agree there.
        for (k, p) in coarse.nodes.iter().enumerate() {
            let vf = eval_at(&sf, p[0], p[1]);
            assert!((sc.values[k] - vf).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothing_preserves_constants_and_commutes_with_shifts() {
        let m = mesh(21);
        let c = CoefficientField::constant(m.clone(), 3.25, FieldName::Other);
        let sc = smooth_init(&c, 5.0).unwrap();
        for v in &sc.values {
            assert!((v - 3.25).abs() < 1e-12);
        }
        let (sigma, _, _) = phantom_gaussian_mixture(&m);
        let smoothed = smooth_init(&sigma, 2.0).unwrap();
        let mut shifted = sigma.clone();
        for v in &mut shifted.values {
            *v += 0.7;
        }
        let smoothed_shifted = smooth_init(&shifted, 2.0).unwrap();
        for i in 0..sigma.values.len() {
            assert!((smoothed_shifted.values[i] - smoothed.values[i] - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothing_reduces_spikes_and_preserves_mass_in_the_interior() {
        let m = mesh(31);
        let mut spike = vec![0.0; m.node_count()];
        let center = 15 * m.n + 15;
        spike[center] = 1.0;
        let f = CoefficientField::new(m.clone(), spike, FieldName::Other).unwrap();
        let s = smooth_init(&f, 2.0).unwrap();
        assert!(s.values[center] < 1.0);
        // Reference: direct 2D convolution with the same truncated kernel.
        let std = 2.0f64;
        let radius = (2.0 * std).ceil() as i64;
        let mut kernel = Vec::new();
        for k in -radius..=radius {
            kernel.push((-(k * k) as f64 / (2.0 * std * std)).exp());
        }
        let total: f64 = kernel.iter().sum();
        let w = |k: i64| kernel[(k + radius) as usize] / total;
        let expected = w(0) * w(0);
        assert!((s.values[center] - expected).abs() < 1e-12);
        // Spike far from the boundary: total mass preserved by unit kernel.
        let sum: f64 = s.values.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tiny_smoothing_width_is_near_identity() {
        let m = mesh(15);
        let (sigma, _, _) = phantom_gaussian_mixture(&m);
        let s = smooth_init(&sigma, 1e-4).unwrap();
        for i in 0..sigma.values.len() {
            assert!((s.values[i] - sigma.values[i]).abs() < 1e-12);
        }
        assert!(smooth_init(&sigma, 0.0).is_err());
        assert!(smooth_init(&sigma, -1.0).is_err());
    }

    #[test]
    fn error_map_cases() {
        let m = mesh(5);
        let truth = CoefficientField::new(
            m.clone(),
            (0..m.node_count()).map(|k| 1.0 + k as f64).collect(),
            FieldName::Sigma,
        )
        .unwrap();
        let same = relative_error_map(&truth, &truth).unwrap();
        assert!(same.values.iter().all(|&v| v == 0.0));

        let mut scaled = truth.clone();
        for v in &mut scaled.values {
            *v *= 1.1;
        }
        let map = relative_error_map(&scaled, &truth).unwrap();
        for v in &map.values {
            assert!((v - 0.1).abs() < 1e-12);
        }

        // Mixed case on three nodes: recon (1,1,5) against truth (1,2,4).
        let m2 = mesh(2);
        let t = CoefficientField::new(m2.clone(), vec![1.0, 2.0, 4.0, 1.0], FieldName::Other)
            .unwrap();
        let r = CoefficientField::new(m2.clone(), vec![1.0, 1.0, 5.0, 1.0], FieldName::Other)
            .unwrap();
        let e = relative_error_map(&r, &t).unwrap();
        assert_eq!(&e.values[..3], &[0.0, 0.5, 0.25]);

        let zero = CoefficientField::constant(m2, 0.0, FieldName::Other);
        assert!(relative_error_map(&r, &zero).is_err());
    }

    #[test]
    fn norm_helpers() {
        let m = mesh(9);
        let (sigma, _, _) = phantom_gaussian_mixture(&m);
        assert_eq!(relative_l2_error(&sigma, &sigma).unwrap(), 0.0);
        let mut r = sigma.clone();
        for v in &mut r.values {
            *v *= 1.05;
        }
        let l2 = relative_l2_error(&r, &sigma).unwrap();
        assert!((l2 - 0.05).abs() < 1e-12);
        let li = relative_linf_error(&r, &sigma).unwrap();
        assert!((li - 0.05).abs() < 1e-12);
    }
}
