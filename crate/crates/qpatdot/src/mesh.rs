//! Structured P1 triangulation of the square domain `[0,2] × [0,2]`.
//!
//! The mesh is a uniform `n × n` grid of nodes, each grid cell split into two
//! right triangles along the lower-left to upper-right diagonal. Nodes are
//! numbered row-major from `(0,0)`, so node `(i,j)` (column `i`, row `j`) has
//! index `j*n + i`. This makes indexing reproducible across runs and file
//! formats.
//!
//! Boundary edges are stored as an ordered, counterclockwise closed loop
//! starting at the origin corner, which is what the boundary-data machinery
//! (sources, detectors, arc-length positions) builds on.

use crate::error::{Error, Result};

/// Side length of the square domain.
pub const DOMAIN_SIDE: f64 = 2.0;

/// Immutable triangulated mesh of `[0,2]²`.
///
/// Immutable after construction; safe to share across worker threads.
#[derive(Debug, Clone)]
pub struct Mesh {
    /// Nodes per side.
    pub n: usize,
    /// Grid spacing `2/(n-1)`.
    pub h: f64,
    /// Node coordinates, row-major from `(0,0)`.
    pub nodes: Vec<[f64; 2]>,
    /// Triangles as counterclockwise node-index triples.
    pub triangles: Vec<[usize; 3]>,
    /// Boundary edges `(a, b)` tracing the boundary counterclockwise,
    /// starting at node 0 = `(0,0)`.
    pub boundary_edges: Vec<[usize; 2]>,
    /// Boundary nodes in loop order (`boundary_edges[k][0]`).
    pub boundary_nodes: Vec<usize>,
    /// `is_boundary[v]` for every node.
    pub is_boundary: Vec<bool>,
}

impl Mesh {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    /// Length of every boundary edge (uniform grid: all equal `h`).
    pub fn boundary_edge_length(&self) -> f64 {
        self.h
    }

    /// Total boundary length (8 for the 2×2 square).
    pub fn boundary_length(&self) -> f64 {
        self.h * self.boundary_edges.len() as f64
    }

    /// Signed area of triangle `t` (positive for counterclockwise).
    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let pa = self.nodes[a];
        let pb = self.nodes[b];
        let pc = self.nodes[c];
        0.5 * ((pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]))
    }

    /// Arc-length position of boundary node `boundary_nodes[k]` along the
    /// counterclockwise loop, measured from `(0,0)`.
    pub fn boundary_node_arc(&self, k: usize) -> f64 {
        self.h * k as f64
    }

    /// Arc-length position of the midpoint of boundary edge `k`.
    pub fn boundary_edge_mid_arc(&self, k: usize) -> f64 {
        self.h * (k as f64 + 0.5)
    }

    /// Midpoint coordinates of boundary edge `k`.
    pub fn boundary_edge_midpoint(&self, k: usize) -> [f64; 2] {
        let [a, b] = self.boundary_edges[k];
        let pa = self.nodes[a];
        let pb = self.nodes[b];
        [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]
    }

    /// Outward unit normal of boundary edge `k`.
    pub fn boundary_edge_normal(&self, k: usize) -> [f64; 2] {
        let [a, b] = self.boundary_edges[k];
        let pa = self.nodes[a];
        let pb = self.nodes[b];
        // Counterclockwise loop: outward normal is the tangent rotated by -90°.
        let tx = (pb[0] - pa[0]) / self.h;
        let ty = (pb[1] - pa[1]) / self.h;
        [ty, -tx]
    }

    /// Map an arc-length position (mod 8) to a point on the boundary polyline.
    pub fn boundary_point_at_arc(&self, s: f64) -> [f64; 2] {
        let total = self.boundary_length();
        let mut s = s % total;
        if s < 0.0 {
            s += total;
        }
        let side = DOMAIN_SIDE;
        if s < side {
            [s, 0.0]
        } else if s < 2.0 * side {
            [side, s - side]
        } else if s < 3.0 * side {
            [side - (s - 2.0 * side), side]
        } else {
            [0.0, side - (s - 3.0 * side)]
        }
    }
}

/// Build the structured mesh with `n` nodes per side.
///
/// Counts: `n²` nodes, `2(n-1)²` triangles, `4(n-1)` boundary edges.
pub fn build_structured_mesh(n: usize) -> Result<Mesh> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "mesh resolution must be at least 2 nodes per side, got {n}"
        )));
    }
    let h = DOMAIN_SIDE / (n - 1) as f64;
    let mut nodes = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            nodes.push([i as f64 * h, j as f64 * h]);
        }
    }

    let idx = |i: usize, j: usize| j * n + i;
    let mut triangles = Vec::with_capacity(2 * (n - 1) * (n - 1));
    for j in 0..n - 1 {
        for i in 0..n - 1 {
            let a = idx(i, j);
            let b = idx(i + 1, j);
            let c = idx(i + 1, j + 1);
            let d = idx(i, j + 1);
            // Split along the a-c diagonal.
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }

    // Counterclockwise boundary loop from (0,0): bottom, right, top, left.
    let mut boundary_edges = Vec::with_capacity(4 * (n - 1));
    for i in 0..n - 1 {
        boundary_edges.push([idx(i, 0), idx(i + 1, 0)]);
    }
    for j in 0..n - 1 {
        boundary_edges.push([idx(n - 1, j), idx(n - 1, j + 1)]);
    }
    for i in (1..n).rev() {
        boundary_edges.push([idx(i, n - 1), idx(i - 1, n - 1)]);
    }
    for j in (1..n).rev() {
        boundary_edges.push([idx(0, j), idx(0, j - 1)]);
    }

    let boundary_nodes: Vec<usize> = boundary_edges.iter().map(|e| e[0]).collect();
    let mut is_boundary = vec![false; n * n];
    for &v in &boundary_nodes {
        is_boundary[v] = true;
    }

    Ok(Mesh {
        n,
        h,
        nodes,
        triangles,
        boundary_edges,
        boundary_nodes,
        is_boundary,
    })
}

/// Locate the triangle containing `(x, y)` and return `(triangle, barycentric)`.
///
/// Points outside the domain are clamped to it.
pub fn locate(mesh: &Mesh, x: f64, y: f64) -> (usize, [f64; 3]) {
    let n = mesh.n;
    let h = mesh.h;
    let x = x.clamp(0.0, DOMAIN_SIDE);
    let y = y.clamp(0.0, DOMAIN_SIDE);
    let mut ci = (x / h) as usize;
    let mut cj = (y / h) as usize;
    if ci > n - 2 {
        ci = n - 2;
    }
    if cj > n - 2 {
        cj = n - 2;
    }
    let xi = x / h - ci as f64;
    let eta = y / h - cj as f64;
    let cell = cj * (n - 1) + ci;
    // Lower triangle (a,b,c) holds points with eta <= xi.
    if eta <= xi {
        let t = 2 * cell;
        // phi_a = 1-xi, phi_b = xi-eta, phi_c = eta
        (t, [1.0 - xi, xi - eta, eta])
    } else {
        let t = 2 * cell + 1;
        // Triangle (a,c,d): phi_a = 1-eta, phi_c = xi, phi_d = eta-xi
        (t, [1.0 - eta, xi, eta - xi])
    }
}

/// Evaluate the P1 interpolant of nodal `values` at `(x, y)`.
///
/// Written as `v_a + φ_b(v_b - v_a) + φ_c(v_c - v_a)` so constant fields
/// reproduce exactly.
pub fn interpolate(mesh: &Mesh, values: &[f64], x: f64, y: f64) -> f64 {
    let (t, bary) = locate(mesh, x, y);
    let [a, b, c] = mesh.triangles[t];
    values[a] + bary[1] * (values[b] - values[a]) + bary[2] * (values[c] - values[a])
}

/// Lumped area weights: `w[i] = Σ_{triangles t ∋ i} area(t)/3`.
///
/// `Σ_i w[i] f[i]` is the exact integral of the P1 interpolant of `f`,
/// and the weights sum to the domain area 4.
pub fn lumped_area_weights(mesh: &Mesh) -> Vec<f64> {
    let mut w = vec![0.0; mesh.node_count()];
    for t in 0..mesh.triangle_count() {
        let third = mesh.triangle_area(t) / 3.0;
        for &v in &mesh.triangles[t] {
            w[v] += third;
        }
    }
    w
}

/// Sample nodal `values` onto an `m × m` uniform grid over the domain,
/// row-major from `(0,0)`, via P1 barycentric interpolation.
///
/// Grid points that coincide with mesh nodes copy the nodal value exactly.
pub fn sample_to_grid(mesh: &Mesh, values: &[f64], m: usize) -> Result<Vec<f64>> {
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "grid resolution must be at least 2, got {m}"
        )));
    }
    if values.len() != mesh.node_count() {
        return Err(Error::InvalidArgument(format!(
            "field has {} values for a mesh with {} nodes",
            values.len(),
            mesh.node_count()
        )));
    }
    let gh = DOMAIN_SIDE / (m - 1) as f64;
    let n = mesh.n;
    let mut out = Vec::with_capacity(m * m);
    for j in 0..m {
        for i in 0..m {
            let x = i as f64 * gh;
            let y = j as f64 * gh;
            let gi = x / mesh.h;
            let gj = y / mesh.h;
            let ri = gi.round();
            let rj = gj.round();
            if (gi - ri).abs() <= 1e-12 && (gj - rj).abs() <= 1e-12 {
                let ni = (ri as usize).min(n - 1);
                let nj = (rj as usize).min(n - 1);
                out.push(values[nj * n + ni]);
            } else {
                out.push(interpolate(mesh, values, x, y));
            }
        }
    }
    Ok(out)
}

/// Export the mesh as plain text (node table, then triangle table).
pub fn export_text(mesh: &Mesh) -> String {
    let mut out = String::new();
    out.push_str("# nodes: index,x,y\n");
    for (k, p) in mesh.nodes.iter().enumerate() {
        out.push_str(&format!("{},{:.16e},{:.16e}\n", k, p[0], p[1]));
    }
    out.push_str("# triangles: index,i,j,k\n");
    for (k, t) in mesh.triangles.iter().enumerate() {
        out.push_str(&format!("{},{},{},{}\n", k, t[0], t[1], t[2]));
    }
    out
}
