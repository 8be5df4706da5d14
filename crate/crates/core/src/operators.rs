//! Discrete base operators on periodic grid fields.
//!
//! g-fields are stored velocity-row major: entry (i, j) sits at
//! `data[i * nx + j]` for velocity node v_i and spatial index j.

use crate::error::{Error, Result};
use crate::grid::PhaseGrid;

/// Microscopic field g(v_i, x_{j+1/2}).
#[derive(Debug, Clone, PartialEq)]
pub struct FieldG {
    pub nv: usize,
    pub nx: usize,
    pub data: Vec<f64>,
}

impl FieldG {
    pub fn zeros(nv: usize, nx: usize) -> Self {
        FieldG { nv, nx, data: vec![0.0; nv * nx] }
    }

    /// Samples f(v_i, x) with x taken from the face positions.
    pub fn from_fn(grid: &PhaseGrid, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut data = Vec::with_capacity(grid.len_g());
        for &v in &grid.v_nodes {
            for &x in &grid.x_faces {
                data.push(f(v, x));
            }
        }
        FieldG { nv: grid.nv, nx: grid.nx, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.nx..(i + 1) * self.nx]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.nx..(i + 1) * self.nx]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.nx + j]
    }

    pub fn check(&self, grid: &PhaseGrid) -> Result<()> {
        if self.nv != grid.nv || self.nx != grid.nx || self.data.len() != grid.len_g() {
            return Err(Error::Dimension(format!(
                "g-field {}x{} does not match grid {}x{}",
                self.nv, self.nx, grid.nv, grid.nx
            )));
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Macroscopic field ρ(x_j).
#[derive(Debug, Clone, PartialEq)]
pub struct FieldRho {
    pub data: Vec<f64>,
}

impl FieldRho {
    pub fn zeros(nx: usize) -> Self {
        FieldRho { data: vec![0.0; nx] }
    }

    /// Samples f at the cell centers.
    pub fn from_fn(grid: &PhaseGrid, f: impl Fn(f64) -> f64) -> Self {
        FieldRho { data: grid.x_centers.iter().map(|&x| f(x)).collect() }
    }

    pub fn check(&self, grid: &PhaseGrid) -> Result<()> {
        if self.data.len() != grid.nx {
            return Err(Error::Dimension(format!(
                "rho-field of length {} does not match nx = {}",
                self.data.len(),
                grid.nx
            )));
        }
        Ok(())
    }
}

/// Base operators available to the dictionary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OperatorTag {
    Identity,
    Advection,
    Projection,
    GradX,
    LapX,
    Square,
    Gauss,
}

impl OperatorTag {
    pub const ALL: [OperatorTag; 7] = [
        OperatorTag::Identity,
        OperatorTag::Advection,
        OperatorTag::Projection,
        OperatorTag::GradX,
        OperatorTag::LapX,
        OperatorTag::Square,
        OperatorTag::Gauss,
    ];

    pub fn is_linear(self) -> bool {
        !matches!(self, OperatorTag::Square | OperatorTag::Gauss)
    }

    /// Short name used in configs and checkpoints.
    pub fn name(self) -> &'static str {
        match self {
            OperatorTag::Identity => "identity",
            OperatorTag::Advection => "advection",
            OperatorTag::Projection => "projection",
            OperatorTag::GradX => "gradx",
            OperatorTag::LapX => "lapx",
            OperatorTag::Square => "square",
            OperatorTag::Gauss => "gauss",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        OperatorTag::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown operator '{s}'")))
    }

    /// Wraps an inner expression in this operator's notation.
    pub fn render(self, inner: &str) -> String {
        match self {
            OperatorTag::Identity => inner.to_string(),
            OperatorTag::Advection => format!("v∂x({inner})"),
            OperatorTag::Projection => format!("P({inner})"),
            OperatorTag::GradX => format!("∂x({inner})"),
            OperatorTag::LapX => format!("∂xx({inner})"),
            OperatorTag::Square => format!("({inner})²"),
            OperatorTag::Gauss => format!("exp(-({inner})²)"),
        }
    }
}

/// Staggered location of a field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Loc {
    Center,
    Face,
}

/// Concrete stencil realizing a tag at a given location.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Prim {
    Identity,
    /// Upwind advection split by sign(v), order 1 or 2.
    Upwind(u8),
    /// v·(u_{j+1} − u_j)/dx: centers to faces.
    StaggerToFace,
    /// v·(u_j − u_{j−1})/dx: faces to centers.
    StaggerToCenter,
    Projection,
    GradX,
    LapX,
    Square,
    Gauss,
}

/// Chooses the stencil for `tag` applied to data at `loc` inside an
/// equation whose unknown lives at `target`.
///
/// Advection of data sitting off the target location uses the two-point
/// staggered difference and moves it onto the target; otherwise it is
/// upwinded. All other operators keep the location.
pub fn resolve(tag: OperatorTag, loc: Loc, target: Loc, order: u8) -> (Prim, Loc) {
    match tag {
        OperatorTag::Advection => match (loc, target) {
            (Loc::Center, Loc::Face) => (Prim::StaggerToFace, Loc::Face),
            (Loc::Face, Loc::Center) => (Prim::StaggerToCenter, Loc::Center),
            _ => (Prim::Upwind(order), loc),
        },
        OperatorTag::Identity => (Prim::Identity, loc),
        OperatorTag::Projection => (Prim::Projection, loc),
        OperatorTag::GradX => (Prim::GradX, loc),
        OperatorTag::LapX => (Prim::LapX, loc),
        OperatorTag::Square => (Prim::Square, loc),
        OperatorTag::Gauss => (Prim::Gauss, loc),
    }
}

#[inline]
fn wrap_prev(j: usize, n: usize, k: usize) -> usize {
    (j + n - k) % n
}

#[inline]
fn wrap_next(j: usize, n: usize, k: usize) -> usize {
    (j + k) % n
}

fn row_diff_back(u: &[f64], out: &mut [f64], s: f64) {
    let n = u.len();
    out[0] = s * (u[0] - u[n - 1]);
    for j in 1..n {
        out[j] = s * (u[j] - u[j - 1]);
    }
}

fn row_diff_fwd(u: &[f64], out: &mut [f64], s: f64) {
    let n = u.len();
    for j in 0..n - 1 {
        out[j] = s * (u[j + 1] - u[j]);
    }
    out[n - 1] = s * (u[0] - u[n - 1]);
}

impl Prim {
    pub fn is_linear(self) -> bool {
        !matches!(self, Prim::Square | Prim::Gauss)
    }

    /// out = op(u). Both slices have length nv·nx.
    pub fn apply(self, grid: &PhaseGrid, u: &[f64], out: &mut [f64]) {
        let nx = grid.nx;
        let dx = grid.dx;
        match self {
            Prim::Identity => out.copy_from_slice(u),
            Prim::Upwind(order) => {
                for (i, &v) in grid.v_nodes.iter().enumerate() {
                    let r = &u[i * nx..(i + 1) * nx];
                    let o = &mut out[i * nx..(i + 1) * nx];
                    if order >= 2 {
                        let s = v / (2.0 * dx);
                        for j in 0..nx {
                            o[j] = if v > 0.0 {
                                s * (3.0 * r[j] - 4.0 * r[wrap_prev(j, nx, 1)] + r[wrap_prev(j, nx, 2)])
                            } else {
                                s * (-3.0 * r[j] + 4.0 * r[wrap_next(j, nx, 1)] - r[wrap_next(j, nx, 2)])
                            };
                        }
                    } else if v > 0.0 {
                        row_diff_back(r, o, v / dx);
                    } else {
                        row_diff_fwd(r, o, v / dx);
                    }
                }
            }
            Prim::StaggerToFace => {
                for (i, &v) in grid.v_nodes.iter().enumerate() {
                    row_diff_fwd(&u[i * nx..(i + 1) * nx], &mut out[i * nx..(i + 1) * nx], v / dx);
                }
            }
            Prim::StaggerToCenter => {
                for (i, &v) in grid.v_nodes.iter().enumerate() {
                    row_diff_back(&u[i * nx..(i + 1) * nx], &mut out[i * nx..(i + 1) * nx], v / dx);
                }
            }
            Prim::Projection => {
                let (first, rest) = out.split_at_mut(nx);
                average_rows(grid, u, first);
                for chunk in rest.chunks_mut(nx) {
                    chunk.copy_from_slice(first);
                }
            }
            Prim::GradX => {
                let s = 1.0 / (2.0 * dx);
                for (r, o) in u.chunks(nx).zip(out.chunks_mut(nx)) {
                    for j in 0..nx {
                        o[j] = s * (r[wrap_next(j, nx, 1)] - r[wrap_prev(j, nx, 1)]);
                    }
                }
            }
            Prim::LapX => {
                let s = 1.0 / (dx * dx);
                for (r, o) in u.chunks(nx).zip(out.chunks_mut(nx)) {
                    for j in 0..nx {
                        o[j] = s * (r[wrap_next(j, nx, 1)] - 2.0 * r[j] + r[wrap_prev(j, nx, 1)]);
                    }
                }
            }
            Prim::Square => {
                for (o, &a) in out.iter_mut().zip(u) {
                    *o = a * a;
                }
            }
            Prim::Gauss => {
                for (o, &a) in out.iter_mut().zip(u) {
                    *o = (-a * a).exp();
                }
            }
        }
    }

    /// out = opᵀ(λ) for linear stencils (adjoint w.r.t. the plain dot product).
    pub fn apply_transpose(self, grid: &PhaseGrid, lam: &[f64], out: &mut [f64]) -> Result<()> {
        let nx = grid.nx;
        let dx = grid.dx;
        match self {
            Prim::Identity => out.copy_from_slice(lam),
            Prim::Upwind(order) => {
                for (i, &v) in grid.v_nodes.iter().enumerate() {
                    let r = &lam[i * nx..(i + 1) * nx];
                    let o = &mut out[i * nx..(i + 1) * nx];
                    if order >= 2 {
                        let s = v / (2.0 * dx);
                        for j in 0..nx {
                            o[j] = if v > 0.0 {
                                s * (3.0 * r[j] - 4.0 * r[wrap_next(j, nx, 1)] + r[wrap_next(j, nx, 2)])
                            } else {
                                s * (-3.0 * r[j] + 4.0 * r[wrap_prev(j, nx, 1)] - r[wrap_prev(j, nx, 2)])
                            };
                        }
                    } else if v > 0.0 {
                        // transpose of backward difference: −forward difference
                        row_diff_fwd(r, o, -v / dx);
                    } else {
                        row_diff_back(r, o, -v / dx);
                    }
                }
            }
            Prim::StaggerToFace => {
                for (i, &v) in grid.v_nodes.iter().enumerate() {
                    row_diff_back(&lam[i * nx..(i + 1) * nx], &mut out[i * nx..(i + 1) * nx], -v / dx);
                }
            }
            Prim::StaggerToCenter => {
                for (i, &v) in grid.v_nodes.iter().enumerate() {
                    row_diff_fwd(&lam[i * nx..(i + 1) * nx], &mut out[i * nx..(i + 1) * nx], -v / dx);
                }
            }
            Prim::Projection => {
                // Pᵀλ: row l gets (w_l/2)·Σ_i λ_i
                let mut col = vec![0.0; nx];
                for r in lam.chunks(nx) {
                    for (c, &a) in col.iter_mut().zip(r) {
                        *c += a;
                    }
                }
                for (l, o) in out.chunks_mut(nx).enumerate() {
                    let h = 0.5 * grid.v_weights[l];
                    for (oj, &c) in o.iter_mut().zip(&col) {
                        *oj = h * c;
                    }
                }
            }
            Prim::GradX => {
                let s = 1.0 / (2.0 * dx);
                for (r, o) in lam.chunks(nx).zip(out.chunks_mut(nx)) {
                    for j in 0..nx {
                        o[j] = s * (r[wrap_prev(j, nx, 1)] - r[wrap_next(j, nx, 1)]);
                    }
                }
            }
            Prim::LapX => Prim::LapX.apply(grid, lam, out),
            Prim::Square | Prim::Gauss => {
                return Err(Error::Config("nonlinear operators have no transpose".into()));
            }
        }
        Ok(())
    }
}

/// out_j = ½ Σ_i w_i u_{i,j}.
pub fn average_rows(grid: &PhaseGrid, u: &[f64], out: &mut [f64]) {
    let nx = grid.nx;
    out.iter_mut().for_each(|o| *o = 0.0);
    for (i, r) in u.chunks(nx).enumerate() {
        let h = 0.5 * grid.v_weights[i];
        for (o, &a) in out.iter_mut().zip(r) {
            *o += h * a;
        }
    }
}

fn unary(grid: &PhaseGrid, u: &FieldG, p: Prim) -> Result<FieldG> {
    u.check(grid)?;
    let mut out = FieldG::zeros(grid.nv, grid.nx);
    p.apply(grid, &u.data, &mut out.data);
    Ok(out)
}

/// Identity operator.
pub fn apply_identity(u: &FieldG) -> FieldG {
    u.clone()
}

/// v·∂x with the upwind stencil split by sign(v): positive velocities use
/// the backward difference, negative velocities the forward one.
pub fn advect_upwind(u: &FieldG, grid: &PhaseGrid, order: u8) -> Result<FieldG> {
    if !(1..=2).contains(&order) {
        return Err(Error::Config(format!("advection order {order} not in 1..=2")));
    }
    unary(grid, u, Prim::Upwind(order))
}

/// Staggered advection moving data from centers to faces (`Loc::Face`) or
/// from faces to centers (`Loc::Center`).
pub fn advect_staggered(u: &FieldG, grid: &PhaseGrid, to: Loc) -> Result<FieldG> {
    let p = match to {
        Loc::Face => Prim::StaggerToFace,
        Loc::Center => Prim::StaggerToCenter,
    };
    unary(grid, u, p)
}

/// Velocity average broadcast to every velocity row.
pub fn project(u: &FieldG, grid: &PhaseGrid) -> Result<FieldG> {
    unary(grid, u, Prim::Projection)
}

/// Central first difference on every velocity row.
pub fn grad_x_g(u: &FieldG, grid: &PhaseGrid) -> Result<FieldG> {
    unary(grid, u, Prim::GradX)
}

/// Three-point second difference on every velocity row.
pub fn lap_x_g(u: &FieldG, grid: &PhaseGrid) -> Result<FieldG> {
    unary(grid, u, Prim::LapX)
}

/// Central first difference of a ρ-field.
pub fn grad_x(u: &FieldRho, grid: &PhaseGrid) -> Result<FieldRho> {
    u.check(grid)?;
    let mut out = FieldRho::zeros(grid.nx);
    let g1 = PhaseGrid { nv: 1, v_nodes: vec![0.0], v_weights: vec![2.0], ..grid.clone() };
    Prim::GradX.apply(&g1, &u.data, &mut out.data);
    Ok(out)
}

/// Three-point second difference of a ρ-field.
pub fn lap_x(u: &FieldRho, grid: &PhaseGrid) -> Result<FieldRho> {
    u.check(grid)?;
    let mut out = FieldRho::zeros(grid.nx);
    let g1 = PhaseGrid { nv: 1, v_nodes: vec![0.0], v_weights: vec![2.0], ..grid.clone() };
    Prim::LapX.apply(&g1, &u.data, &mut out.data);
    Ok(out)
}

/// Copies ρ into every velocity row.
pub fn lift(rho: &FieldRho, grid: &PhaseGrid) -> Result<FieldG> {
    rho.check(grid)?;
    let mut out = FieldG::zeros(grid.nv, grid.nx);
    for r in out.data.chunks_mut(grid.nx) {
        r.copy_from_slice(&rho.data);
    }
    Ok(out)
}

/// Velocity average ⟨u⟩ as a ρ-field.
pub fn collapse(u: &FieldG, grid: &PhaseGrid) -> Result<FieldRho> {
    u.check(grid)?;
    let mut out = FieldRho::zeros(grid.nx);
    average_rows(grid, &u.data, &mut out.data);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn transposes_match_dot_products() {
        let grid = make_grid(9, 4).unwrap();
        let n = grid.len_g();
        let u: Vec<f64> = (0..n).map(|k| ((k * 7919) % 23) as f64 / 7.0 - 1.3).collect();
        let l: Vec<f64> = (0..n).map(|k| ((k * 104729) % 31) as f64 / 9.0 - 1.1).collect();
        for p in [
            Prim::Identity,
            Prim::Upwind(1),
            Prim::Upwind(2),
            Prim::StaggerToFace,
            Prim::StaggerToCenter,
            Prim::Projection,
            Prim::GradX,
            Prim::LapX,
        ] {
            let mut au = vec![0.0; n];
            let mut atl = vec![0.0; n];
            p.apply(&grid, &u, &mut au);
            p.apply_transpose(&grid, &l, &mut atl).unwrap();
            let lhs = dot(&l, &au);
            let rhs = dot(&atl, &u);
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{p:?}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn nonlinear_has_no_transpose() {
        let grid = make_grid(4, 2).unwrap();
        let mut out = vec![0.0; 8];
        assert!(Prim::Square.apply_transpose(&grid, &[0.0; 8], &mut out).is_err());
    }

    #[test]
    fn resolve_locations() {
        use OperatorTag::*;
        assert_eq!(resolve(Advection, Loc::Center, Loc::Face, 1), (Prim::StaggerToFace, Loc::Face));
        assert_eq!(resolve(Advection, Loc::Face, Loc::Center, 1), (Prim::StaggerToCenter, Loc::Center));
        assert_eq!(resolve(Advection, Loc::Face, Loc::Face, 2), (Prim::Upwind(2), Loc::Face));
        assert_eq!(resolve(Projection, Loc::Center, Loc::Face, 1), (Prim::Projection, Loc::Center));
    }

    #[test]
    fn tag_names_round_trip() {
        for t in OperatorTag::ALL {
            assert_eq!(OperatorTag::parse(t.name()).unwrap(), t);
        }
        assert!(OperatorTag::parse("curl").is_err());
    }
}
