//! Reference solver for the micro-macro system
//!
//!   ∂t ρ = −∂x⟨v g⟩ − σ^A ρ + G
//!   ∂t g = −(1/ε)(I−⟨⟩)(v∂x g) − (1/ε²) v∂x ρ − (σ^S/ε²) g − σ^A g
//!
//! on the staggered periodic mesh, advanced with IMEX-ARS(2,2,2), plus
//! dataset subsampling and the KDS1 binary format.
//!
//! Coefficient arrays are index-aligned: entry j multiplies ρ_j and the
//! g-values of face j+1/2.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{make_grid, PhaseGrid};
use crate::operators::{average_rows, FieldG, FieldRho, Prim};

/// ARS(2,2,2) constants.
pub fn ars_gamma() -> f64 {
    1.0 - std::f64::consts::SQRT_2 / 2.0
}

pub fn ars_delta() -> f64 {
    1.0 - 1.0 / (2.0 * ars_gamma())
}

/// Explicit tableau Ã (3×3, first stage trivial).
pub fn ars_explicit() -> [[f64; 3]; 3] {
    let (g, d) = (ars_gamma(), ars_delta());
    [[0.0, 0.0, 0.0], [g, 0.0, 0.0], [d, 1.0 - d, 0.0]]
}

/// Implicit tableau A.
pub fn ars_implicit() -> [[f64; 3]; 3] {
    let g = ars_gamma();
    [[0.0, 0.0, 0.0], [0.0, g, 0.0], [0.0, 1.0 - g, g]]
}

/// Physical parameters and initial data.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicsSpec {
    pub epsilon: f64,
    pub sigma_s: FieldRho,
    pub sigma_a: FieldRho,
    pub source_g: FieldRho,
    pub rho0: FieldRho,
    pub g0: FieldG,
}

impl PhysicsSpec {
    /// Default well-prepared data: ρ0 = 1 + ½ sin(2πx) and g0 = −(v/σ^S)∂xρ0
    /// made mean-free, with the given coefficient functions.
    pub fn well_prepared(
        grid: &PhaseGrid,
        epsilon: f64,
        sigma_s: impl Fn(f64) -> f64,
        sigma_a: impl Fn(f64) -> f64,
        source: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        use std::f64::consts::PI;
        let sigma_s = FieldRho::from_fn(grid, &sigma_s);
        let rho0 = FieldRho::from_fn(grid, |x| 1.0 + 0.5 * (2.0 * PI * x).sin());
        let nx = grid.nx;
        let mut g0 = FieldG::zeros(grid.nv, nx);
        for (i, &v) in grid.v_nodes.iter().enumerate() {
            for j in 0..nx {
                let x = grid.x_faces[j];
                let drho = PI * (2.0 * PI * x).cos();
                g0.data[i * nx + j] = -v / sigma_s.data[j] * drho;
            }
        }
        remove_mean(grid, &mut g0);
        let spec = PhysicsSpec {
            epsilon,
            sigma_s,
            sigma_a: FieldRho::from_fn(grid, sigma_a),
            source_g: FieldRho::from_fn(grid, source),
            rho0,
            g0,
        };
        spec.validate(grid)?;
        Ok(spec)
    }

    pub fn validate(&self, grid: &PhaseGrid) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::Config(format!("epsilon {} outside (0,1]", self.epsilon)));
        }
        for f in [&self.sigma_s, &self.sigma_a, &self.source_g, &self.rho0] {
            f.check(grid)?;
        }
        self.g0.check(grid)?;
        if self.sigma_s.data.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("sigma_s must be strictly positive".into()));
        }
        if self.sigma_a.data.iter().any(|&s| s < 0.0) {
            return Err(Error::Config("sigma_a must be non-negative".into()));
        }
        let mut m = vec![0.0; grid.nx];
        average_rows(grid, &self.g0.data, &mut m);
        let drift = m.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        if drift > 1e-12 {
            return Err(Error::Config(format!("initial g is not mean-free (max |<g0>| = {drift:e})")));
        }
        Ok(())
    }
}

/// Subtracts the velocity average from every row.
pub fn remove_mean(grid: &PhaseGrid, g: &mut FieldG) {
    let mut m = vec![0.0; grid.nx];
    average_rows(grid, &g.data, &mut m);
    for r in g.data.chunks_mut(grid.nx) {
        for (a, b) in r.iter_mut().zip(&m) {
            *a -= b;
        }
    }
}

/// Paired fields at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct KineticState {
    pub g: FieldG,
    pub rho: FieldRho,
}

struct Workspace {
    tmp: Vec<f64>,
    tmp2: Vec<f64>,
    col: Vec<f64>,
}

/// Explicit g-terms: −(1/ε)(I−⟨⟩)(v∂x g) − (1/ε²) v∂x ρ − σ^A g.
fn explicit_g(grid: &PhaseGrid, spec: &PhysicsSpec, g: &[f64], rho: &[f64], out: &mut [f64], ws: &mut Workspace) {
    let nx = grid.nx;
    let eps = spec.epsilon;
    Prim::Upwind(1).apply(grid, g, &mut ws.tmp);
    average_rows(grid, &ws.tmp, &mut ws.col);
    let inv_e = 1.0 / eps;
    let inv_e2 = inv_e * inv_e;
    for (i, &v) in grid.v_nodes.iter().enumerate() {
        let s = v / grid.dx;
        for j in 0..nx {
            let k = i * nx + j;
            let jp = if j + 1 == nx { 0 } else { j + 1 };
            let drho = s * (rho[jp] - rho[j]);
            out[k] = -inv_e * (ws.tmp[k] - ws.col[j]) - inv_e2 * drho - spec.sigma_a.data[j] * g[k];
        }
    }
}

/// Macro flux term −∂x⟨v g⟩ on cell centers.
fn flux_rho(grid: &PhaseGrid, g: &[f64], out: &mut [f64], ws: &mut Workspace) {
    Prim::StaggerToCenter.apply(grid, g, &mut ws.tmp2);
    average_rows(grid, &ws.tmp2, out);
    out.iter_mut().for_each(|o| *o = -*o);
}

/// One IMEX-ARS(2,2,2) step.
///
/// Stiff relaxation (σ^S/ε²) g is implicit (a pointwise division); the
/// macro flux uses the implicit weights with the already updated g-stage.
pub fn step_ars222(state: &KineticState, spec: &PhysicsSpec, grid: &PhaseGrid, dt: f64) -> Result<KineticState> {
    state.g.check(grid)?;
    state.rho.check(grid)?;
    let n = grid.len_g();
    let nx = grid.nx;
    let mut ws = Workspace { tmp: vec![0.0; n], tmp2: vec![0.0; n], col: vec![0.0; nx] };
    let at = ars_explicit();
    let a = ars_implicit();
    let inv_e2 = 1.0 / (spec.epsilon * spec.epsilon);

    let mut gs: Vec<Vec<f64>> = vec![state.g.data.clone()];
    let mut rs: Vec<Vec<f64>> = vec![state.rho.data.clone()];
    let mut eg: Vec<Vec<f64>> = Vec::with_capacity(3);
    let mut er: Vec<Vec<f64>> = Vec::with_capacity(3);
    let mut ig: Vec<Vec<f64>> = Vec::with_capacity(3);
    let mut fr: Vec<Vec<f64>> = Vec::with_capacity(3);

    for i in 0..3 {
        if i > 0 {
            // g-stage
            let mut g = state.g.data.clone();
            for j in 0..i {
                let (ae, ai) = (at[i][j], a[i][j]);
                for k in 0..n {
                    g[k] += dt * (ae * eg[j][k] + ai * ig[j][k]);
                }
            }
            let aii = a[i][i];
            for (row, chunk) in g.chunks_mut(nx).enumerate() {
                let _ = row;
                for (jx, val) in chunk.iter_mut().enumerate() {
                    *val /= 1.0 + aii * dt * spec.sigma_s.data[jx] * inv_e2;
                }
            }
            gs.push(g);
            // ρ-stage, flux taken with the implicit weights including the new g
            let mut f = vec![0.0; nx];
            flux_rho(grid, &gs[i], &mut f, &mut ws);
            fr.push(f);
            let mut r = state.rho.data.clone();
            for j in 0..i {
                for k in 0..nx {
                    r[k] += dt * at[i][j] * er[j][k];
                }
            }
            for j in 0..=i {
                for k in 0..nx {
                    r[k] += dt * a[i][j] * fr[j][k];
                }
            }
            rs.push(r);
        } else {
            let mut f = vec![0.0; nx];
            flux_rho(grid, &gs[0], &mut f, &mut ws);
            fr.push(f);
        }
        if i < 2 {
            let mut e = vec![0.0; n];
            explicit_g(grid, spec, &gs[i], &rs[i], &mut e, &mut ws);
            eg.push(e);
            let mut s = vec![0.0; n];
            for (k, val) in s.iter_mut().enumerate() {
                *val = -spec.sigma_s.data[k % nx] * inv_e2 * gs[i][k];
            }
            ig.push(s);
            er.push((0..nx).map(|k| -spec.sigma_a.data[k] * rs[i][k] + spec.source_g.data[k]).collect());
        }
    }
    // Stiffly accurate: the last stage is the new state.
    let g = gs.pop().unwrap();
    let rho = rs.pop().unwrap();
    if g.iter().chain(rho.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Instability { dt, eps: spec.epsilon });
    }
    Ok(KineticState { g: FieldG { nv: grid.nv, nx, data: g }, rho: FieldRho { data: rho } })
}

/// Default generation step: the parabolic choice dx²/2, capped by the
/// transport CFL ε·dx. Without the cap ARS(2,2,2) is unstable when the mean
/// free path ε/σ^S is comparable to dx.
pub fn suggested_dt(grid: &PhaseGrid, epsilon: f64) -> f64 {
    (0.5 * grid.dx * grid.dx).min(epsilon * grid.dx)
}

/// Sampled trajectory plus generating parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub grid: PhaseGrid,
    pub times: Vec<f64>,
    pub g_seq: Vec<FieldG>,
    pub rho_seq: Vec<FieldRho>,
    pub spec: PhysicsSpec,
    pub stride_x: usize,
    pub stride_t: usize,
}

impl Dataset {
    pub fn nt(&self) -> usize {
        self.times.len()
    }

    /// Uniform sample spacing.
    pub fn dt(&self) -> f64 {
        if self.times.len() < 2 {
            0.0
        } else {
            self.times[1] - self.times[0]
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.spec.epsilon
    }

    /// Keeps slices `start, start+stride, …` (at most `count` of them).
    pub fn subsample_time(&self, start: usize, stride: usize, count: usize) -> Result<Dataset> {
        if stride == 0 || start >= self.nt() {
            return Err(Error::Config(format!("bad subsampling start={start} stride={stride}")));
        }
        let idx: Vec<usize> = (start..self.nt()).step_by(stride).take(count).collect();
        Ok(Dataset {
            grid: self.grid.clone(),
            times: idx.iter().map(|&i| self.times[i]).collect(),
            g_seq: idx.iter().map(|&i| self.g_seq[i].clone()).collect(),
            rho_seq: idx.iter().map(|&i| self.rho_seq[i].clone()).collect(),
            spec: self.spec.clone(),
            stride_x: self.stride_x,
            stride_t: self.stride_t * stride,
        })
    }
}

fn coarsen_rho(f: &FieldRho, s: usize) -> FieldRho {
    let nx = f.data.len() / s;
    FieldRho { data: (0..nx).map(|j| f.data[j * s..(j + 1) * s].iter().sum::<f64>() / s as f64).collect() }
}

fn coarsen_g(f: &FieldG, s: usize) -> FieldG {
    let nx = f.nx / s;
    let mut out = FieldG::zeros(f.nv, nx);
    for i in 0..f.nv {
        for j in 0..nx {
            // coarse face (j+1)/nx coincides with fine face s(j+1)−1
            out.data[i * nx + j] = f.data[i * f.nx + s * (j + 1) - 1];
        }
    }
    out
}

/// Solves `nt` fine time levels (nt−1 steps) and keeps every `stride_t`-th
/// level on the grid coarsened by `stride_x`.
///
/// ρ and the coefficient arrays are coarsened by cell averaging; g is
/// sampled at the coinciding faces. Velocities are never subsampled.
pub fn generate_dataset(
    spec: &PhysicsSpec,
    grid: &PhaseGrid,
    dt: f64,
    nt: usize,
    stride_x: usize,
    stride_t: usize,
) -> Result<Dataset> {
    spec.validate(grid)?;
    if stride_x == 0 || stride_t == 0 || grid.nx % stride_x != 0 || nt % stride_t != 0 {
        return Err(Error::Config(format!(
            "strides must divide the sizes (nx={}, nt={nt}, stride_x={stride_x}, stride_t={stride_t})",
            grid.nx
        )));
    }
    if !(dt > 0.0) || nt < 2 {
        return Err(Error::Config("generation needs dt > 0 and nt >= 2".into()));
    }
    let coarse = make_grid(grid.nx / stride_x, grid.nv)?;
    let mut state = KineticState { g: spec.g0.clone(), rho: spec.rho0.clone() };
    let mut times = Vec::new();
    let mut g_seq = Vec::new();
    let mut rho_seq = Vec::new();
    for k in 0..nt {
        if k > 0 {
            state = step_ars222(&state, spec, grid, dt)?;
        }
        if k % stride_t == 0 {
            times.push(k as f64 * dt);
            g_seq.push(coarsen_g(&state.g, stride_x));
            rho_seq.push(coarsen_rho(&state.rho, stride_x));
        }
    }
    let cspec = PhysicsSpec {
        epsilon: spec.epsilon,
        sigma_s: coarsen_rho(&spec.sigma_s, stride_x),
        sigma_a: coarsen_rho(&spec.sigma_a, stride_x),
        source_g: coarsen_rho(&spec.source_g, stride_x),
        rho0: rho_seq[0].clone(),
        g0: g_seq[0].clone(),
    };
    Ok(Dataset { grid: coarse, times, g_seq, rho_seq, spec: cspec, stride_x, stride_t })
}

const MAGIC: &[u8; 4] = b"KDS1";
const VERSION: u32 = 1;

/// Writes the dataset in the KDS1 little-endian layout.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for n in [ds.grid.nv, ds.grid.nx, ds.nt()] {
        buf.extend_from_slice(&(n as u64).to_le_bytes());
    }
    for x in [ds.spec.epsilon, ds.dt(), ds.grid.dx] {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let arrays = [&ds.spec.sigma_s, &ds.spec.sigma_a, &ds.spec.source_g];
    for a in arrays {
        for x in &a.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    for g in &ds.g_seq {
        for x in &g.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    for r in &ds.rho_seq {
        for x in &r.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corrupt(format!("file ends at byte {} (needed {})", self.buf.len(), self.pos + n)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn vec(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

/// Reads a KDS1 file. Strides are not part of the format and load as 1;
/// times start at 0.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4).map_err(|_| Error::Format("missing magic".into()))? != MAGIC {
        return Err(Error::Format("bad magic, expected KDS1".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let nv = r.u64()? as usize;
    let nx = r.u64()? as usize;
    let nt = r.u64()? as usize;
    let epsilon = r.f64()?;
    let dt = r.f64()?;
    let dx = r.f64()?;
    let grid = make_grid(nx, nv).map_err(|e| Error::Corrupt(format!("bad sizes: {e}")))?;
    if (grid.dx - dx).abs() > 1e-15 {
        return Err(Error::Corrupt(format!("dx {dx} inconsistent with nx {nx}")));
    }
    let expected = 4 + 4 + 24 + 24 + 8 * (3 * nx + nt * nv * nx + nt * nx);
    if buf.len() != expected {
        return Err(Error::Corrupt(format!("file has {} bytes, header implies {expected}", buf.len())));
    }
    let sigma_s = FieldRho { data: r.vec(nx)? };
    let sigma_a = FieldRho { data: r.vec(nx)? };
    let source_g = FieldRho { data: r.vec(nx)? };
    let mut g_seq = Vec::with_capacity(nt);
    for _ in 0..nt {
        g_seq.push(FieldG { nv, nx, data: r.vec(nv * nx)? });
    }
    let mut rho_seq = Vec::with_capacity(nt);
    for _ in 0..nt {
        rho_seq.push(FieldRho { data: r.vec(nx)? });
    }
    if nt == 0 {
        return Err(Error::Corrupt("dataset has no time slices".into()));
    }
    let spec = PhysicsSpec {
        epsilon,
        sigma_s,
        sigma_a,
        source_g,
        rho0: rho_seq[0].clone(),
        g0: g_seq[0].clone(),
    };
    let times = (0..nt).map(|n| n as f64 * dt).collect();
    Ok(Dataset { grid, times, g_seq, rho_seq, spec, stride_x: 1, stride_t: 1 })
}

/// Total mass Σ ρ_j dx.
pub fn mass(rho: &FieldRho, grid: &PhaseGrid) -> f64 {
    rho.data.iter().sum::<f64>() * grid.dx
}

/// max_j |⟨g⟩_j|.
pub fn max_mean(g: &FieldG, grid: &PhaseGrid) -> f64 {
    let mut m = vec![0.0; grid.nx];
    average_rows(grid, &g.data, &mut m);
    m.iter().fold(0.0, |a, b| a.max(b.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tableau_values() {
        let g = ars_gamma();
        assert!((g - 0.29289321881345254).abs() < 1e-15);
        assert!((ars_delta() - (1.0 - 1.0 / (2.0 * g))).abs() < 1e-15);
        let at = ars_explicit();
        assert!((at[2][0] + at[2][1] - 1.0).abs() < 1e-15);
        let a = ars_implicit();
        assert!((a[2][1] + a[2][2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_strides() {
        let grid = make_grid(10, 4).unwrap();
        let spec = PhysicsSpec::well_prepared(&grid, 0.5, |_| 1.0, |_| 0.0, |_| 0.0).unwrap();
        assert!(generate_dataset(&spec, &grid, 1e-3, 10, 3, 1).is_err());
        assert!(generate_dataset(&spec, &grid, 1e-3, 10, 1, 3).is_err());
    }
}
