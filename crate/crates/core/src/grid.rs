//! Phase-space grid: periodic staggered mesh on [0,1] and Gauss-Legendre
//! velocity quadrature on [-1,1].
//!
//! ρ lives on cell centers x_j = (j + 1/2)·dx and g on faces
//! x_{j+1/2} = (j + 1)·dx; both use the index j.

use crate::error::{Error, Result};

/// Nodes (ascending) and weights of the n-point Gauss-Legendre rule on [-1,1].
pub fn gauss_legendre(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(1..=64).contains(&n) {
        return Err(Error::Config(format!("quadrature size {n} outside 1..=64")));
    }
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    // Roots are symmetric; solve for the positive half and mirror.
    for i in 0..n.div_ceil(2) {
        // Chebyshev-like initial guess for the i-th largest root.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let step = p / d;
            x -= step;
            if step.abs() < 1e-14 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[n - 1 - i] = x;
        nodes[i] = -x;
        weights[n - 1 - i] = w;
        weights[i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    Ok((nodes, weights))
}

/// P_n(x) and P_n'(x) from the three-term recurrence.
fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let nf = n as f64;
    let dp = nf * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Spatial mesh plus velocity quadrature.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseGrid {
    pub nx: usize,
    pub nv: usize,
    pub dx: f64,
    pub x_centers: Vec<f64>,
    pub x_faces: Vec<f64>,
    pub v_nodes: Vec<f64>,
    pub v_weights: Vec<f64>,
}

impl PhaseGrid {
    /// Number of entries of a g-field.
    pub fn len_g(&self) -> usize {
        self.nx * self.nv
    }
}

/// Builds the periodic grid with `nx` cells and an `nv`-point velocity rule.
pub fn make_grid(nx: usize, nv: usize) -> Result<PhaseGrid> {
    if nx < 4 || nv < 2 {
        return Err(Error::Config(format!("grid needs nx >= 4 and nv >= 2, got nx={nx}, nv={nv}")));
    }
    let (v_nodes, v_weights) = gauss_legendre(nv)?;
    let dx = 1.0 / nx as f64;
    let x_centers: Vec<f64> = (0..nx).map(|j| (j as f64 + 0.5) * dx).collect();
    let x_faces = x_centers.iter().map(|x| x + 0.5 * dx).collect();
    Ok(PhaseGrid { nx, nv, dx, x_centers, x_faces, v_nodes, v_weights })
}

/// Uniform time sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub dt: f64,
    pub nt: usize,
    pub t0: f64,
}

impl TimeGrid {
    pub fn new(dt: f64, nt: usize, t0: f64) -> Result<Self> {
        if !(dt > 0.0) || nt < 2 {
            return Err(Error::Config(format!("time grid needs dt > 0 and nt >= 2, got dt={dt}, nt={nt}")));
        }
        Ok(TimeGrid { dt, nt, t0 })
    }

    /// Length of the covered interval, dt·(nt−1).
    pub fn horizon(&self) -> f64 {
        self.dt * (self.nt - 1) as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.nt).map(|n| self.t0 + n as f64 * self.dt).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_and_two_point_rules() {
        let (x, w) = gauss_legendre(1).unwrap();
        assert_eq!(x, vec![0.0]);
        assert!((w[0] - 2.0).abs() < 1e-15);
        let (x, w) = gauss_legendre(2).unwrap();
        let r = 1.0 / 3f64.sqrt();
        assert!((x[0] + r).abs() < 1e-15 && (x[1] - r).abs() < 1e-15);
        assert!((w[0] - 1.0).abs() < 1e-14 && (w[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(gauss_legendre(0).is_err());
        assert!(gauss_legendre(65).is_err());
        assert!(make_grid(3, 16).is_err());
        assert!(make_grid(8, 1).is_err());
        assert!(TimeGrid::new(0.0, 4, 0.0).is_err());
        assert!(TimeGrid::new(0.1, 1, 0.0).is_err());
    }

    #[test]
    fn small_grid_centers() {
        let g = make_grid(4, 2).unwrap();
        assert_eq!(g.dx, 0.25);
        assert_eq!(g.x_centers, vec![0.125, 0.375, 0.625, 0.875]);
        assert_eq!(g.x_faces, vec![0.25, 0.5, 0.75, 1.0]);
    }
}
