//! Sparse-regression baselines (Lasso, STRidge) over a fixed 18-column
//! dictionary of g-equation words.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::extract::{error_metrics_merged, Coef, CoefficientTable, OperatorWord};
use crate::grid::PhaseGrid;
use crate::operators::OperatorTag::{self, Advection, Identity, Projection};
use crate::solver::Dataset;
use crate::symnet::{apply_word, canonical, lift_data, remove_mean_data, AnsatzConfig};

/// Number of dictionary columns.
pub const DICTIONARY_COLUMNS: usize = 18;
/// Number of distractor columns.
pub const DISTRACTORS: usize = 14;

/// Regression problem A·x ≈ b with one labelled column per word.
#[derive(Debug, Clone, PartialEq)]
pub struct DictionaryMatrix {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub labels: Vec<OperatorWord>,
}

/// The words of the governing g-equation: g, v∂x(ρ), v∂x(g), ⟨v∂x(g)⟩.
pub fn true_words() -> Vec<OperatorWord> {
    vec![
        OperatorWord::new(0, 0, &[Identity]),
        OperatorWord::new(0, 1, &[Advection]),
        OperatorWord::new(0, 0, &[Advection]),
        OperatorWord::new(0, 0, &[Projection, Advection]),
    ]
}

/// Candidate distractors in enumeration order: by length, then g before ρ,
/// then lexicographically over {Advection, Projection} with ρ itself first.
fn candidate_words(max_len: usize) -> Vec<OperatorWord> {
    let mut out = vec![OperatorWord::new(0, 1, &[Identity])];
    for len in 1..=max_len {
        for input in 0..2 {
            for code in 0..(1usize << len) {
                let w: Vec<OperatorTag> =
                    (0..len).rev().map(|b| if code >> b & 1 == 0 { Advection } else { Projection }).collect();
                out.push(OperatorWord::new(0, input, &w));
            }
        }
    }
    out
}

/// The 4 true words followed by the first 14 candidates whose probe columns
/// are nonzero and linearly independent of every earlier column. Probes are
/// a random mean-free g and a random lifted ρ.
pub fn dictionary_words(grid: &PhaseGrid, adv_order: u8) -> Vec<OperatorWord> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g: Vec<f64> = (0..grid.len_g()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    remove_mean_data(grid, &mut g);
    let rho: Vec<f64> = (0..grid.nx).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let lifted = lift_data(grid, &rho);
    let probe = |w: &OperatorWord| {
        let input = if w.input == 0 { &g } else { &lifted };
        apply_word(&w.word, AnsatzConfig::input_loc(w.input), 0, adv_order, grid, input)
    };
    // Gram-Schmidt basis of accepted columns.
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let accept = |col: Vec<f64>, basis: &mut Vec<Vec<f64>>| -> bool {
        let norm0 = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm0 < 1e-9 {
            return false;
        }
        let mut r = col;
        for q in basis.iter() {
            let d: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
            r.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
        }
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-8 * norm0 {
            return false;
        }
        r.iter_mut().for_each(|a| *a /= n);
        basis.push(r);
        true
    };
    let mut words = true_words();
    for w in &words {
        accept(probe(w), &mut basis);
    }
    let mut seen: Vec<OperatorWord> = words.clone();
    for w in candidate_words(6) {
        if words.len() == DICTIONARY_COLUMNS {
            break;
        }
        let w = OperatorWord::new(0, w.input, &canonical(&w.word));
        if seen.contains(&w) {
            continue;
        }
        seen.push(w.clone());
        if accept(probe(&w), &mut basis) {
            words.push(w);
        }
    }
    words
}

/// Columns evaluated on every interior time level n = 1..Ñt−2 over all
/// (v, x); b = (g^{n+1} − g^{n−1}) / (2Δt).
pub fn build_dictionary_matrix(ds: &Dataset) -> Result<DictionaryMatrix> {
    let nt = ds.nt();
    if nt < 3 {
        return Err(Error::InsufficientData(format!("central differences need at least 3 time levels, got {nt}")));
    }
    let grid = &ds.grid;
    let labels = dictionary_words(grid, 1);
    let per = grid.len_g();
    let rows = per * (nt - 2);
    let dt = ds.dt();
    let mut a = DMatrix::zeros(rows, labels.len());
    let mut b = DVector::zeros(rows);
    for n in 1..nt - 1 {
        let off = (n - 1) * per;
        let lifted = lift_data(grid, &ds.rho_seq[n].data);
        for (c, w) in labels.iter().enumerate() {
            let input = if w.input == 0 { &ds.g_seq[n].data } else { &lifted };
            let col = apply_word(&w.word, AnsatzConfig::input_loc(w.input), 0, 1, grid, input);
            for (k, v) in col.into_iter().enumerate() {
                a[(off + k, c)] = v;
            }
        }
        for k in 0..per {
            b[off + k] = (ds.g_seq[n + 1].data[k] - ds.g_seq[n - 1].data[k]) / (2.0 * dt);
        }
    }
    Ok(DictionaryMatrix { a, b, labels })
}

fn check_shapes(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<()> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Err(Error::Dimension("empty regression matrix".into()));
    }
    if a.nrows() != b.len() {
        return Err(Error::Dimension(format!("A has {} rows but b has {}", a.nrows(), b.len())));
    }
    Ok(())
}

fn soft_threshold(z: f64, alpha: f64) -> f64 {
    z.signum() * (z.abs() - alpha).max(0.0)
}

/// Minimizes ½‖Ax − b‖² + α‖x‖₁ by cyclic coordinate descent on the normal
/// equations, stopping when the largest coordinate change is below 1e-10 or
/// after `iters` sweeps.
pub fn lasso(a: &DMatrix<f64>, b: &DVector<f64>, alpha: f64, iters: usize) -> Result<DVector<f64>> {
    check_shapes(a, b)?;
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("lasso alpha must be >= 0, got {alpha}")));
    }
    let gram = a.tr_mul(a);
    let atb = a.tr_mul(b);
    Ok(lasso_gram(&gram, &atb, alpha, iters))
}

fn lasso_gram(gram: &DMatrix<f64>, atb: &DVector<f64>, alpha: f64, iters: usize) -> DVector<f64> {
    let n = atb.len();
    let mut x: DVector<f64> = DVector::zeros(n);
    for _ in 0..iters {
        let mut delta = 0.0f64;
        for j in 0..n {
            let gjj = gram[(j, j)];
            if gjj == 0.0 {
                continue;
            }
            let mut r = atb[j];
            for k in 0..n {
                if k != j {
                    r -= gram[(j, k)] * x[k];
                }
            }
            let new = soft_threshold(r, alpha) / gjj;
            delta = delta.max((new - x[j]).abs());
            x[j] = new;
        }
        if delta < 1e-10 {
            break;
        }
    }
    x
}

/// Sequential thresholded ridge regression: each sweep solves
/// (A_Sᵀ A_S + λI) x_S = A_Sᵀ b on the active set S, then drops every
/// coordinate with |x_i| < `hard_threshold`.
pub fn stridge(a: &DMatrix<f64>, b: &DVector<f64>, ridge_lambda: f64, hard_threshold: f64, sweeps: usize) -> Result<DVector<f64>> {
    check_shapes(a, b)?;
    if !(ridge_lambda >= 0.0) || !(hard_threshold > 0.0) {
        return Err(Error::Config("stridge needs lambda >= 0 and threshold > 0".into()));
    }
    let gram = a.tr_mul(a);
    let atb = a.tr_mul(b);
    stridge_gram(&gram, &atb, ridge_lambda, hard_threshold, sweeps)
}

fn stridge_gram(gram: &DMatrix<f64>, atb: &DVector<f64>, lambda: f64, threshold: f64, sweeps: usize) -> Result<DVector<f64>> {
    let n = atb.len();
    let mut active: Vec<usize> = (0..n).collect();
    let mut x = DVector::zeros(n);
    for _ in 0..sweeps {
        let k = active.len();
        let sub = DMatrix::from_fn(k, k, |i, j| gram[(active[i], active[j])] + if i == j { lambda } else { 0.0 });
        let rhs = DVector::from_fn(k, |i, _| atb[active[i]]);
        let sol = sub
            .clone()
            .cholesky()
            .map(|c| c.solve(&rhs))
            .or_else(|| sub.lu().solve(&rhs))
            .ok_or_else(|| Error::Dimension("singular ridge system".into()))?;
        x.fill(0.0);
        for (i, &c) in active.iter().enumerate() {
            x[c] = sol[i];
        }
        active.retain(|&c| x[c].abs() >= threshold);
        for c in 0..n {
            if !active.contains(&c) {
                x[c] = 0.0;
            }
        }
        if active.is_empty() {
            return Err(Error::EmptyModel);
        }
    }
    Ok(x)
}

/// Coefficient table of a dictionary solution.
pub fn coefficient_table(labels: &[OperatorWord], x: &DVector<f64>) -> CoefficientTable {
    let mut t = CoefficientTable::default();
    for (w, &c) in labels.iter().zip(x.iter()) {
        if c != 0.0 {
            t.accumulate(w.clone(), Coef::Scalar(c));
        }
    }
    t
}

/// Log-spaced α grid 1e-6, 1e-5, …, 1e-1.
pub fn alpha_grid() -> Vec<f64> {
    (0..6).map(|k| 10f64.powi(k - 6)).collect()
}

/// Outcome of a baseline fit with its error metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineFit {
    pub table: CoefficientTable,
    pub type1: f64,
    pub type2: f64,
    /// α for Lasso, the hard threshold for STRidge.
    pub parameter: f64,
}

/// Normal equations of the mean-squared problem on unit-RMS columns:
/// returns (Gram, Aᵀb, column RMS), all scaled by 1/rows.
fn normalized_system(dm: &DictionaryMatrix) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let n = dm.a.nrows() as f64;
    let mut gram = dm.a.tr_mul(&dm.a) / n;
    let mut atb = dm.a.tr_mul(&dm.b) / n;
    let scale = DVector::from_fn(gram.ncols(), |j, _| gram[(j, j)].sqrt());
    for j in 0..gram.ncols() {
        let sj = if scale[j] > 0.0 { scale[j] } else { 1.0 };
        atb[j] /= sj;
        for i in 0..gram.nrows() {
            gram[(i, j)] /= sj;
            gram[(j, i)] /= sj;
        }
    }
    (gram, atb, scale)
}

fn unscale(x: &DVector<f64>, scale: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.len(), |j, _| if scale[j] > 0.0 { x[j] / scale[j] } else { 0.0 })
}

/// Lasso over `alphas` on the normalized problem, returning the fit with the
/// lowest Type-II error.
pub fn lasso_best(dm: &DictionaryMatrix, exact: &CoefficientTable, grid: &PhaseGrid, alphas: &[f64], iters: usize) -> Result<BaselineFit> {
    check_shapes(&dm.a, &dm.b)?;
    let (gram, atb, scale) = normalized_system(dm);
    let mut best: Option<BaselineFit> = None;
    for &alpha in alphas {
        let x = unscale(&lasso_gram(&gram, &atb, alpha, iters), &scale);
        let table = coefficient_table(&dm.labels, &x);
        let (type1, type2) = error_metrics_merged(exact, &table, grid, 1)?;
        if best.as_ref().is_none_or(|b| type2 < b.type2) {
            best = Some(BaselineFit { table, type1, type2, parameter: alpha });
        }
    }
    best.ok_or_else(|| Error::Config("empty alpha grid".into()))
}

/// One STRidge fit on the normalized problem, scored against `exact`.
/// The threshold applies to coefficients in unit-RMS column units.
pub fn stridge_fit(
    dm: &DictionaryMatrix,
    exact: &CoefficientTable,
    grid: &PhaseGrid,
    ridge_lambda: f64,
    hard_threshold: f64,
    sweeps: usize,
) -> Result<BaselineFit> {
    check_shapes(&dm.a, &dm.b)?;
    let (gram, atb, scale) = normalized_system(dm);
    let x = unscale(&stridge_gram(&gram, &atb, ridge_lambda, hard_threshold, sweeps)?, &scale);
    let table = coefficient_table(&dm.labels, &x);
    let (type1, type2) = error_metrics_merged(exact, &table, grid, 1)?;
    Ok(BaselineFit { table, type1, type2, parameter: hard_threshold })
}
