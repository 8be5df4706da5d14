//! Residual-based fitting losses.
//!
//! The ansatz is linear in its word coefficients, so the word fields of
//! every data slice are computed once ([`FitContext::new`]) and residuals
//! become weighted sums of cached fields. Stage states of ARS(2,2,2)
//! depend on the parameters and are evaluated afresh. Gradients are exact:
//! residual adjoints give ∂L/∂c per word, which is chained through the
//! expansion Jacobians, ε_pred and the physics coefficients.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::grid::PhaseGrid;
use crate::operators::{average_rows, resolve, FieldG, FieldRho, OperatorTag, Prim};
use crate::solver::{ars_delta, ars_gamma, Dataset};
use crate::symnet::{
    build_network, eps_pred, eps_pred_derivative, lift_data, AnsatzConfig, BlockId, ModelParams, PhysCoef, Word,
};

/// Time discretization used to build residuals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitScheme {
    ForwardEuler,
    BackwardEuler,
    Imex1,
    ImexArs222,
    /// IMEX-BDF of order q ∈ 1..=4.
    ImexBdf(u8),
}

impl FitScheme {
    /// Consecutive data slices consumed by one residual.
    pub fn slices(self) -> usize {
        match self {
            FitScheme::ImexBdf(q) => q as usize + 1,
            _ => 2,
        }
    }

    pub fn name(self) -> String {
        match self {
            FitScheme::ForwardEuler => "fe".into(),
            FitScheme::BackwardEuler => "be".into(),
            FitScheme::Imex1 => "imex1".into(),
            FitScheme::ImexArs222 => "ars222".into(),
            FitScheme::ImexBdf(q) => format!("bdf{q}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "fe" => FitScheme::ForwardEuler,
            "be" => FitScheme::BackwardEuler,
            "imex1" => FitScheme::Imex1,
            "ars222" => FitScheme::ImexArs222,
            _ => match s.strip_prefix("bdf").and_then(|q| q.parse::<u8>().ok()) {
                Some(q) if (1..=4).contains(&q) => FitScheme::ImexBdf(q),
                _ => return Err(Error::Config(format!("unknown scheme '{s}'"))),
            },
        })
    }

    /// Whether σ^S, σ^A and G enter the residual outside the ansatz.
    pub fn uses_physics(self) -> bool {
        !matches!(self, FitScheme::ForwardEuler | FitScheme::BackwardEuler)
    }
}

/// IMEX-BDF coefficients (α_0..α_q, γ_0..γ_{q−1}, β).
pub fn bdf_coefficients(q: u8) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    Ok(match q {
        1 => (vec![-1.0, 1.0], vec![1.0], 1.0),
        2 => (vec![1.0 / 3.0, -4.0 / 3.0, 1.0], vec![-2.0 / 3.0, 4.0 / 3.0], 2.0 / 3.0),
        3 => (
            vec![-2.0 / 11.0, 9.0 / 11.0, -18.0 / 11.0, 1.0],
            vec![6.0 / 11.0, -18.0 / 11.0, 18.0 / 11.0],
            6.0 / 11.0,
        ),
        4 => (
            vec![3.0 / 25.0, -16.0 / 25.0, 36.0 / 25.0, -48.0 / 25.0, 1.0],
            vec![-12.0 / 25.0, 48.0 / 25.0, -72.0 / 25.0, 48.0 / 25.0],
            12.0 / 25.0,
        ),
        _ => return Err(Error::Config(format!("BDF order {q} not in 1..=4"))),
    })
}

/// Pointwise penalty applied to residual entries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Norm {
    L1,
    /// Mean of squares.
    L2,
    Huber(f64),
}

impl Norm {
    pub fn value(self, r: f64) -> f64 {
        match self {
            Norm::L1 => r.abs(),
            Norm::L2 => r * r,
            Norm::Huber(d) => {
                if r.abs() <= d {
                    0.5 * r * r
                } else {
                    d * (r.abs() - 0.5 * d)
                }
            }
        }
    }

    /// Derivative, with the subgradient of |·| at 0 taken as 0.
    pub fn derivative(self, r: f64) -> f64 {
        match self {
            Norm::L1 => sign(r),
            Norm::L2 => 2.0 * r,
            Norm::Huber(d) => {
                if r.abs() <= d {
                    r
                } else {
                    d * sign(r)
                }
            }
        }
    }

    /// Grid-weighted norm: mean over entries times the domain measure.
    pub fn field(self, v: &[f64], measure: f64) -> f64 {
        if v.is_empty() {
            return 0.0;
        }
        measure * v.iter().map(|&r| self.value(r)).sum::<f64>() / v.len() as f64
    }
}

fn sign(r: f64) -> f64 {
    if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Measures of the two fields' domains: [−1,1]×[0,1] and [0,1].
pub const MEASURE_G: f64 = 2.0;
pub const MEASURE_RHO: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub norm: Norm,
    pub gamma_sparse: f64,
    pub gamma_cont: f64,
    pub gamma_meanfree: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { norm: Norm::L1, gamma_sparse: 1e-4, gamma_cont: 1e-3, gamma_meanfree: 0.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("gamma_sparse", self.gamma_sparse), ("gamma_cont", self.gamma_cont), ("gamma_meanfree", self.gamma_meanfree)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{n} must be finite and >= 0, got {v}")));
            }
        }
        if let Norm::Huber(d) = self.norm {
            if !(d > 0.0) {
                return Err(Error::Config("Huber delta must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Word list of one block and the stencil sequence realizing each word.
#[derive(Debug, Clone)]
pub struct BlockPlan {
    pub id: BlockId,
    pub words: Vec<Word>,
    /// Primitive stencils, innermost first, Identity steps removed.
    pub prims: Vec<Vec<Prim>>,
}

impl BlockPlan {
    fn new(cfg: &AnsatzConfig, id: BlockId, words: Vec<Word>) -> Self {
        let (q, p) = id;
        let target = AnsatzConfig::target_loc(q);
        let prims = words
            .iter()
            .map(|w| {
                let mut loc = AnsatzConfig::input_loc(p);
                let mut seq = Vec::new();
                for &t in w.iter().rev() {
                    let (prim, nl) = resolve(t, loc, target, cfg.adv_order);
                    loc = nl;
                    if prim != Prim::Identity {
                        seq.push(prim);
                    }
                }
                seq
            })
            .collect();
        BlockPlan { id, words, prims }
    }

    /// Raw word fields w(input) (length nv·nx each), sharing inner suffixes.
    fn raw_fields(&self, grid: &PhaseGrid, input: &[f64]) -> Vec<Vec<f64>> {
        let mut memo: HashMap<&[Prim], Vec<f64>> = HashMap::new();
        let mut out = Vec::with_capacity(self.words.len());
        for seq in &self.prims {
            // seq is innermost first; prefixes of seq are the inner suffixes
            let mut start = 0;
            for l in (1..=seq.len()).rev() {
                if memo.contains_key(&seq[..l]) {
                    start = l;
                    break;
                }
            }
            for l in start + 1..=seq.len() {
                let prev: &[f64] = if l == 1 { input } else { &memo[&seq[..l - 1]] };
                let mut o = vec![0.0; input.len()];
                seq[l - 1].apply(grid, prev, &mut o);
                memo.insert(&seq[..l], o);
            }
            out.push(if seq.is_empty() { input.to_vec() } else { memo[&seq[..]].clone() });
        }
        out
    }

    /// Word fields as they enter the equation: (I−⟨⟩)w for the masked
    /// g-equation, ⟨w⟩ (length nx) for the ρ-equation.
    fn fields(&self, cfg: &AnsatzConfig, grid: &PhaseGrid, input: &[f64]) -> Vec<Vec<f64>> {
        let mut raw = self.raw_fields(grid, input);
        let q = self.id.0;
        if q == 0 {
            if cfg.mean_free_mask {
                raw.iter_mut().for_each(|f| crate::symnet::remove_mean_data(grid, f));
            }
            raw
        } else {
            raw.iter()
                .map(|f| {
                    let mut c = vec![0.0; grid.nx];
                    average_rows(grid, f, &mut c);
                    c
                })
                .collect()
        }
    }

    /// Σ_w c_w·wᵀ(λ') where λ' is the adjoint of the equation output mapped
    /// back through (I−⟨⟩) or ⟨⟩. Returns a g-shaped array.
    fn transpose_sum(&self, cfg: &AnsatzConfig, grid: &PhaseGrid, coefs: &[f64], lam: &[f64]) -> Vec<f64> {
        let n = grid.len_g();
        let q = self.id.0;
        let base: Vec<f64> = if q == 0 {
            let mut l = lam.to_vec();
            if cfg.mean_free_mask {
                let mut pt = vec![0.0; n];
                Prim::Projection.apply_transpose(grid, lam, &mut pt).expect("linear");
                l.iter_mut().zip(&pt).for_each(|(a, b)| *a -= b);
            }
            l
        } else {
            // ⟨·⟩ᵀ: row i receives (w_i/2)·λ
            let mut l = vec![0.0; n];
            for (i, r) in l.chunks_mut(grid.nx).enumerate() {
                let h = 0.5 * grid.v_weights[i];
                r.iter_mut().zip(lam).for_each(|(a, b)| *a = h * b);
            }
            l
        };
        let mut acc = vec![0.0; n];
        let mut cur = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        for (seq, &c) in self.prims.iter().zip(coefs) {
            if c == 0.0 {
                continue;
            }
            cur.copy_from_slice(&base);
            for prim in seq.iter().rev() {
                prim.apply_transpose(grid, &cur, &mut tmp).expect("linear");
                std::mem::swap(&mut cur, &mut tmp);
            }
            acc.iter_mut().zip(&cur).for_each(|(a, b)| *a += c * b);
        }
        acc
    }
}

/// Expanded coefficients of one block at the current parameters.
#[derive(Debug, Clone)]
pub struct BlockCoefs {
    /// Per scale m: coefficient of every word.
    pub scale_coefs: Vec<Vec<f64>>,
    /// Per scale m: ∂c_w/∂θ (word-major).
    pub jac: Vec<Vec<Vec<f64>>>,
    /// Σ_m ε_pred^{−m} c^m_w.
    pub combined: Vec<f64>,
}

/// Parameter-dependent quantities shared by all samples.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub eps: f64,
    pub blocks: Vec<BlockCoefs>,
    pub sigma_s: Vec<f64>,
    pub sigma_a: Vec<f64>,
    pub source: Vec<f64>,
}

/// Structural word list of a block (every word the recursion can reach).
pub fn block_words(cfg: &AnsatzConfig, q: usize) -> Result<Vec<Word>> {
    let lp = crate::symnet::LayerParams::zeros(cfg.base_ops.len(), cfg.layers);
    Ok(build_network(cfg, &lp, q)?.terms.keys().cloned().collect())
}

/// Expands every block of `params` at every scale.
pub fn resolve_coefficients(cfg: &AnsatzConfig, params: &ModelParams, plans: &[BlockPlan]) -> Result<(f64, Vec<BlockCoefs>)> {
    let eps = eps_pred(&params.scale);
    if !(eps >= 1e-8) {
        return Err(Error::Scale(eps));
    }
    let mut out = Vec::with_capacity(plans.len());
    for (b, plan) in params.blocks.iter().zip(plans) {
        let mut scale_coefs = Vec::new();
        let mut jac = Vec::new();
        let mut combined = vec![0.0; plan.words.len()];
        for (m, lp) in b.scales.iter().enumerate() {
            let e = build_network(cfg, lp, b.id.0)?;
            let mut c = Vec::with_capacity(plan.words.len());
            let mut j = Vec::with_capacity(plan.words.len());
            for w in &plan.words {
                let (cv, g) = e.terms.get(w).cloned().unwrap_or((0.0, vec![0.0; lp.len()]));
                c.push(cv);
                j.push(g);
            }
            let s = eps.powi(-(m as i32));
            combined.iter_mut().zip(&c).for_each(|(a, x)| *a += s * x);
            scale_coefs.push(c);
            jac.push(j);
        }
        out.push(BlockCoefs { scale_coefs, jac, combined });
    }
    Ok((eps, out))
}

/// Gradient accumulator in residual space.
struct Acc {
    dc: Vec<Vec<f64>>,
    d_s: Vec<f64>,
    d_sa: Vec<f64>,
    d_src: Vec<f64>,
}

/// Loss, per-sample residuals and gradients for one dataset and setup.
pub struct FitContext<'a> {
    pub ds: &'a Dataset,
    pub cfg: AnsatzConfig,
    pub loss: LossConfig,
    pub scheme: FitScheme,
    pub plans: Vec<BlockPlan>,
    /// bank[t][b][w]: word field of block b on data slice t.
    bank: Vec<Vec<Vec<Vec<f64>>>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(u, v)| *u += a * v);
}

impl<'a> FitContext<'a> {
    pub fn new(ds: &'a Dataset, cfg: &AnsatzConfig, loss: &LossConfig, scheme: FitScheme) -> Result<Self> {
        cfg.validate()?;
        loss.validate()?;
        if let FitScheme::ImexBdf(q) = scheme {
            bdf_coefficients(q)?;
        }
        if ds.nt() < scheme.slices() {
            return Err(Error::InsufficientData(format!(
                "scheme {} needs {} slices, dataset has {}",
                scheme.name(),
                scheme.slices(),
                ds.nt()
            )));
        }
        if !cfg.is_linear() {
            return Err(Error::Config("training requires linear base operators".into()));
        }
        let mut plans = Vec::new();
        for id in cfg.blocks() {
            plans.push(BlockPlan::new(cfg, id, block_words(cfg, id.0)?));
        }
        let grid = &ds.grid;
        let mut bank = Vec::with_capacity(ds.nt());
        for t in 0..ds.nt() {
            let lifted = lift_data(grid, &ds.rho_seq[t].data);
            let per_block = plans
                .iter()
                .map(|pl| {
                    let input = if pl.id.1 == 0 { &ds.g_seq[t].data } else { &lifted };
                    pl.fields(cfg, grid, input)
                })
                .collect();
            bank.push(per_block);
        }
        Ok(FitContext { ds, cfg: cfg.clone(), loss: *loss, scheme, plans, bank })
    }

    /// Number of admissible residual indices n.
    pub fn samples(&self) -> usize {
        self.ds.nt() + 1 - self.scheme.slices()
    }

    fn grid(&self) -> &PhaseGrid {
        &self.ds.grid
    }

    pub fn resolve(&self, params: &ModelParams) -> Result<Resolved> {
        let (eps, blocks) = resolve_coefficients(&self.cfg, params, &self.plans)?;
        let grid = self.grid();
        let sp = &self.ds.spec;
        let (sigma_s, sigma_a, source) = if self.scheme.uses_physics() {
            (
                params.physics.sigma_s.resolve(grid, &sp.sigma_s).data,
                params.physics.sigma_a.resolve(grid, &sp.sigma_a).data,
                params.physics.source.resolve(grid, &sp.source_g).data,
            )
        } else {
            let z = vec![0.0; grid.nx];
            (z.clone(), z.clone(), z)
        };
        Ok(Resolved { eps, blocks, sigma_s, sigma_a, source })
    }

    /// Σ over blocks of equation q with input p ∈ `inputs` of c_w·bank field.
    fn eq_from_bank(&self, res: &Resolved, q: usize, tg: usize, tr: usize) -> Vec<f64> {
        let len = if q == 0 { self.grid().len_g() } else { self.grid().nx };
        let mut out = vec![0.0; len];
        for (b, pl) in self.plans.iter().enumerate() {
            if pl.id.0 != q {
                continue;
            }
            let t = if pl.id.1 == 0 { tg } else { tr };
            for (f, &c) in self.bank[t][b].iter().zip(&res.blocks[b].combined) {
                axpy(&mut out, c, f);
            }
        }
        out
    }

    fn eq_grad_bank(&self, acc: &mut Acc, q: usize, tg: usize, tr: usize, lam: &[f64]) {
        for (b, pl) in self.plans.iter().enumerate() {
            if pl.id.0 != q {
                continue;
            }
            let t = if pl.id.1 == 0 { tg } else { tr };
            for (d, f) in acc.dc[b].iter_mut().zip(&self.bank[t][b]) {
                *d += dot(lam, f);
            }
        }
    }

    /// Word fields of a non-data state for every block of equation q.
    fn fresh_fields(&self, q: usize, g: &[f64], rho: &[f64]) -> Vec<Option<Vec<Vec<f64>>>> {
        let lifted = lift_data(self.grid(), rho);
        self.plans
            .iter()
            .map(|pl| {
                if pl.id.0 != q {
                    return None;
                }
                let input = if pl.id.1 == 0 { g } else { &lifted };
                Some(pl.fields(&self.cfg, self.grid(), input))
            })
            .collect()
    }

    fn eq_from_fields(&self, res: &Resolved, q: usize, fields: &[Option<Vec<Vec<f64>>>]) -> Vec<f64> {
        let len = if q == 0 { self.grid().len_g() } else { self.grid().nx };
        let mut out = vec![0.0; len];
        for (b, fb) in fields.iter().enumerate() {
            if let Some(fb) = fb {
                for (f, &c) in fb.iter().zip(&res.blocks[b].combined) {
                    axpy(&mut out, c, f);
                }
            }
        }
        out
    }

    /// Adjoint of equation q's output λ back to (g, ρ) inputs; also adds
    /// coefficient gradients from the fresh fields.
    fn eq_backward_fresh(
        &self,
        res: &Resolved,
        acc: &mut Acc,
        q: usize,
        fields: &[Option<Vec<Vec<f64>>>],
        lam: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let grid = self.grid();
        let mut lg = vec![0.0; grid.len_g()];
        let mut lr = vec![0.0; grid.nx];
        for (b, pl) in self.plans.iter().enumerate() {
            if pl.id.0 != q {
                continue;
            }
            if let Some(fb) = &fields[b] {
                for (d, f) in acc.dc[b].iter_mut().zip(fb) {
                    *d += dot(lam, f);
                }
            }
            let t = pl.transpose_sum(&self.cfg, grid, &res.blocks[b].combined, lam);
            if pl.id.1 == 0 {
                axpy(&mut lg, 1.0, &t);
            } else {
                // liftᵀ sums the velocity rows
                for r in t.chunks(grid.nx) {
                    axpy(&mut lr, 1.0, r);
                }
            }
        }
        (lg, lr)
    }

    fn g_data(&self, t: usize) -> &[f64] {
        &self.ds.g_seq[t].data
    }

    fn r_data(&self, t: usize) -> &[f64] {
        &self.ds.rho_seq[t].data
    }

    /// Residuals (K_g, K_ρ) of sample n. Components of an unmodeled
    /// equation are returned as zero fields.
    pub fn residuals(&self, params: &ModelParams, n: usize) -> Result<(FieldG, FieldRho)> {
        let res = self.resolve(params)?;
        let (kg, kr) = self.sample(&res, n, None)?;
        let grid = self.grid();
        Ok((
            FieldG { nv: grid.nv, nx: grid.nx, data: kg.unwrap_or_else(|| vec![0.0; grid.len_g()]) },
            FieldRho { data: kr.unwrap_or_else(|| vec![0.0; grid.nx]) },
        ))
    }

    /// Forward (and optionally backward) pass of one sample. With `acc`
    /// set, ∂(‖K_g‖+‖K_ρ‖)/∂· scaled by `acc_scale` is accumulated.
    fn sample(&self, res: &Resolved, n: usize, acc: Option<(&mut Acc, f64)>) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>)> {
        match self.scheme {
            FitScheme::ImexArs222 => self.sample_ars(res, n, acc),
            _ => self.sample_linear(res, n, acc),
        }
    }

    fn norm_adjoint(&self, k: &[f64], measure: f64, scale: f64) -> Vec<f64> {
        let f = scale * measure / k.len() as f64;
        k.iter().map(|&r| f * self.loss.norm.derivative(r)).collect()
    }

    /// FE, BE, IMEX1 and BDF(q): residuals are affine in the coefficients.
    fn sample_linear(&self, res: &Resolved, n: usize, acc: Option<(&mut Acc, f64)>) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>)> {
        let grid = self.grid();
        let nx = grid.nx;
        let dt = self.ds.dt();
        let inv_e2 = 1.0 / (res.eps * res.eps);
        let s_arr: Vec<f64> = res.sigma_s.iter().map(|s| s * inv_e2).collect();
        let sa = &res.sigma_a;
        let src = &res.source;
        let has_g = self.cfg.target.has_g();
        let has_r = self.cfg.target.has_rho();

        // (slice index, weight) pairs of F1 terms; F2 terms carry (t_g, t_ρ).
        let mut f1_terms: Vec<(usize, f64)> = Vec::new();
        let mut f2_terms: Vec<(usize, usize, f64)> = Vec::new();
        let mut kg = vec![0.0; grid.len_g()];
        let mut kr = vec![0.0; nx];
        // explicit-physics samples (slice, weight) contributing −w·Δt·σ^A·g to K_g etc.
        let mut g_lin: Vec<(usize, f64)> = Vec::new(); // K_g += a·g_t
        let mut g_sa: Vec<(usize, f64)> = Vec::new(); // K_g += a·σ^A·g_t
        let mut g_s: Vec<(usize, f64)> = Vec::new(); // K_g += a·S·g_t
        let mut r_lin: Vec<(usize, f64)> = Vec::new();
        let mut r_sa: Vec<(usize, f64)> = Vec::new(); // K_ρ += a·σ^A·ρ_t
        let mut r_src = 0.0; // K_ρ += a·G
        match self.scheme {
            FitScheme::ForwardEuler | FitScheme::BackwardEuler => {
                let t = if self.scheme == FitScheme::ForwardEuler { n } else { n + 1 };
                g_lin.extend([(n + 1, 1.0), (n, -1.0)]);
                r_lin.extend([(n + 1, 1.0), (n, -1.0)]);
                f1_terms.push((t, -dt));
                f2_terms.push((t, t, -dt));
            }
            FitScheme::Imex1 => {
                g_lin.extend([(n + 1, 1.0), (n, -1.0)]);
                g_s.push((n + 1, dt));
                g_sa.push((n, dt));
                f1_terms.push((n, -dt));
                r_lin.extend([(n + 1, 1.0), (n, -1.0)]);
                r_sa.push((n, dt));
                r_src = -dt;
                f2_terms.push((n + 1, n, -dt));
            }
            FitScheme::ImexBdf(q) => {
                let (alpha, gamma, beta) = bdf_coefficients(q)?;
                let q = q as usize;
                for (i, &a) in alpha.iter().enumerate() {
                    g_lin.push((n + i, a));
                    r_lin.push((n + i, a));
                }
                for (i, &gm) in gamma.iter().enumerate() {
                    f1_terms.push((n + i, -dt * gm));
                    g_sa.push((n + i, dt * gm));
                    r_sa.push((n + i, dt * gm));
                    r_src -= dt * gm;
                }
                g_s.push((n + q, beta * dt));
                f2_terms.push((n + q, n + q, -beta * dt));
            }
            FitScheme::ImexArs222 => unreachable!(),
        }

        if has_g {
            for &(t, a) in &g_lin {
                axpy(&mut kg, a, self.g_data(t));
            }
            for &(t, a) in &g_sa {
                let g = self.g_data(t);
                for (k, v) in kg.iter_mut().enumerate() {
                    *v += a * sa[k % nx] * g[k];
                }
            }
            for &(t, a) in &g_s {
                let g = self.g_data(t);
                for (k, v) in kg.iter_mut().enumerate() {
                    *v += a * s_arr[k % nx] * g[k];
                }
            }
            for &(t, a) in &f1_terms {
                axpy(&mut kg, a, &self.eq_from_bank(res, 0, t, t));
            }
        }
        if has_r {
            for &(t, a) in &r_lin {
                axpy(&mut kr, a, self.r_data(t));
            }
            for &(t, a) in &r_sa {
                let r = self.r_data(t);
                for k in 0..nx {
                    kr[k] += a * sa[k] * r[k];
                }
            }
            axpy(&mut kr, r_src, src);
            for &(tg, tr, a) in &f2_terms {
                axpy(&mut kr, a, &self.eq_from_bank(res, 1, tg, tr));
            }
        }

        if let Some((acc, scale)) = acc {
            if has_g {
                let mu = self.norm_adjoint(&kg, MEASURE_G, scale);
                for &(t, a) in &f1_terms {
                    let lam: Vec<f64> = mu.iter().map(|m| a * m).collect();
                    self.eq_grad_bank(acc, 0, t, t, &lam);
                }
                for &(t, a) in &g_sa {
                    let g = self.g_data(t);
                    for (k, m) in mu.iter().enumerate() {
                        acc.d_sa[k % nx] += a * m * g[k];
                    }
                }
                for &(t, a) in &g_s {
                    let g = self.g_data(t);
                    for (k, m) in mu.iter().enumerate() {
                        acc.d_s[k % nx] += a * m * g[k];
                    }
                }
            }
            if has_r {
                let lam = self.norm_adjoint(&kr, MEASURE_RHO, scale);
                for &(tg, tr, a) in &f2_terms {
                    let l: Vec<f64> = lam.iter().map(|m| a * m).collect();
                    self.eq_grad_bank(acc, 1, tg, tr, &l);
                }
                for &(t, a) in &r_sa {
                    let r = self.r_data(t);
                    for k in 0..nx {
                        acc.d_sa[k] += a * lam[k] * r[k];
                    }
                }
                axpy(&mut acc.d_src, r_src, &lam);
            }
        }
        Ok((has_g.then_some(kg), has_r.then_some(kr)))
    }

    /// IMEX-ARS(2,2,2) with the ansatz in place of the right-hand side.
    ///
    /// Stage 2 is rebuilt from slice n; a modeled-out component is
    /// interpolated linearly from the data at c₂ = γ.
    fn sample_ars(&self, res: &Resolved, n: usize, acc: Option<(&mut Acc, f64)>) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>)> {
        let grid = self.grid();
        let nx = grid.nx;
        let len = grid.len_g();
        let dt = self.ds.dt();
        let gm = ars_gamma();
        let dl = ars_delta();
        let inv_e2 = 1.0 / (res.eps * res.eps);
        let s_arr: Vec<f64> = res.sigma_s.iter().map(|s| s * inv_e2).collect();
        let sa = &res.sigma_a;
        let src = &res.source;
        let has_g = self.cfg.target.has_g();
        let has_r = self.cfg.target.has_rho();
        let a = self.g_data(n);
        let r = self.r_data(n);
        let b = self.g_data(n + 1);
        let r1 = self.r_data(n + 1);

        // Stage 2 of g.
        let (g2, num) = if has_g {
            let f1a = self.eq_from_bank(res, 0, n, n);
            let mut num = a.to_vec();
            for k in 0..len {
                num[k] += dt * gm * (f1a[k] - sa[k % nx] * a[k]);
            }
            let g2: Vec<f64> = (0..len).map(|k| num[k] / (1.0 + dt * gm * s_arr[k % nx])).collect();
            (g2, Some(num))
        } else {
            ((0..len).map(|k| (1.0 - gm) * a[k] + gm * b[k]).collect(), None)
        };
        // Stage 2 of ρ.
        let eps_r: Vec<f64> = (0..nx).map(|k| -sa[k] * r[k] + src[k]).collect();
        let rho2: Vec<f64> = if has_r {
            let f2a = self.eq_from_bank(res, 1, n, n);
            (0..nx).map(|k| r[k] + dt * gm * (eps_r[k] + f2a[k])).collect()
        } else {
            (0..nx).map(|k| (1.0 - gm) * r[k] + gm * r1[k]).collect()
        };
        if g2.iter().chain(rho2.iter()).any(|v| !v.is_finite()) {
            return Err(Error::StageDivergence(format!("ARS(2,2,2) stage 2 at n = {n}")));
        }

        let mut kg = vec![0.0; len];
        let mut f1_fields = Vec::new();
        if has_g {
            let f1a = self.eq_from_bank(res, 0, n, n);
            f1_fields = self.fresh_fields(0, &g2, &rho2);
            let f1s = self.eq_from_fields(res, 0, &f1_fields);
            for k in 0..len {
                let x = k % nx;
                let e1 = f1a[k] - sa[x] * a[k];
                let e2 = f1s[k] - sa[x] * g2[k];
                kg[k] = b[k] - a[k] - dt * (dl * e1 + (1.0 - dl) * e2) + dt * s_arr[x] * ((1.0 - gm) * g2[k] + gm * b[k]);
            }
        }
        let mut kr = vec![0.0; nx];
        let mut f2_fields = Vec::new();
        if has_r {
            f2_fields = self.fresh_fields(1, &g2, &rho2);
            let f2s = self.eq_from_fields(res, 1, &f2_fields);
            let f2b = self.eq_from_bank(res, 1, n + 1, n + 1);
            for k in 0..nx {
                let er2 = -sa[k] * rho2[k] + src[k];
                kr[k] = r1[k] - r[k] - dt * (dl * eps_r[k] + (1.0 - dl) * er2) - dt * ((1.0 - gm) * f2s[k] + gm * f2b[k]);
            }
        }

        if let Some((acc, scale)) = acc {
            let mut lam_g2 = vec![0.0; len];
            let mut lam_r2 = vec![0.0; nx];
            let mut lam_e1 = vec![0.0; len];
            if has_g {
                let mu = self.norm_adjoint(&kg, MEASURE_G, scale);
                let lam_e2: Vec<f64> = mu.iter().map(|m| -dt * (1.0 - dl) * m).collect();
                for k in 0..len {
                    let x = k % nx;
                    lam_e1[k] = -dt * dl * mu[k];
                    lam_g2[k] += dt * s_arr[x] * (1.0 - gm) * mu[k];
                    acc.d_s[x] += dt * mu[k] * ((1.0 - gm) * g2[k] + gm * b[k]);
                    // E2 = F1(s2) − σ^A g2
                    lam_g2[k] -= sa[x] * lam_e2[k];
                    acc.d_sa[x] -= lam_e2[k] * g2[k];
                }
                let (lg, lr) = self.eq_backward_fresh(res, acc, 0, &f1_fields, &lam_e2);
                axpy(&mut lam_g2, 1.0, &lg);
                axpy(&mut lam_r2, 1.0, &lr);
            }
            if has_r {
                let lam = self.norm_adjoint(&kr, MEASURE_RHO, scale);
                for k in 0..nx {
                    // −Δtδ E_ρ(r)
                    acc.d_sa[k] += dt * dl * lam[k] * r[k];
                    acc.d_src[k] -= dt * dl * lam[k];
                    // −Δt(1−δ) E_ρ(ρ2)
                    lam_r2[k] += dt * (1.0 - dl) * sa[k] * lam[k];
                    acc.d_sa[k] += dt * (1.0 - dl) * lam[k] * rho2[k];
                    acc.d_src[k] -= dt * (1.0 - dl) * lam[k];
                }
                let l_s2: Vec<f64> = lam.iter().map(|l| -dt * (1.0 - gm) * l).collect();
                let (lg, lr) = self.eq_backward_fresh(res, acc, 1, &f2_fields, &l_s2);
                axpy(&mut lam_g2, 1.0, &lg);
                axpy(&mut lam_r2, 1.0, &lr);
                let l_b: Vec<f64> = lam.iter().map(|l| -dt * gm * l).collect();
                self.eq_grad_bank(acc, 1, n + 1, n + 1, &l_b);
                // ρ2 = r + Δtγ(E_ρ(r) + F2(a, r))
                let lt: Vec<f64> = lam_r2.iter().map(|l| dt * gm * l).collect();
                for k in 0..nx {
                    acc.d_sa[k] -= lt[k] * r[k];
                    acc.d_src[k] += lt[k];
                }
                self.eq_grad_bank(acc, 1, n, n, &lt);
            }
            if let Some(num) = num {
                // g2 = (a + Δtγ E1)/(1 + Δtγ S)
                for k in 0..len {
                    let x = k % nx;
                    let d2 = 1.0 + dt * gm * s_arr[x];
                    let ln = lam_g2[k] / d2;
                    acc.d_s[x] -= dt * gm * lam_g2[k] * num[k] / (d2 * d2);
                    lam_e1[k] += dt * gm * ln;
                }
                for k in 0..len {
                    acc.d_sa[k % nx] -= lam_e1[k] * a[k];
                }
                self.eq_grad_bank(acc, 0, n, n, &lam_e1);
            }
        }
        Ok((has_g.then_some(kg), has_r.then_some(kr)))
    }

    /// Batch loss; `None` uses every admissible sample.
    pub fn loss_value(&self, params: &ModelParams, batch: Option<&[usize]>) -> Result<f64> {
        Ok(self.evaluate(params, batch, false)?.0)
    }

    /// Batch loss and its gradient with respect to `params.flatten()`.
    pub fn loss_and_grad(&self, params: &ModelParams, batch: Option<&[usize]>) -> Result<(f64, Vec<f64>)> {
        let (l, g) = self.evaluate(params, batch, true)?;
        Ok((l, g.expect("gradient requested")))
    }

    /// Loss split into (data term, sparsity, continuity, mean-free).
    pub fn loss_terms(&self, params: &ModelParams, batch: Option<&[usize]>) -> Result<[f64; 4]> {
        let res = self.resolve(params)?;
        let all: Vec<usize> = (0..self.samples()).collect();
        let batch = batch.unwrap_or(&all);
        let mut data = 0.0;
        for &n in batch {
            let (kg, kr) = self.sample(&res, n, None)?;
            data += kg.map_or(0.0, |k| self.loss.norm.field(&k, MEASURE_G));
            data += kr.map_or(0.0, |k| self.loss.norm.field(&k, MEASURE_RHO));
        }
        data /= batch.len() as f64;
        let sparse = self.loss.gamma_sparse * params.flatten()[..params.network_len()].iter().map(|x| x.abs()).sum::<f64>();
        let cont = self.loss.gamma_cont * continuity_penalty(params);
        let mf = if self.loss.gamma_meanfree > 0.0 {
            let mut s = 0.0;
            for &n in batch {
                s += self.meanfree_norm(&res, n).0;
            }
            self.loss.gamma_meanfree * s / batch.len() as f64
        } else {
            0.0
        };
        Ok([data, sparse, cont, mf])
    }

    /// ‖Δt⟨F1(s_n)⟩‖ and its adjoint with respect to ⟨F1⟩.
    fn meanfree_norm(&self, res: &Resolved, n: usize) -> (f64, Vec<f64>) {
        let grid = self.grid();
        if !self.cfg.target.has_g() {
            return (0.0, vec![0.0; grid.nx]);
        }
        let f1 = self.eq_from_bank(res, 0, n, n);
        let mut m = vec![0.0; grid.nx];
        average_rows(grid, &f1, &mut m);
        let dt = self.ds.dt();
        m.iter_mut().for_each(|x| *x *= dt);
        let v = self.loss.norm.field(&m, MEASURE_RHO);
        (v, m)
    }

    fn evaluate(&self, params: &ModelParams, batch: Option<&[usize]>, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let res = self.resolve(params)?;
        let grid = self.grid();
        let all: Vec<usize> = (0..self.samples()).collect();
        let batch = batch.unwrap_or(&all);
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        if let Some(&bad) = batch.iter().find(|&&n| n >= self.samples()) {
            return Err(Error::InsufficientData(format!("sample index {bad} out of range")));
        }
        let inv_b = 1.0 / batch.len() as f64;
        let mut acc = Acc {
            dc: self.plans.iter().map(|p| vec![0.0; p.words.len()]).collect(),
            d_s: vec![0.0; grid.nx],
            d_sa: vec![0.0; grid.nx],
            d_src: vec![0.0; grid.nx],
        };
        let mut loss = 0.0;
        for &n in batch {
            let (kg, kr) = if want_grad { self.sample(&res, n, Some((&mut acc, inv_b)))? } else { self.sample(&res, n, None)? };
            loss += kg.map_or(0.0, |k| self.loss.norm.field(&k, MEASURE_G));
            loss += kr.map_or(0.0, |k| self.loss.norm.field(&k, MEASURE_RHO));
        }
        loss *= inv_b;
        if self.loss.gamma_meanfree > 0.0 && self.cfg.target.has_g() {
            let dt = self.ds.dt();
            for &n in batch {
                let (v, m) = self.meanfree_norm(&res, n);
                loss += self.loss.gamma_meanfree * inv_b * v;
                if want_grad {
                    // λ on ⟨F1⟩ → ⟨·⟩ᵀ to g-shape, then onto coefficients
                    let lam = self.norm_adjoint(&m, MEASURE_RHO, self.loss.gamma_meanfree * inv_b * dt);
                    let mut lg = vec![0.0; grid.len_g()];
                    for (i, r) in lg.chunks_mut(grid.nx).enumerate() {
                        let h = 0.5 * grid.v_weights[i];
                        r.iter_mut().zip(&lam).for_each(|(a, b)| *a = h * b);
                    }
                    self.eq_grad_bank(&mut acc, 0, n, n, &lg);
                }
            }
        }
        let flat = params.flatten();
        let net = params.network_len();
        loss += self.loss.gamma_sparse * flat[..net].iter().map(|x| x.abs()).sum::<f64>();
        loss += self.loss.gamma_cont * continuity_penalty(params);
        if !loss.is_finite() {
            return Err(Error::Divergence { iter: 0, path: "loss".into() });
        }
        if !want_grad {
            return Ok((loss, None));
        }

        let mut grad = vec![0.0; flat.len()];
        let eps = res.eps;
        let mut d_eps = 0.0;
        for (b, bc) in res.blocks.iter().enumerate() {
            let dc = &acc.dc[b];
            for m in 0..bc.scale_coefs.len() {
                let s = eps.powi(-(m as i32));
                let off = params.block_offset(b, m);
                for (w, &d) in dc.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (i, &j) in bc.jac[m][w].iter().enumerate() {
                        grad[off + i] += s * d * j;
                    }
                    if m > 0 {
                        d_eps += d * bc.scale_coefs[m][w] * (-(m as f64)) * eps.powi(-(m as i32) - 1);
                    }
                }
            }
        }
        // Physics: S = σ^S/ε².
        let inv_e2 = 1.0 / (eps * eps);
        let mut d_sigma_s = vec![0.0; grid.nx];
        for x in 0..grid.nx {
            d_sigma_s[x] = acc.d_s[x] * inv_e2;
            d_eps += acc.d_s[x] * (-2.0 * res.sigma_s[x] * inv_e2 / eps);
        }
        grad[params.eps_index()] += d_eps * eps_pred_derivative(&params.scale);
        let offs = params.physics_offsets();
        let phys = params.physics.coefs();
        for (i, d) in [&d_sigma_s, &acc.d_sa, &acc.d_src].into_iter().enumerate() {
            let len = phys[i].len();
            if len > 0 {
                phys[i].chain(grid, d, &mut grad[offs[i]..offs[i] + len]);
            }
        }
        for (g, x) in grad[..net].iter_mut().zip(&flat[..net]) {
            *g += self.loss.gamma_sparse * sign(*x);
        }
        if self.loss.gamma_cont > 0.0 {
            for (i, c) in phys.iter().enumerate() {
                if let PhysCoef::Spatial(w) = c {
                    let signs: Vec<f64> = w.jumps().iter().map(|&j| sign(j)).collect();
                    let mut g = vec![0.0; w.len()];
                    w.jump_gradient(&signs, &mut g);
                    for (k, v) in g.iter().enumerate() {
                        grad[offs[i] + k] += self.loss.gamma_cont * v;
                    }
                }
            }
        }
        if let Some(k) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Divergence { iter: 0, path: params.param_path(k) });
        }
        Ok((loss, Some(grad)))
    }
}

/// Σ|jumps| of values and derivatives up to deg−1 over all spatial
/// physics coefficients.
pub fn continuity_penalty(params: &ModelParams) -> f64 {
    params
        .physics
        .coefs()
        .iter()
        .map(|c| match c {
            PhysCoef::Spatial(w) => w.jumps().iter().map(|j| j.abs()).sum(),
            _ => 0.0,
        })
        .sum()
}

/// Convenience: data (plus regularization) loss over every sample.
pub fn loss_total(ds: &Dataset, params: &ModelParams, cfg: &AnsatzConfig, loss: &LossConfig, scheme: FitScheme) -> Result<f64> {
    FitContext::new(ds, cfg, loss, scheme)?.loss_value(params, None)
}

fn residual_at(ds: &Dataset, n: usize, params: &ModelParams, cfg: &AnsatzConfig, scheme: FitScheme) -> Result<(FieldG, FieldRho)> {
    if n + scheme.slices() > ds.nt() {
        return Err(Error::InsufficientData(format!("need slices {n}..{} of {}", n + scheme.slices(), ds.nt())));
    }
    let w = ds.subsample_time(n, 1, scheme.slices())?;
    let ctx = FitContext::new(&w, cfg, &LossConfig::default(), scheme)?;
    ctx.residuals(params, 0)
}

/// u^{n+1} − u^n − Δt·F(u^n).
pub fn residual_forward_euler(ds: &Dataset, n: usize, params: &ModelParams, cfg: &AnsatzConfig) -> Result<(FieldG, FieldRho)> {
    residual_at(ds, n, params, cfg, FitScheme::ForwardEuler)
}

/// u^{n+1} − u^n − Δt·F(u^{n+1}).
pub fn residual_backward_euler(ds: &Dataset, n: usize, params: &ModelParams, cfg: &AnsatzConfig) -> Result<(FieldG, FieldRho)> {
    residual_at(ds, n, params, cfg, FitScheme::BackwardEuler)
}

/// First-order IMEX residual with σ^S/ε_pred² implicit.
pub fn residual_imex1(ds: &Dataset, n: usize, params: &ModelParams, cfg: &AnsatzConfig) -> Result<(FieldG, FieldRho)> {
    residual_at(ds, n, params, cfg, FitScheme::Imex1)
}

/// IMEX-ARS(2,2,2) residual.
pub fn residual_ars222(ds: &Dataset, n: usize, params: &ModelParams, cfg: &AnsatzConfig) -> Result<(FieldG, FieldRho)> {
    residual_at(ds, n, params, cfg, FitScheme::ImexArs222)
}

/// IMEX-BDF(q) residual over slices n..=n+q.
pub fn residual_bdf(q: u8, ds: &Dataset, n: usize, params: &ModelParams, cfg: &AnsatzConfig) -> Result<(FieldG, FieldRho)> {
    residual_at(ds, n, params, cfg, FitScheme::ImexBdf(q))
}

/// Words of a block rendered against its input, for diagnostics.
pub fn block_word_names(plan: &BlockPlan) -> Vec<String> {
    let input = if plan.id.1 == 0 { "g" } else { "ρ" };
    plan.words.iter().map(|w| crate::symnet::render_word(w, input)).collect()
}

/// True when every tag of `w` is linear.
pub fn is_linear_word(w: &[OperatorTag]) -> bool {
    w.iter().all(|t| t.is_linear())
}
