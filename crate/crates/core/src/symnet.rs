//! Symbolic operator-composition network.
//!
//! Each block F^m_{q,p} (equation q, input p, scale m) is built from the
//! recursion ξ^(k) = W^k [A_1..A_n, B_1..B_{k−1}]ᵀ + b^k I, B_k = C_1 ⊙ C_2,
//! F = W^{K+1}[A_1..A_n, B_1..B_K]ᵀ. Linear networks are expanded into a
//! coefficient per operator word together with the Jacobian of every
//! coefficient with respect to the block's parameters.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::PhaseGrid;
use crate::operators::{average_rows, resolve, FieldG, FieldRho, Loc, OperatorTag, Prim};

/// How ε_pred is parametrized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpsMode {
    /// ½(tanh w + 1) on (0, 1].
    Global,
    /// Affine image of ½(tanh w + 1) onto [s(i+1), s(i)], s(i) = 0.1^i.
    Interval(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleParams {
    pub w_eps: f64,
    pub mode: EpsMode,
}

/// Interval bounds [s(i+1), s(i)].
pub fn interval_bounds(i: usize) -> (f64, f64) {
    (0.1f64.powi(i as i32 + 1), 0.1f64.powi(i as i32))
}

pub fn eps_pred(sp: &ScaleParams) -> f64 {
    let h = 0.5 * (sp.w_eps.tanh() + 1.0);
    match sp.mode {
        EpsMode::Global => h,
        EpsMode::Interval(i) => {
            let (lo, hi) = interval_bounds(i);
            lo + (hi - lo) * h
        }
    }
}

/// dε_pred/dw_eps.
pub fn eps_pred_derivative(sp: &ScaleParams) -> f64 {
    let t = sp.w_eps.tanh();
    let d = 0.5 * (1.0 - t * t);
    match sp.mode {
        EpsMode::Global => d,
        EpsMode::Interval(i) => {
            let (lo, hi) = interval_bounds(i);
            (hi - lo) * d
        }
    }
}

/// Piecewise polynomial on a uniform partition of [0,1], written in the
/// global variable x: p_i(x) = Σ_k a_{i,k} x^k.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialWeight {
    pub breakpoints: Vec<f64>,
    pub coeffs: Vec<Vec<f64>>,
}

impl SpatialWeight {
    /// `pieces` pieces of degree `deg`, every piece the constant `value`.
    pub fn uniform(pieces: usize, deg: usize, value: f64) -> Result<Self> {
        if pieces == 0 || deg == 0 {
            return Err(Error::Config(format!("spatial weight needs pieces >= 1 and deg >= 1, got {pieces}, {deg}")));
        }
        let breakpoints = (0..=pieces).map(|i| i as f64 / pieces as f64).collect();
        let mut row = vec![0.0; deg + 1];
        row[0] = value;
        Ok(SpatialWeight { breakpoints, coeffs: vec![row; pieces] })
    }

    pub fn pieces(&self) -> usize {
        self.coeffs.len()
    }

    pub fn degree(&self) -> usize {
        self.coeffs[0].len() - 1
    }

    pub fn piece_of(&self, x: f64) -> usize {
        let np = self.pieces();
        ((x * np as f64).floor().max(0.0) as usize).min(np - 1)
    }

    /// k-th derivative of piece i at x.
    pub fn derivative(&self, i: usize, k: usize, x: f64) -> f64 {
        let a = &self.coeffs[i];
        let mut acc = 0.0;
        for j in (k..a.len()).rev() {
            acc = acc * x + a[j] * falling(j, k);
        }
        acc
    }

    pub fn value_at(&self, x: f64) -> f64 {
        self.derivative(self.piece_of(x), 0, x)
    }

    pub fn len(&self) -> usize {
        self.pieces() * (self.degree() + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Jumps p_{i−1}^{(k)}(a_i) − p_i^{(k)}(a_i) at the interior breakpoints
    /// for k = 0..deg−1, ordered by k then breakpoint.
    pub fn jumps(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for k in 0..self.degree() {
            for i in 1..self.pieces() {
                let a = self.breakpoints[i];
                out.push(self.derivative(i - 1, k, a) - self.derivative(i, k, a));
            }
        }
        out
    }

    /// Adds s_{k,i}·∂(jump_{k,i})/∂a to `grad` (flattened like `coeffs`).
    pub fn jump_gradient(&self, signs: &[f64], grad: &mut [f64]) {
        let d1 = self.degree() + 1;
        let mut idx = 0;
        for k in 0..self.degree() {
            for i in 1..self.pieces() {
                let a = self.breakpoints[i];
                let s = signs[idx];
                idx += 1;
                for j in k..d1 {
                    let c = falling(j, k) * a.powi((j - k) as i32);
                    grad[(i - 1) * d1 + j] += s * c;
                    grad[i * d1 + j] -= s * c;
                }
            }
        }
    }
}

/// j!/(j−k)!.
fn falling(j: usize, k: usize) -> f64 {
    ((j - k + 1)..=j).map(|t| t as f64).product()
}

/// Value at every cell center.
pub fn spatial_eval(w: &SpatialWeight, grid: &PhaseGrid) -> FieldRho {
    FieldRho { data: grid.x_centers.iter().map(|&x| w.value_at(x)).collect() }
}

/// Parameters of one block at one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// weights[k][r] has length n + k (layer k+1, row r).
    pub weights: Vec<[Vec<f64>; 2]>,
    pub biases: Vec<[f64; 2]>,
    /// Length n + K.
    pub readout: Vec<f64>,
}

impl LayerParams {
    pub fn zeros(n: usize, k: usize) -> Self {
        LayerParams {
            weights: (0..k).map(|l| [vec![0.0; n + l], vec![0.0; n + l]]).collect(),
            biases: vec![[0.0; 2]; k],
            readout: vec![0.0; n + k],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.iter().map(|w| w[0].len() * 2 + 2).sum::<usize>() + self.readout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of weights[k][r][i].
    pub fn weight_index(&self, k: usize, r: usize, i: usize) -> usize {
        let before: usize = self.weights[..k].iter().map(|w| 2 * w[0].len()).sum();
        before + r * self.weights[k][0].len() + i
    }

    pub fn bias_index(&self, k: usize, r: usize) -> usize {
        let ws: usize = self.weights.iter().map(|w| 2 * w[0].len()).sum();
        ws + 2 * k + r
    }

    pub fn readout_index(&self, i: usize) -> usize {
        let ws: usize = self.weights.iter().map(|w| 2 * w[0].len()).sum();
        ws + 2 * self.biases.len() + i
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for w in &self.weights {
            out.extend_from_slice(&w[0]);
            out.extend_from_slice(&w[1]);
        }
        for b in &self.biases {
            out.extend_from_slice(b);
        }
        out.extend_from_slice(&self.readout);
    }

    pub fn assign(&mut self, src: &[f64]) -> usize {
        let mut p = 0;
        for w in &mut self.weights {
            for r in w.iter_mut() {
                let n = r.len();
                r.copy_from_slice(&src[p..p + n]);
                p += n;
            }
        }
        for b in &mut self.biases {
            b.copy_from_slice(&src[p..p + 2]);
            p += 2;
        }
        let n = self.readout.len();
        self.readout.copy_from_slice(&src[p..p + n]);
        p + n
    }
}

/// Which inputs feed each equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Components {
    /// Each equation sees only its own unknown.
    Scalar,
    /// Each equation sees both g and ρ.
    TwoComponent,
}

/// Which equations are modeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitTarget {
    G,
    Rho,
    Both,
}

impl FitTarget {
    pub fn has_g(self) -> bool {
        matches!(self, FitTarget::G | FitTarget::Both)
    }
    pub fn has_rho(self) -> bool {
        matches!(self, FitTarget::Rho | FitTarget::Both)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnsatzConfig {
    /// Highest scale M (scales 0..=M).
    pub scales: usize,
    /// Layer count K.
    pub layers: usize,
    pub base_ops: Vec<OperatorTag>,
    pub components: Components,
    pub target: FitTarget,
    pub mean_free_mask: bool,
    /// Upwind order for advection of data at the target location.
    pub adv_order: u8,
}

impl Default for AnsatzConfig {
    fn default() -> Self {
        AnsatzConfig {
            scales: 1,
            layers: 1,
            base_ops: vec![OperatorTag::Identity, OperatorTag::Advection, OperatorTag::Projection],
            components: Components::TwoComponent,
            target: FitTarget::G,
            mean_free_mask: true,
            adv_order: 1,
        }
    }
}

/// Block index: equation q (0 = g, 1 = ρ) and input p (0 = g, 1 = ρ).
pub type BlockId = (usize, usize);

impl AnsatzConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_ops.is_empty() {
            return Err(Error::Config("base_ops must not be empty".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("at least one layer is required".into()));
        }
        if !(1..=2).contains(&self.adv_order) {
            return Err(Error::Config(format!("adv_order {} not in 1..=2", self.adv_order)));
        }
        let mut seen = self.base_ops.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.base_ops.len() {
            return Err(Error::Config("base_ops contains duplicates".into()));
        }
        Ok(())
    }

    pub fn is_linear(&self) -> bool {
        self.base_ops.iter().all(|t| t.is_linear())
    }

    /// Active blocks in canonical order.
    pub fn blocks(&self) -> Vec<BlockId> {
        let mut out = Vec::new();
        for q in 0..2 {
            if (q == 0 && !self.target.has_g()) || (q == 1 && !self.target.has_rho()) {
                continue;
            }
            for p in 0..2 {
                if self.components == Components::Scalar && p != q {
                    continue;
                }
                out.push((q, p));
            }
        }
        out
    }

    /// Whether the C2 weight on base op i of layer k is pinned to zero.
    pub fn is_masked(&self, q: usize, r: usize, i: usize) -> bool {
        q == 0
            && self.mean_free_mask
            && r == 1
            && i < self.base_ops.len()
            && matches!(self.base_ops[i], OperatorTag::Identity | OperatorTag::Projection)
    }

    pub fn target_loc(q: usize) -> Loc {
        if q == 0 {
            Loc::Face
        } else {
            Loc::Center
        }
    }

    pub fn input_loc(p: usize) -> Loc {
        if p == 0 {
            Loc::Face
        } else {
            Loc::Center
        }
    }
}

/// Operator word, outermost first, with Identity factors removed; the
/// identity operator itself is `[Identity]`.
pub type Word = Vec<OperatorTag>;

pub fn canonical(raw: &[OperatorTag]) -> Word {
    let w: Word = raw.iter().copied().filter(|&t| t != OperatorTag::Identity).collect();
    if w.is_empty() {
        vec![OperatorTag::Identity]
    } else {
        w
    }
}

/// Renders a word applied to the named input, e.g. `P(v∂x(g))`.
pub fn render_word(word: &[OperatorTag], input: &str) -> String {
    let mut s = input.to_string();
    for t in word.iter().rev() {
        s = t.render(&s);
    }
    s
}

/// Operator expression Σ c_w·w with ∂c_w/∂θ for the block parameters θ.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    pub nparams: usize,
    pub terms: BTreeMap<Word, (f64, Vec<f64>)>,
}

impl Expr {
    pub fn zero(nparams: usize) -> Self {
        Expr { nparams, terms: BTreeMap::new() }
    }

    /// A single word with a constant unit coefficient.
    pub fn word(nparams: usize, w: Word) -> Self {
        let mut e = Expr::zero(nparams);
        e.terms.insert(canonical(&w), (1.0, vec![0.0; nparams]));
        e
    }

    /// self += weight·other where weight is parameter `idx` (or a constant).
    fn add_scaled(&mut self, other: &Expr, weight: f64, idx: Option<usize>) {
        for (w, (c, g)) in &other.terms {
            let e = self.terms.entry(w.clone()).or_insert_with(|| (0.0, vec![0.0; self.nparams]));
            e.0 += weight * c;
            for (a, b) in e.1.iter_mut().zip(g) {
                *a += weight * b;
            }
            if let Some(i) = idx {
                e.1[i] += c;
            }
        }
    }

    pub fn coefficient(&self, w: &[OperatorTag]) -> f64 {
        self.terms.get(&canonical(w)).map_or(0.0, |t| t.0)
    }
}

/// ⊙-composition: C1∘C2 expanded over words, including the b₁b₂·I term.
pub fn compose_odot(c1: &Expr, c2: &Expr) -> Result<Expr> {
    if c1.nparams != c2.nparams {
        return Err(Error::Config(format!(
            "cannot compose expressions over different parameter sets ({} vs {})",
            c1.nparams, c2.nparams
        )));
    }
    let mut out = Expr::zero(c1.nparams);
    for (w1, (a, ga)) in &c1.terms {
        for (w2, (b, gb)) in &c2.terms {
            let mut w = w1.clone();
            w.extend_from_slice(w2);
            let key = canonical(&w);
            let e = out.terms.entry(key).or_insert_with(|| (0.0, vec![0.0; c1.nparams]));
            e.0 += a * b;
            for ((t, x), y) in e.1.iter_mut().zip(ga).zip(gb) {
                *t += b * x + a * y;
            }
        }
    }
    Ok(out)
}

/// Expands one block at one scale into words with Jacobians.
pub fn build_network(cfg: &AnsatzConfig, lp: &LayerParams, q: usize) -> Result<Expr> {
    cfg.validate()?;
    if !cfg.is_linear() {
        return Err(Error::Config("symbolic expansion requires linear base operators".into()));
    }
    let n = cfg.base_ops.len();
    let k_layers = cfg.layers;
    if lp.weights.len() != k_layers || lp.readout.len() != n + k_layers {
        return Err(Error::Dimension(format!(
            "layer params have {} layers / readout {}, expected {} / {}",
            lp.weights.len(),
            lp.readout.len(),
            k_layers,
            n + k_layers
        )));
    }
    let np = lp.len();
    let mut basis: Vec<Expr> = cfg.base_ops.iter().map(|&t| Expr::word(np, vec![t])).collect();
    let ident = Expr::word(np, vec![OperatorTag::Identity]);
    for k in 0..k_layers {
        if lp.weights[k][0].len() != n + k || lp.weights[k][1].len() != n + k {
            return Err(Error::Dimension(format!("layer {} weight rows must have length {}", k + 1, n + k)));
        }
        let mut c = [Expr::zero(np), Expr::zero(np)];
        for (r, cr) in c.iter_mut().enumerate() {
            for (i, b) in basis.iter().enumerate() {
                if cfg.is_masked(q, r, i) {
                    continue;
                }
                cr.add_scaled(b, lp.weights[k][r][i], Some(lp.weight_index(k, r, i)));
            }
            cr.add_scaled(&ident, lp.biases[k][r], Some(lp.bias_index(k, r)));
        }
        let bk = compose_odot(&c[0], &c[1])?;
        basis.push(bk);
    }
    let mut f = Expr::zero(np);
    for (i, b) in basis.iter().enumerate() {
        f.add_scaled(b, lp.readout[i], Some(lp.readout_index(i)));
    }
    Ok(f)
}

/// Trainable or fixed physical coefficient.
#[derive(Debug, Clone, PartialEq)]
pub enum PhysCoef {
    /// Taken from the dataset.
    Known,
    Zero,
    Scalar(f64),
    Spatial(SpatialWeight),
}

impl PhysCoef {
    pub fn len(&self) -> usize {
        match self {
            PhysCoef::Scalar(_) => 1,
            PhysCoef::Spatial(w) => w.len(),
            _ => 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values at cell centers; `known` supplies the dataset array.
    pub fn resolve(&self, grid: &PhaseGrid, known: &FieldRho) -> FieldRho {
        match self {
            PhysCoef::Known => known.clone(),
            PhysCoef::Zero => FieldRho::zeros(grid.nx),
            PhysCoef::Scalar(v) => FieldRho { data: vec![*v; grid.nx] },
            PhysCoef::Spatial(w) => spatial_eval(w, grid),
        }
    }

    /// Chains ∂L/∂(value at x_j) into the coefficient parameters.
    pub fn chain(&self, grid: &PhaseGrid, dvals: &[f64], out: &mut [f64]) {
        match self {
            PhysCoef::Scalar(_) => out[0] += dvals.iter().sum::<f64>(),
            PhysCoef::Spatial(w) => {
                let d1 = w.degree() + 1;
                for (j, &x) in grid.x_centers.iter().enumerate() {
                    let i = w.piece_of(x);
                    let mut p = 1.0;
                    for k in 0..d1 {
                        out[i * d1 + k] += dvals[j] * p;
                        p *= x;
                    }
                }
            }
            _ => {}
        }
    }

    fn flatten_into(&self, out: &mut Vec<f64>) {
        match self {
            PhysCoef::Scalar(v) => out.push(*v),
            PhysCoef::Spatial(w) => w.coeffs.iter().for_each(|r| out.extend_from_slice(r)),
            _ => {}
        }
    }

    fn assign(&mut self, src: &[f64]) -> usize {
        match self {
            PhysCoef::Scalar(v) => {
                *v = src[0];
                1
            }
            PhysCoef::Spatial(w) => {
                let mut p = 0;
                for r in &mut w.coeffs {
                    let n = r.len();
                    r.copy_from_slice(&src[p..p + n]);
                    p += n;
                }
                p
            }
            _ => 0,
        }
    }
}

/// σ^S, σ^A and G as seen by the fitting schemes.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicsParams {
    pub sigma_s: PhysCoef,
    pub sigma_a: PhysCoef,
    pub source: PhysCoef,
}

impl Default for PhysicsParams {
    fn default() -> Self {
        PhysicsParams { sigma_s: PhysCoef::Known, sigma_a: PhysCoef::Known, source: PhysCoef::Known }
    }
}

impl PhysicsParams {
    pub fn coefs(&self) -> [&PhysCoef; 3] {
        [&self.sigma_s, &self.sigma_a, &self.source]
    }
}

/// Per-scale parameters of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub id: BlockId,
    pub scales: Vec<LayerParams>,
}

/// All trainable state of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub blocks: Vec<BlockParams>,
    pub scale: ScaleParams,
    pub physics: PhysicsParams,
}

impl ModelParams {
    pub fn zeros(cfg: &AnsatzConfig, mode: EpsMode, physics: PhysicsParams) -> Self {
        let n = cfg.base_ops.len();
        let blocks = cfg
            .blocks()
            .into_iter()
            .map(|id| BlockParams { id, scales: vec![LayerParams::zeros(n, cfg.layers); cfg.scales + 1] })
            .collect();
        ModelParams { blocks, scale: ScaleParams { w_eps: 0.0, mode }, physics }
    }

    /// Uniform(−0.05, 0.05) network weights (masked entries stay 0),
    /// w_eps = 0.
    pub fn init(cfg: &AnsatzConfig, mode: EpsMode, physics: PhysicsParams, seed: u64) -> Self {
        let mut p = ModelParams::zeros(cfg, mode, physics);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in &mut p.blocks {
            let q = b.id.0;
            for lp in &mut b.scales {
                for w in lp.weights.iter_mut() {
                    for (r, row) in w.iter_mut().enumerate() {
                        for (i, x) in row.iter_mut().enumerate() {
                            let v = rng.gen_range(-0.05..0.05);
                            *x = if cfg.is_masked(q, r, i) { 0.0 } else { v };
                        }
                    }
                }
                for b in lp.biases.iter_mut() {
                    for x in b.iter_mut() {
                        *x = rng.gen_range(-0.05..0.05);
                    }
                }
                for x in lp.readout.iter_mut() {
                    *x = rng.gen_range(-0.05..0.05);
                }
            }
        }
        p
    }

    pub fn network_len(&self) -> usize {
        self.blocks.iter().map(|b| b.scales.iter().map(|l| l.len()).sum::<usize>()).sum()
    }

    /// Index of w_eps in the flat vector.
    pub fn eps_index(&self) -> usize {
        self.network_len()
    }

    pub fn len(&self) -> usize {
        self.network_len() + 1 + self.physics.coefs().iter().map(|c| c.len()).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Offsets of the three physics coefficients in the flat vector.
    pub fn physics_offsets(&self) -> [usize; 3] {
        let mut o = self.eps_index() + 1;
        let mut out = [0; 3];
        for (i, c) in self.physics.coefs().iter().enumerate() {
            out[i] = o;
            o += c.len();
        }
        out
    }

    /// Offset of block b, scale m.
    pub fn block_offset(&self, b: usize, m: usize) -> usize {
        let mut o = 0;
        for bp in &self.blocks[..b] {
            o += bp.scales.iter().map(|l| l.len()).sum::<usize>();
        }
        o + self.blocks[b].scales[..m].iter().map(|l| l.len()).sum::<usize>()
    }

    /// Network weights, w_eps, then physics coefficients.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for b in &self.blocks {
            for l in &b.scales {
                l.flatten_into(&mut out);
            }
        }
        out.push(self.scale.w_eps);
        for c in self.physics.coefs() {
            c.flatten_into(&mut out);
        }
        out
    }

    pub fn unflatten(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.len() {
            return Err(Error::Dimension(format!("flat vector has {} entries, expected {}", src.len(), self.len())));
        }
        let mut p = 0;
        for b in &mut self.blocks {
            for l in &mut b.scales {
                p += l.assign(&src[p..]);
            }
        }
        self.scale.w_eps = src[p];
        p += 1;
        p += self.physics.sigma_s.assign(&src[p..]);
        p += self.physics.sigma_a.assign(&src[p..]);
        self.physics.source.assign(&src[p..]);
        Ok(())
    }

    /// Human-readable path of flat entry `idx`, for error messages.
    pub fn param_path(&self, idx: usize) -> String {
        let mut o = 0;
        for b in &self.blocks {
            for (m, l) in b.scales.iter().enumerate() {
                if idx < o + l.len() {
                    return format!("block({},{}).m{}[{}]", b.id.0, b.id.1, m, idx - o);
                }
                o += l.len();
            }
        }
        if idx == o {
            return "w_eps".into();
        }
        let names = ["sigma_s", "sigma_a", "source"];
        let offs = self.physics_offsets();
        for i in (0..3).rev() {
            if idx >= offs[i] {
                return format!("{}[{}]", names[i], idx - offs[i]);
            }
        }
        format!("#{idx}")
    }
}

/// Field split by staggered location; parts are index-aligned.
#[derive(Debug, Clone)]
struct LocField {
    face: Option<Vec<f64>>,
    center: Option<Vec<f64>>,
}

impl LocField {
    fn single(loc: Loc, data: Vec<f64>) -> Self {
        match loc {
            Loc::Face => LocField { face: Some(data), center: None },
            Loc::Center => LocField { face: None, center: Some(data) },
        }
    }

    fn axpy(&mut self, a: f64, other: &LocField) {
        for (mine, theirs) in [(&mut self.face, &other.face), (&mut self.center, &other.center)] {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.iter_mut().zip(t).for_each(|(x, y)| *x += a * y),
                    None => *mine = Some(t.iter().map(|y| a * y).collect()),
                }
            }
        }
    }

    fn sum(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for v in [&self.face, &self.center].into_iter().flatten() {
            out.iter_mut().zip(v).for_each(|(x, y)| *x += y);
        }
        out
    }
}

struct Evaluator<'a> {
    cfg: &'a AnsatzConfig,
    lp: &'a LayerParams,
    grid: &'a PhaseGrid,
    q: usize,
}

impl Evaluator<'_> {
    fn apply_tag(&self, tag: OperatorTag, u: &LocField) -> LocField {
        let n = self.grid.len_g();
        let target = AnsatzConfig::target_loc(self.q);
        if !tag.is_linear() {
            // Nonlinear maps act on the merged field, placed at the target.
            let merged = u.sum(n);
            let mut out = vec![0.0; n];
            resolve(tag, target, target, self.cfg.adv_order).0.apply(self.grid, &merged, &mut out);
            return LocField::single(target, out);
        }
        let mut res = LocField { face: None, center: None };
        for (loc, part) in [(Loc::Face, &u.face), (Loc::Center, &u.center)] {
            if let Some(d) = part {
                let (prim, out_loc) = resolve(tag, loc, target, self.cfg.adv_order);
                let mut out = vec![0.0; n];
                prim.apply(self.grid, d, &mut out);
                res.axpy(1.0, &LocField::single(out_loc, out));
            }
        }
        res
    }

    /// C_r^(k)(u) for layer index k (0-based).
    fn eval_c(&self, k: usize, r: usize, u: &LocField) -> LocField {
        let n = self.cfg.base_ops.len();
        let mut acc = LocField { face: None, center: None };
        for (i, &t) in self.cfg.base_ops.iter().enumerate() {
            if self.cfg.is_masked(self.q, r, i) {
                continue;
            }
            let w = self.lp.weights[k][r][i];
            acc.axpy(w, &self.apply_tag(t, u));
        }
        for j in 0..k {
            let w = self.lp.weights[k][r][n + j];
            acc.axpy(w, &self.eval_b(j, u));
        }
        acc.axpy(self.lp.biases[k][r], u);
        acc
    }

    fn eval_b(&self, k: usize, u: &LocField) -> LocField {
        let inner = self.eval_c(k, 1, u);
        self.eval_c(k, 0, &inner)
    }

    fn eval_f(&self, u: &LocField) -> Vec<f64> {
        let n = self.cfg.base_ops.len();
        let mut acc = LocField { face: None, center: None };
        for (i, &t) in self.cfg.base_ops.iter().enumerate() {
            acc.axpy(self.lp.readout[i], &self.apply_tag(t, u));
        }
        for k in 0..self.cfg.layers {
            acc.axpy(self.lp.readout[n + k], &self.eval_b(k, u));
        }
        acc.sum(self.grid.len_g())
    }
}

/// Applies one block network recursively to an input field of length
/// nv·nx located at `AnsatzConfig::input_loc(p)`.
pub fn eval_block(cfg: &AnsatzConfig, lp: &LayerParams, grid: &PhaseGrid, q: usize, p: usize, input: &[f64]) -> Vec<f64> {
    let ev = Evaluator { cfg, lp, grid, q };
    ev.eval_f(&LocField::single(AnsatzConfig::input_loc(p), input.to_vec()))
}

/// Applies a (canonical) word to data at `loc` inside equation q.
pub fn apply_word(word: &[OperatorTag], loc: Loc, q: usize, order: u8, grid: &PhaseGrid, input: &[f64]) -> Vec<f64> {
    let target = AnsatzConfig::target_loc(q);
    let mut cur = input.to_vec();
    let mut tmp = vec![0.0; cur.len()];
    let mut loc = loc;
    for &t in word.iter().rev() {
        let (prim, nl) = resolve(t, loc, target, order);
        if prim == Prim::Identity {
            continue;
        }
        prim.apply(grid, &cur, &mut tmp);
        std::mem::swap(&mut cur, &mut tmp);
        loc = nl;
    }
    cur
}

/// Lifts ρ to a constant-in-v g-shaped array.
pub fn lift_data(grid: &PhaseGrid, rho: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(grid.len_g());
    for _ in 0..grid.nv {
        out.extend_from_slice(rho);
    }
    out
}

/// Subtracts the velocity average from every row in place.
pub fn remove_mean_data(grid: &PhaseGrid, u: &mut [f64]) {
    let mut m = vec![0.0; grid.nx];
    average_rows(grid, u, &mut m);
    for r in u.chunks_mut(grid.nx) {
        r.iter_mut().zip(&m).for_each(|(a, b)| *a -= b);
    }
}

/// F1 and F2 evaluated directly from the network recursion.
///
/// With the mean-free mask on, F1 is additionally projected onto
/// mean-free fields by (I − ⟨⟩).
pub fn eval_ansatz(params: &ModelParams, cfg: &AnsatzConfig, g: &FieldG, rho: &FieldRho, grid: &PhaseGrid) -> Result<(FieldG, FieldRho)> {
    g.check(grid)?;
    rho.check(grid)?;
    let eps = eps_pred(&params.scale);
    let lifted = lift_data(grid, &rho.data);
    let mut f1 = vec![0.0; grid.len_g()];
    let mut f2g = vec![0.0; grid.len_g()];
    for b in &params.blocks {
        let (q, p) = b.id;
        let input = if p == 0 { &g.data } else { &lifted };
        for (m, lp) in b.scales.iter().enumerate() {
            let out = eval_block(cfg, lp, grid, q, p, input);
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::Overflow(m));
            }
            let s = eps.powi(-(m as i32));
            let acc = if q == 0 { &mut f1 } else { &mut f2g };
            acc.iter_mut().zip(&out).for_each(|(a, o)| *a += s * o);
        }
    }
    if cfg.mean_free_mask {
        remove_mean_data(grid, &mut f1);
    }
    let mut f2 = vec![0.0; grid.nx];
    average_rows(grid, &f2g, &mut f2);
    if f1.iter().chain(f2.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Overflow(cfg.scales));
    }
    Ok((FieldG { nv: grid.nv, nx: grid.nx, data: f1 }, FieldRho { data: f2 }))
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| Error::Format(format!("bad number '{t}'"))))
        .collect()
}

fn fmt_phys(c: &PhysCoef) -> String {
    match c {
        PhysCoef::Known => "known".into(),
        PhysCoef::Zero => "zero".into(),
        PhysCoef::Scalar(v) => format!("scalar:{v:?}"),
        PhysCoef::Spatial(w) => {
            let flat: Vec<f64> = w.coeffs.iter().flatten().copied().collect();
            format!("spatial:{}:{}:{}", w.pieces(), w.degree(), fmt_list(&flat))
        }
    }
}

fn parse_phys(s: &str) -> Result<PhysCoef> {
    let parts: Vec<&str> = s.splitn(4, ':').collect();
    match parts[0] {
        "known" => Ok(PhysCoef::Known),
        "zero" => Ok(PhysCoef::Zero),
        "scalar" if parts.len() == 2 => {
            Ok(PhysCoef::Scalar(parts[1].parse().map_err(|_| Error::Format(format!("bad scalar '{s}'")))?))
        }
        "spatial" if parts.len() == 4 => {
            let np: usize = parts[1].parse().map_err(|_| Error::Format(format!("bad piece count in '{s}'")))?;
            let deg: usize = parts[2].parse().map_err(|_| Error::Format(format!("bad degree in '{s}'")))?;
            let flat = parse_list(parts[3])?;
            let mut w = SpatialWeight::uniform(np, deg, 0.0).map_err(|e| Error::Format(e.to_string()))?;
            if flat.len() != w.len() {
                return Err(Error::Format(format!("spatial weight expects {} coefficients", w.len())));
            }
            for (i, r) in w.coeffs.iter_mut().enumerate() {
                r.copy_from_slice(&flat[i * (deg + 1)..(i + 1) * (deg + 1)]);
            }
            Ok(PhysCoef::Spatial(w))
        }
        _ => Err(Error::Format(format!("bad physics coefficient '{s}'"))),
    }
}

/// Writes the configuration and parameters as `key = value` lines.
/// Floats use the shortest representation that round-trips exactly.
pub fn checkpoint_to_string(cfg: &AnsatzConfig, params: &ModelParams) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "format = kinlearn-checkpoint-1");
    let _ = writeln!(s, "scales = {}", cfg.scales);
    let _ = writeln!(s, "layers = {}", cfg.layers);
    let ops: Vec<&str> = cfg.base_ops.iter().map(|t| t.name()).collect();
    let _ = writeln!(s, "base_ops = {}", ops.join(","));
    let comp = match cfg.components {
        Components::Scalar => "scalar",
        Components::TwoComponent => "two_component",
    };
    let _ = writeln!(s, "components = {comp}");
    let target = match cfg.target {
        FitTarget::G => "g",
        FitTarget::Rho => "rho",
        FitTarget::Both => "both",
    };
    let _ = writeln!(s, "target = {target}");
    let _ = writeln!(s, "mean_free_mask = {}", cfg.mean_free_mask);
    let _ = writeln!(s, "adv_order = {}", cfg.adv_order);
    let mode = match params.scale.mode {
        EpsMode::Global => "global".to_string(),
        EpsMode::Interval(i) => format!("interval:{i}"),
    };
    let _ = writeln!(s, "eps_mode = {mode}");
    let _ = writeln!(s, "w_eps = {:?}", params.scale.w_eps);
    for b in &params.blocks {
        for (m, lp) in b.scales.iter().enumerate() {
            let pre = format!("block.{}.{}.m{}", b.id.0, b.id.1, m);
            for (k, w) in lp.weights.iter().enumerate() {
                for (r, row) in w.iter().enumerate() {
                    let _ = writeln!(s, "{pre}.w.{k}.{r} = {}", fmt_list(row));
                }
                let _ = writeln!(s, "{pre}.b.{k} = {}", fmt_list(&lp.biases[k]));
            }
            let _ = writeln!(s, "{pre}.readout = {}", fmt_list(&lp.readout));
        }
    }
    let _ = writeln!(s, "physics.sigma_s = {}", fmt_phys(&params.physics.sigma_s));
    let _ = writeln!(s, "physics.sigma_a = {}", fmt_phys(&params.physics.sigma_a));
    let _ = writeln!(s, "physics.source = {}", fmt_phys(&params.physics.source));
    s
}

/// Parses a checkpoint produced by [`checkpoint_to_string`].
pub fn checkpoint_from_str(text: &str) -> Result<(AnsatzConfig, ModelParams)> {
    let mut kv: BTreeMap<String, String> = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format(format!("line {}: expected key = value", ln + 1)))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| kv.get(k).cloned().ok_or_else(|| Error::Format(format!("missing key '{k}'")));
    if get("format")? != "kinlearn-checkpoint-1" {
        return Err(Error::Format("unknown checkpoint format".into()));
    }
    let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Format(format!("bad integer for '{k}'"))) };
    let base_ops = get("base_ops")?
        .split(',')
        .map(|t| OperatorTag::parse(t.trim()).map_err(|e| Error::Format(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let components = match get("components")?.as_str() {
        "scalar" => Components::Scalar,
        "two_component" => Components::TwoComponent,
        o => return Err(Error::Format(format!("bad components '{o}'"))),
    };
    let target = match get("target")?.as_str() {
        "g" => FitTarget::G,
        "rho" => FitTarget::Rho,
        "both" => FitTarget::Both,
        o => return Err(Error::Format(format!("bad target '{o}'"))),
    };
    let cfg = AnsatzConfig {
        scales: num("scales")?,
        layers: num("layers")?,
        base_ops,
        components,
        target,
        mean_free_mask: get("mean_free_mask")? == "true",
        adv_order: num("adv_order")? as u8,
    };
    cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
    let mode = match get("eps_mode")?.as_str() {
        "global" => EpsMode::Global,
        m => match m.strip_prefix("interval:").and_then(|i| i.parse().ok()) {
            Some(i) => EpsMode::Interval(i),
            None => return Err(Error::Format(format!("bad eps_mode '{m}'"))),
        },
    };
    let physics = PhysicsParams {
        sigma_s: parse_phys(&get("physics.sigma_s")?)?,
        sigma_a: parse_phys(&get("physics.sigma_a")?)?,
        source: parse_phys(&get("physics.source")?)?,
    };
    let mut params = ModelParams::zeros(&cfg, mode, physics);
    params.scale.w_eps = get("w_eps")?.parse().map_err(|_| Error::Format("bad w_eps".into()))?;
    for b in &mut params.blocks {
        for (m, lp) in b.scales.iter_mut().enumerate() {
            let pre = format!("block.{}.{}.m{}", b.id.0, b.id.1, m);
            let fill = |dst: &mut [f64], key: String| -> Result<()> {
                let v = parse_list(&get(&key)?)?;
                if v.len() != dst.len() {
                    return Err(Error::Format(format!("'{key}' has {} values, expected {}", v.len(), dst.len())));
                }
                dst.copy_from_slice(&v);
                Ok(())
            };
            for k in 0..lp.weights.len() {
                for r in 0..2 {
                    fill(&mut lp.weights[k][r], format!("{pre}.w.{k}.{r}"))?;
                }
                fill(&mut lp.biases[k], format!("{pre}.b.{k}"))?;
            }
            fill(&mut lp.readout, format!("{pre}.readout"))?;
        }
    }
    Ok((cfg, params))
}

pub fn save_checkpoint(cfg: &AnsatzConfig, params: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(cfg, params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(AnsatzConfig, ModelParams)> {
    checkpoint_from_str(&std::fs::read_to_string(path)?)
}
