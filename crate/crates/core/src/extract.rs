//! Coefficient tables: expansion of trained parameters, ground truth,
//! pruning, rendering and error metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::PhaseGrid;
use crate::operators::{average_rows, FieldRho, OperatorTag};
use crate::symnet::{
    apply_word, build_network, eps_pred, lift_data, remove_mean_data, AnsatzConfig, EpsMode, ModelParams, PhysCoef,
    PhysicsParams, ScaleParams, SpatialWeight, Word,
};

/// Word of one equation acting on one input: (equation q, input p, word).
/// q = 0 is the g-equation, q = 1 the ρ-equation; p = 0 is g, p = 1 is ρ.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OperatorWord {
    pub eq: usize,
    pub input: usize,
    pub word: Word,
}

impl OperatorWord {
    pub fn new(eq: usize, input: usize, word: &[OperatorTag]) -> Self {
        OperatorWord { eq, input, word: crate::symnet::canonical(word) }
    }

    /// Text form; ρ-equation terms on g (or carrying v) show the velocity
    /// average explicitly.
    pub fn render(&self) -> String {
        let name = if self.input == 0 { "g" } else { "ρ" };
        let inner = crate::symnet::render_word(&self.word, name);
        if self.eq == 1 {
            let has_v = self.input == 0 || self.word.contains(&OperatorTag::Advection);
            if has_v && self.word[0] != OperatorTag::Projection {
                return OperatorTag::Projection.render(&inner);
            }
        }
        inner
    }
}

/// Coefficient: a scalar or per-cell values.
#[derive(Debug, Clone, PartialEq)]
pub enum Coef {
    Scalar(f64),
    Field(Vec<f64>),
}

impl Coef {
    /// Entry at cell j (scalars broadcast).
    pub fn at(&self, j: usize) -> f64 {
        match self {
            Coef::Scalar(v) => *v,
            Coef::Field(f) => f[j],
        }
    }

    fn len(&self) -> usize {
        match self {
            Coef::Scalar(_) => 1,
            Coef::Field(f) => f.len(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        match self {
            Coef::Scalar(v) => v.abs(),
            Coef::Field(f) => f.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }

    /// Mean absolute value.
    pub fn magnitude(&self) -> f64 {
        match self {
            Coef::Scalar(v) => v.abs(),
            Coef::Field(f) => f.iter().map(|x| x.abs()).sum::<f64>() / f.len().max(1) as f64,
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        match self {
            Coef::Scalar(v) => (*v, *v),
            Coef::Field(f) => f.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x))),
        }
    }

    pub fn add(&self, other: &Coef) -> Coef {
        match (self, other) {
            (Coef::Scalar(a), Coef::Scalar(b)) => Coef::Scalar(a + b),
            _ => {
                let n = self.len().max(other.len());
                Coef::Field((0..n).map(|j| self.at(j) + other.at(j)).collect())
            }
        }
    }

    pub fn scale(&self, s: f64) -> Coef {
        match self {
            Coef::Scalar(a) => Coef::Scalar(a * s),
            Coef::Field(f) => Coef::Field(f.iter().map(|x| x * s).collect()),
        }
    }

    /// Mean over cells of |a − b|.
    pub fn distance(&self, other: &Coef) -> f64 {
        let n = self.len().max(other.len());
        (0..n).map(|j| (self.at(j) - other.at(j)).abs()).sum::<f64>() / n as f64
    }

    /// Collapses a constant field to a scalar.
    fn simplify(self) -> Coef {
        match self {
            Coef::Field(f) if f.windows(2).all(|w| w[0] == w[1]) && !f.is_empty() => Coef::Scalar(f[0]),
            c => c,
        }
    }
}

/// Map from operator word to total coefficient.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CoefficientTable {
    pub entries: BTreeMap<OperatorWord, Coef>,
}

impl CoefficientTable {
    /// Adds c to the entry of `w`, creating it when absent.
    pub fn accumulate(&mut self, w: OperatorWord, c: Coef) {
        let e = self.entries.entry(w).or_insert(Coef::Scalar(0.0));
        *e = e.add(&c);
    }

    pub fn get(&self, eq: usize, input: usize, word: &[OperatorTag]) -> Option<&Coef> {
        self.entries.get(&OperatorWord::new(eq, input, word))
    }

    /// Scalar coefficient of a word, 0 when absent (fields give their mean).
    pub fn scalar(&self, eq: usize, input: usize, word: &[OperatorTag]) -> f64 {
        match self.get(eq, input, word) {
            None => 0.0,
            Some(Coef::Scalar(v)) => *v,
            Some(Coef::Field(f)) => f.iter().sum::<f64>() / f.len() as f64,
        }
    }

    pub fn equation(&self, eq: usize) -> impl Iterator<Item = (&OperatorWord, &Coef)> {
        self.entries.iter().filter(move |(w, _)| w.eq == eq)
    }
}

/// Ansatz-only coefficients Σ_m ε_pred^{−m}·a(θ_m).
///
/// With the mean-free mask, the g-equation output is (I−⟨⟩)F1, so every
/// word w contributes c to w and −c to ⟨⟩∘w.
pub fn expand_coefficients(params: &ModelParams, cfg: &AnsatzConfig) -> Result<CoefficientTable> {
    let eps = eps_pred(&params.scale);
    let mut table = CoefficientTable::default();
    for b in &params.blocks {
        let (q, p) = b.id;
        for (m, lp) in b.scales.iter().enumerate() {
            let e = build_network(cfg, lp, q)?;
            let s = eps.powi(-(m as i32));
            for (w, (c, _)) in &e.terms {
                table.accumulate(OperatorWord::new(q, p, w), Coef::Scalar(s * c));
                if q == 0 && cfg.mean_free_mask {
                    let mut pw = vec![OperatorTag::Projection];
                    pw.extend_from_slice(w);
                    table.accumulate(OperatorWord::new(q, p, &pw), Coef::Scalar(-s * c));
                }
            }
        }
    }
    Ok(table)
}

/// Values of the fitted physics at cell centers (`Known` from `known`).
pub fn physics_values(physics: &PhysicsParams, grid: &PhaseGrid, known: [&FieldRho; 3]) -> [Coef; 3] {
    let c = physics.coefs();
    let mut out = [Coef::Scalar(0.0), Coef::Scalar(0.0), Coef::Scalar(0.0)];
    for i in 0..3 {
        out[i] = Coef::Field(c[i].resolve(grid, known[i]).data).simplify();
    }
    out
}

/// Adds the stiff and absorption prefactors held outside the ansatz:
/// g-equation g-coefficient −σ^S/ε_pred² − σ^A and ρ-equation ρ-coefficient −σ^A.
pub fn fold_physics(table: &CoefficientTable, params: &ModelParams, grid: &PhaseGrid, known: [&FieldRho; 3]) -> CoefficientTable {
    let eps = eps_pred(&params.scale);
    let [ss, sa, _] = physics_values(&params.physics, grid, known);
    let mut out = table.clone();
    let fold_g = ss.scale(-1.0 / (eps * eps)).add(&sa.scale(-1.0)).simplify();
    let id = [OperatorTag::Identity];
    if out.entries.keys().any(|w| w.eq == 0) {
        out.accumulate(OperatorWord::new(0, 0, &id), fold_g);
    }
    if out.entries.keys().any(|w| w.eq == 1) && sa.max_abs() > 0.0 {
        out.accumulate(OperatorWord::new(1, 1, &id), sa.scale(-1.0).simplify());
    }
    out
}

/// Folded table: ansatz coefficients plus physics prefactors.
pub fn expand_folded(params: &ModelParams, cfg: &AnsatzConfig, grid: &PhaseGrid, known: [&FieldRho; 3]) -> Result<CoefficientTable> {
    Ok(fold_physics(&expand_coefficients(params, cfg)?, params, grid, known))
}

/// Scattering coefficient implied by a trained spatial σ^S at scale ε:
/// ε²·(σ^S(x)/ε_pred² − c_I), where c_I is the network's coefficient on g
/// in the g-equation. `None` unless σ^S is a trainable spatial weight.
pub fn effective_sigma_s(params: &ModelParams, cfg: &AnsatzConfig, eps: f64) -> Result<Option<SpatialWeight>> {
    let PhysCoef::Spatial(w) = &params.physics.sigma_s else {
        return Ok(None);
    };
    let table = expand_coefficients(params, cfg)?;
    let ci = table.scalar(0, 0, &[OperatorTag::Identity]);
    let ep = eps_pred(&params.scale);
    let mut out = w.clone();
    for row in &mut out.coeffs {
        row.iter_mut().for_each(|c| *c *= eps * eps / (ep * ep));
        row[0] -= eps * eps * ci;
    }
    Ok(Some(out))
}

/// Exact coefficients of the governing system at scale ε.
pub fn truth_table(eps: f64, sigma_s: &FieldRho, sigma_a: &FieldRho, g_eq: bool, rho_eq: bool) -> CoefficientTable {
    use OperatorTag::*;
    let mut t = CoefficientTable::default();
    let ss = Coef::Field(sigma_s.data.clone()).simplify();
    let sa = Coef::Field(sigma_a.data.clone()).simplify();
    if g_eq {
        t.accumulate(OperatorWord::new(0, 0, &[Identity]), ss.scale(-1.0 / (eps * eps)).add(&sa.scale(-1.0)).simplify());
        t.accumulate(OperatorWord::new(0, 0, &[Advection]), Coef::Scalar(-1.0 / eps));
        t.accumulate(OperatorWord::new(0, 0, &[Projection, Advection]), Coef::Scalar(1.0 / eps));
        t.accumulate(OperatorWord::new(0, 1, &[Advection]), Coef::Scalar(-1.0 / (eps * eps)));
    }
    if rho_eq {
        t.accumulate(OperatorWord::new(1, 0, &[Advection]), Coef::Scalar(-1.0));
        if sa.max_abs() > 0.0 {
            t.accumulate(OperatorWord::new(1, 1, &[Identity]), sa.scale(-1.0));
        }
    }
    t
}

/// w_eps realizing ε_pred = eps under `mode`.
pub fn w_eps_for(eps: f64, mode: EpsMode) -> Result<f64> {
    let h = match mode {
        EpsMode::Global => eps,
        EpsMode::Interval(i) => {
            let (lo, hi) = crate::symnet::interval_bounds(i);
            (eps - lo) / (hi - lo)
        }
    };
    if !(h > 0.0 && h < 1.0) {
        return Err(Error::Config(format!("ε = {eps} is not reachable in mode {mode:?}")));
    }
    Ok((2.0 * h - 1.0).atanh())
}

/// Parameters whose expansion reproduces the governing system at scale ε.
///
/// `g_identity` is the ansatz g-coefficient of the g-equation (zero when
/// σ^S, σ^A are folded in by the fitting scheme). A coefficient c·ε^{−k}
/// is placed on scale min(k, M) with the remaining powers folded into c.
pub fn implant_truth(cfg: &AnsatzConfig, eps: f64, mode: EpsMode, physics: PhysicsParams, g_identity: f64) -> Result<ModelParams> {
    use OperatorTag::*;
    cfg.validate()?;
    let find = |t: OperatorTag| cfg.base_ops.iter().position(|&b| b == t);
    let adv = find(Advection).ok_or_else(|| Error::Config("truth implant needs the advection operator".into()))?;
    let mut p = ModelParams::zeros(cfg, mode, physics);
    p.scale = ScaleParams { w_eps: if cfg.scales > 0 { w_eps_for(eps, mode)? } else { w_eps_for(eps, mode).unwrap_or(0.0) }, mode };
    let place = |k: i32| -> (usize, f64) {
        let m = (k as usize).min(cfg.scales);
        (m, eps.powi(-(k - m as i32)))
    };
    let n = cfg.base_ops.len();
    for b in &mut p.blocks {
        match b.id {
            (0, 0) => {
                let (m, f) = place(1);
                b.scales[m].readout[adv] = -f;
                if !cfg.mean_free_mask {
                    let pr = find(Projection).ok_or_else(|| Error::Config("truth implant without mask needs the projection".into()))?;
                    if cfg.layers == 0 {
                        return Err(Error::Config("truth implant without mask needs at least one layer".into()));
                    }
                    let lp = &mut b.scales[m];
                    lp.weights[0][0][pr] = 1.0;
                    lp.weights[0][1][adv] = 1.0;
                    lp.readout[n] = f;
                }
                if g_identity != 0.0 {
                    let id = find(Identity).ok_or_else(|| Error::Config("truth implant needs the identity operator".into()))?;
                    b.scales[0].readout[id] = g_identity;
                }
            }
            (0, 1) => {
                let (m, f) = place(2);
                b.scales[m].readout[adv] = -f;
            }
            (1, 0) => b.scales[0].readout[adv] = -1.0,
            _ => {}
        }
    }
    Ok(p)
}

/// Zeroes entries with |c| < threshold·max|c| (per equation).
pub fn prune(table: &CoefficientTable, threshold: f64) -> CoefficientTable {
    let mut out = table.clone();
    for eq in 0..2 {
        let max = table.equation(eq).map(|(_, c)| c.max_abs()).fold(0.0, f64::max);
        for (w, c) in out.entries.iter_mut() {
            if w.eq == eq && c.max_abs() < threshold * max {
                *c = Coef::Scalar(0.0);
            }
        }
    }
    out
}

/// (Type-I, Type-II) in percent over the union of both word sets.
pub fn error_metrics(exact: &CoefficientTable, predicted: &CoefficientTable) -> Result<(f64, f64)> {
    let mut words: Vec<&OperatorWord> = exact.entries.keys().chain(predicted.entries.keys()).collect();
    words.sort();
    words.dedup();
    let zero = Coef::Scalar(0.0);
    let pairs: Vec<(Coef, Coef)> = words
        .iter()
        .map(|w| (exact.entries.get(w).unwrap_or(&zero).clone(), predicted.entries.get(w).unwrap_or(&zero).clone()))
        .collect();
    metrics_from_pairs(&pairs)
}

fn metrics_from_pairs(pairs: &[(Coef, Coef)]) -> Result<(f64, f64)> {
    let den: f64 = pairs.iter().map(|(e, _)| e.magnitude()).sum();
    if den == 0.0 {
        return Err(Error::UndefinedMetric);
    }
    let num: f64 = pairs.iter().map(|(e, p)| e.distance(p)).sum();
    let rel: Vec<f64> = pairs.iter().filter(|(e, _)| e.magnitude() > 0.0).map(|(e, p)| e.distance(p) / e.magnitude()).collect();
    Ok((100.0 * num / den, 100.0 * rel.iter().sum::<f64>() / rel.len() as f64))
}

/// A group of words that act identically on mean-free probe data.
#[derive(Debug, Clone)]
pub struct MergedTerm {
    pub words: Vec<OperatorWord>,
    pub exact: Coef,
    pub predicted: Coef,
}

/// Merges words that coincide on random probes and drops words that
/// vanish on them. Probes for g are mean-free, as all admissible g are.
pub fn merge_equivalent(exact: &CoefficientTable, predicted: &CoefficientTable, grid: &PhaseGrid, adv_order: u8, seed: u64) -> Vec<MergedTerm> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g: Vec<f64> = (0..grid.len_g()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    remove_mean_data(grid, &mut g);
    let rho: Vec<f64> = (0..grid.nx).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let lifted = lift_data(grid, &rho);

    let mut words: Vec<&OperatorWord> = exact.entries.keys().chain(predicted.entries.keys()).collect();
    words.sort();
    words.dedup();
    let probe = |w: &OperatorWord| -> Vec<f64> {
        let input = if w.input == 0 { &g } else { &lifted };
        let out = apply_word(&w.word, AnsatzConfig::input_loc(w.input), w.eq, adv_order, grid, input);
        if w.eq == 0 {
            out
        } else {
            let mut c = vec![0.0; grid.nx];
            average_rows(grid, &out, &mut c);
            c
        }
    };
    let fields: Vec<Vec<f64>> = words.iter().map(|w| probe(w)).collect();
    let zero = Coef::Scalar(0.0);
    let mut groups: Vec<(Vec<f64>, MergedTerm)> = Vec::new();
    for (w, f) in words.iter().zip(fields) {
        let scale = f.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if scale < 1e-9 {
            continue;
        }
        let e = exact.entries.get(w).unwrap_or(&zero);
        let p = predicted.entries.get(w).unwrap_or(&zero);
        let hit = groups.iter_mut().find(|(gf, t)| {
            t.words[0].eq == w.eq
                && t.words[0].input == w.input
                && gf.iter().zip(&f).all(|(a, b)| (a - b).abs() <= 1e-9 * scale)
        });
        match hit {
            Some((_, t)) => {
                t.words.push((*w).clone());
                t.exact = t.exact.add(e);
                t.predicted = t.predicted.add(p);
            }
            None => groups.push((f, MergedTerm { words: vec![(*w).clone()], exact: e.clone(), predicted: p.clone() })),
        }
    }
    groups.into_iter().map(|(_, t)| t).collect()
}

/// Metrics after probe-equivalence merging.
pub fn error_metrics_merged(
    exact: &CoefficientTable,
    predicted: &CoefficientTable,
    grid: &PhaseGrid,
    adv_order: u8,
) -> Result<(f64, f64)> {
    let terms = merge_equivalent(exact, predicted, grid, adv_order, 7);
    let pairs: Vec<(Coef, Coef)> = terms.into_iter().map(|t| (t.exact, t.predicted)).collect();
    metrics_from_pairs(&pairs)
}

/// Fixed-precision number with trailing zeros trimmed.
pub fn format_number(v: f64) -> String {
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.').to_string();
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

fn format_coef(c: &Coef) -> String {
    match c {
        Coef::Scalar(v) => format_number(*v),
        Coef::Field(_) => {
            let (a, b) = c.min_max();
            format!("[{}, {}]", format_number(a), format_number(b))
        }
    }
}

/// `∂t g = c₁·Op₁ + …`: terms on g first, then terms on ρ, each group
/// sorted by |coefficient| descending; zero entries are omitted.
pub fn render_pde(table: &CoefficientTable, eq: usize) -> String {
    let mut terms: Vec<(&OperatorWord, &Coef)> = table.equation(eq).filter(|(_, c)| c.max_abs() > 0.0).collect();
    terms.sort_by(|a, b| {
        a.0.input
            .cmp(&b.0.input)
            .then(b.1.max_abs().partial_cmp(&a.1.max_abs()).unwrap_or(std::cmp::Ordering::Equal))
    });
    let mut s = format!("∂t {} = ", if eq == 0 { "g" } else { "ρ" });
    if terms.is_empty() {
        s.push('0');
        return s;
    }
    for (i, (w, c)) in terms.iter().enumerate() {
        let body = match c {
            Coef::Scalar(v) => {
                let sign = if *v < 0.0 { "-" } else { "+" };
                let mag = format_number(v.abs());
                if i == 0 {
                    format!("{}{}·{}", if *v < 0.0 { "-" } else { "" }, mag, w.render())
                } else {
                    format!(" {sign} {mag}·{}", w.render())
                }
            }
            Coef::Field(_) => {
                let lead = if i == 0 { "" } else { " + " };
                format!("{lead}{}·{}", format_coef(c), w.render())
            }
        };
        s.push_str(&body);
    }
    s
}

/// Report CSV: `word,exact,predicted,abs_error` rows over merged terms,
/// then the `type1_pct,type2_pct` summary.
pub fn report_csv(exact: &CoefficientTable, predicted: &CoefficientTable, grid: &PhaseGrid, adv_order: u8) -> Result<String> {
    let terms = merge_equivalent(exact, predicted, grid, adv_order, 7);
    let (t1, t2) = error_metrics_merged(exact, predicted, grid, adv_order)?;
    let mut s = String::from("word,exact,predicted,abs_error\n");
    for t in &terms {
        let eq = if t.words[0].eq == 0 { "g" } else { "rho" };
        let name = t.words.iter().map(|w| w.render()).collect::<Vec<_>>().join(" ~ ");
        let _ = writeln!(
            s,
            "{eq}:{},{},{},{}",
            name.replace(',', ";"),
            format_coef(&t.exact).replace(", ", ";"),
            format_coef(&t.predicted).replace(", ", ";"),
            format_number(t.exact.distance(&t.predicted))
        );
    }
    let _ = writeln!(s, "type1_pct,type2_pct\n{},{}", format_number(t1), format_number(t2));
    Ok(s)
}

pub fn write_report(path: &Path, exact: &CoefficientTable, predicted: &CoefficientTable, grid: &PhaseGrid, adv_order: u8) -> Result<()> {
    std::fs::write(path, report_csv(exact, predicted, grid, adv_order)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use OperatorTag::*;

    #[test]
    fn metrics_arithmetic() {
        let mut e = CoefficientTable::default();
        let mut p = CoefficientTable::default();
        e.accumulate(OperatorWord::new(0, 0, &[Advection]), Coef::Scalar(2.0));
        p.accumulate(OperatorWord::new(0, 0, &[Advection]), Coef::Scalar(1.0));
        e.accumulate(OperatorWord::new(0, 0, &[Projection]), Coef::Scalar(0.0));
        p.accumulate(OperatorWord::new(0, 0, &[Projection]), Coef::Scalar(0.0));
        let (t1, t2) = error_metrics(&e, &p).unwrap();
        assert!((t1 - 50.0).abs() < 1e-12 && (t2 - 50.0).abs() < 1e-12);
        assert_eq!(error_metrics(&e, &e).unwrap(), (0.0, 0.0));
        assert!(matches!(error_metrics(&CoefficientTable::default(), &p), Err(Error::UndefinedMetric)));
    }

    #[test]
    fn prune_keeps_ties() {
        let mut t = CoefficientTable::default();
        t.accumulate(OperatorWord::new(0, 0, &[Advection]), Coef::Scalar(1.0));
        t.accumulate(OperatorWord::new(0, 0, &[Projection]), Coef::Scalar(1e-3));
        t.accumulate(OperatorWord::new(0, 1, &[Advection]), Coef::Scalar(1e-9));
        let p = prune(&t, 1e-3);
        assert_eq!(p.scalar(0, 0, &[Projection]), 1e-3);
        assert_eq!(p.scalar(0, 1, &[Advection]), 0.0);
        assert_eq!(prune(&t, 0.0), t);
    }

    #[test]
    fn render_empty_and_numbers() {
        assert_eq!(render_pde(&CoefficientTable::default(), 0), "∂t g = 0");
        assert_eq!(format_number(-256.00000000000003), "-256");
        assert_eq!(format_number(0.985353), "0.985353");
    }
}
