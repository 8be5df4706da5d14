use std::collections::BTreeSet;

use kinlearn::extract::implant_truth;
use kinlearn::grid::make_grid;
use kinlearn::operators::{advect_staggered, advect_upwind, lift, project, FieldG, FieldRho, Loc, OperatorTag};
use kinlearn::symnet::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use OperatorTag::*;

fn nonzero(e: &Expr) -> usize {
    e.terms.values().filter(|t| t.0 != 0.0).count()
}

fn random_params(cfg: &AnsatzConfig, seed: u64, scale: f64) -> ModelParams {
    let mut p = ModelParams::init(cfg, EpsMode::Global, PhysicsParams::default(), seed);
    let mut flat = p.flatten();
    flat.iter_mut().for_each(|x| *x *= scale);
    flat[p.eps_index()] = 0.3;
    p.unflatten(&flat).unwrap();
    p
}

fn random_fields(grid: &kinlearn::grid::PhaseGrid, seed: u64, mean_free: bool) -> (FieldG, FieldRho) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = FieldG::zeros(grid.nv, grid.nx);
    g.data.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
    if mean_free {
        remove_mean_data(grid, &mut g.data);
    }
    let mut rho = FieldRho::zeros(grid.nx);
    rho.data.iter_mut().for_each(|x| *x = rng.gen_range(0.5..1.5));
    (g, rho)
}

/// Words reachable by the recursion, by set enumeration.
fn enumerate_words(ops: &[OperatorTag], layers: usize) -> BTreeSet<Word> {
    let mut basis: Vec<BTreeSet<Word>> = ops.iter().map(|&t| BTreeSet::from([canonical(&[t])])).collect();
    for _ in 0..layers {
        let mut c: BTreeSet<Word> = basis.iter().flatten().cloned().collect();
        c.insert(vec![Identity]);
        let mut b = BTreeSet::new();
        for w1 in &c {
            for w2 in &c {
                let mut w = w1.clone();
                w.extend_from_slice(w2);
                b.insert(canonical(&w));
            }
        }
        basis.push(b);
    }
    basis.into_iter().flatten().collect()
}

#[test]
fn odot_examples() {
    let np = 0;
    let c = compose_odot(&Expr::word(np, vec![Advection]), &Expr::word(np, vec![Projection])).unwrap();
    assert_eq!(c.terms.len(), 1);
    assert_eq!(c.coefficient(&[Advection, Projection]), 1.0);
    let cfg = AnsatzConfig { base_ops: vec![Advection], layers: 1, mean_free_mask: false, ..Default::default() };
    let mut lp = LayerParams::zeros(1, 1);
    lp.biases[0] = [2.0, -3.0];
    lp.readout[1] = 1.0;
    let f = build_network(&cfg, &lp, 0).unwrap();
    assert_eq!(nonzero(&f), 1);
    assert_eq!(f.coefficient(&[Identity]), -6.0);
}

#[test]
fn readout_only_network_is_a_linear_combination() {
    let cfg = AnsatzConfig { base_ops: vec![Identity, Advection], layers: 1, ..Default::default() };
    let mut lp = LayerParams::zeros(2, 1);
    lp.readout = vec![0.7, -1.3, 0.0];
    let f = build_network(&cfg, &lp, 0).unwrap();
    assert_eq!(nonzero(&f), 2);
    assert_eq!(f.coefficient(&[Identity]), 0.7);
    assert_eq!(f.coefficient(&[Advection]), -1.3);
}

#[test]
fn second_layer_composes_the_first() {
    let cfg = AnsatzConfig { base_ops: vec![Advection, Projection], layers: 2, mean_free_mask: false, ..Default::default() };
    let mut lp = LayerParams::zeros(2, 2);
    // B1 = A∘P, B2 = B1∘A; only B2 is read out.
    lp.weights[0][0][0] = 1.0;
    lp.weights[0][1][1] = 1.0;
    lp.weights[1][0][2] = 1.0;
    lp.weights[1][1][0] = 1.0;
    lp.readout[3] = 1.0;
    let f = build_network(&cfg, &lp, 0).unwrap();
    assert_eq!(nonzero(&f), 1);
    assert_eq!(f.coefficient(&[Advection, Projection, Advection]), 1.0);
}

#[test]
fn dictionary_matches_exhaustive_enumeration() {
    let all = [Identity, Advection, Projection];
    for n in 1..=3 {
        for k in 1..=2 {
            let ops = all[..n].to_vec();
            let cfg = AnsatzConfig { base_ops: ops.clone(), layers: k, mean_free_mask: false, ..Default::default() };
            let mut lp = LayerParams::zeros(n, k);
            let mut rng = ChaCha8Rng::seed_from_u64((n * 10 + k) as u64);
            let mut flat = Vec::new();
            lp.flatten_into(&mut flat);
            flat.iter_mut().for_each(|x| *x = rng.gen_range(0.5..1.5));
            lp.assign(&flat);
            let built: BTreeSet<Word> = build_network(&cfg, &lp, 0).unwrap().terms.keys().cloned().collect();
            assert_eq!(built, enumerate_words(&ops, k), "n={n} K={k}");
        }
    }
}

#[test]
fn masked_words_ending_in_projection_vanish_on_mean_free_data() {
    let grid = make_grid(16, 8).unwrap();
    let (g, _) = random_fields(&grid, 5, true);
    let cfg = AnsatzConfig { layers: 2, ..Default::default() };
    let lp = random_params(&cfg, 9, 10.0).blocks[0].scales[0].clone();
    let f = build_network(&cfg, &lp, 0).unwrap();
    let mut checked = 0;
    for w in f.terms.keys() {
        if w.last() == Some(&Projection) {
            let out = apply_word(w, Loc::Face, 0, 1, &grid, &g.data);
            assert!(out.iter().all(|x| x.abs() < 1e-12), "{w:?}");
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn zero_params_evaluate_to_zero() {
    let grid = make_grid(12, 4).unwrap();
    let (g, rho) = random_fields(&grid, 1, true);
    let cfg = AnsatzConfig { target: FitTarget::Both, ..Default::default() };
    let p = ModelParams::zeros(&cfg, EpsMode::Global, PhysicsParams::default());
    let (f1, f2) = eval_ansatz(&p, &cfg, &g, &rho, &grid).unwrap();
    assert_eq!(f1.max_abs(), 0.0);
    assert!(f2.data.iter().all(|x| *x == 0.0));
}

#[test]
fn implanted_truth_reproduces_the_micro_equation() {
    let eps = 1.0 / 16.0;
    let grid = make_grid(20, 16).unwrap();
    let (g, rho) = random_fields(&grid, 3, true);
    let cfg = AnsatzConfig { scales: 2, ..Default::default() };
    let p = implant_truth(&cfg, eps, EpsMode::Global, PhysicsParams::default(), 0.0).unwrap();
    let (f1, _) = eval_ansatz(&p, &cfg, &g, &rho, &grid).unwrap();
    let a = advect_upwind(&g, &grid, 1).unwrap();
    let pa = project(&a, &grid).unwrap();
    let r = advect_staggered(&lift(&rho, &grid).unwrap(), &grid, Loc::Face).unwrap();
    let scale = f1.max_abs();
    for i in 0..f1.data.len() {
        let exact = -(a.data[i] - pa.data[i]) / eps - r.data[i] / (eps * eps);
        assert!((f1.data[i] - exact).abs() < 1e-10 * scale, "entry {i}");
    }
}

#[test]
fn spatial_eval_matches_horner_oracle() {
    let grid = make_grid(50, 2).unwrap();
    let c = SpatialWeight::uniform(1, 1, 2.5).unwrap();
    assert!(spatial_eval(&c, &grid).data.iter().all(|y| *y == 2.5));
    let mut w = SpatialWeight::uniform(10, 2, 0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for row in &mut w.coeffs {
        row.iter_mut().for_each(|a| *a = rng.gen_range(-2.0..2.0));
    }
    let vals = spatial_eval(&w, &grid);
    for (j, &x) in grid.x_centers.iter().enumerate() {
        let piece = ((x * 10.0).floor() as usize).min(9);
        let row = &w.coeffs[piece];
        let horner = row.iter().rev().fold(0.0, |acc, a| acc * x + a);
        assert!((vals.data[j] - horner).abs() < 1e-14);
    }
    let mut lin = SpatialWeight::uniform(2, 1, 0.0).unwrap();
    lin.coeffs = vec![vec![1.0, 3.0], vec![1.0, 3.0]];
    for (y, x) in spatial_eval(&lin, &grid).data.iter().zip(&grid.x_centers) {
        assert!((y - (1.0 + 3.0 * x)).abs() < 1e-14);
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let cfg = AnsatzConfig { scales: 2, layers: 2, target: FitTarget::Both, base_ops: vec![Identity, Advection, Projection, LapX], ..Default::default() };
    let mut phys = PhysicsParams::default();
    phys.sigma_s = PhysCoef::Spatial(SpatialWeight::uniform(4, 2, 0.3).unwrap());
    phys.source = PhysCoef::Scalar(0.1);
    let p = ModelParams { physics: phys, ..random_params(&cfg, 2, 3.0) };
    let (c2, p2) = checkpoint_from_str(&checkpoint_to_string(&cfg, &p)).unwrap();
    assert_eq!(c2, cfg);
    assert_eq!(p2, p);
    assert!(checkpoint_from_str("format = nonsense").is_err());
}

proptest! {
    #[test]
    fn masked_g_output_is_mean_free(seed in 0u64..100_000, layers in 1usize..=2, scales in 0usize..=2) {
        let grid = make_grid(12, 8).unwrap();
        let cfg = AnsatzConfig { layers, scales, ..Default::default() };
        let p = random_params(&cfg, seed, 20.0);
        let (g, rho) = random_fields(&grid, seed + 7, true);
        let (f1, _) = eval_ansatz(&p, &cfg, &g, &rho, &grid).unwrap();
        let mut m = vec![0.0; grid.nx];
        kinlearn::operators::average_rows(&grid, &f1.data, &mut m);
        let tol = 1e-11 * f1.max_abs().max(1.0);
        prop_assert!(m.iter().all(|x| x.abs() < tol), "max mean {}", m.iter().fold(0.0f64, |a, b| a.max(b.abs())));
    }

    #[test]
    fn linear_network_is_linear_in_g(seed in 0u64..10_000) {
        let grid = make_grid(10, 4).unwrap();
        let cfg = AnsatzConfig { layers: 2, scales: 1, components: Components::Scalar, ..Default::default() };
        let p = random_params(&cfg, seed, 5.0);
        let (g1, rho) = random_fields(&grid, seed + 1, false);
        let (g2, _) = random_fields(&grid, seed + 2, false);
        let mut g12 = g1.clone();
        g12.data.iter_mut().zip(&g2.data).for_each(|(a, b)| *a += b);
        let e = |g: &FieldG| eval_ansatz(&p, &cfg, g, &rho, &grid).unwrap().0;
        let (a, b, c) = (e(&g1), e(&g2), e(&g12));
        let tol = 1e-10 * c.max_abs().max(1.0);
        for i in 0..c.data.len() {
            prop_assert!((c.data[i] - a.data[i] - b.data[i]).abs() < tol);
        }
    }

    #[test]
    fn readout_scaling_scales_the_output(seed in 0u64..10_000, c in -4.0f64..4.0) {
        let grid = make_grid(10, 4).unwrap();
        let cfg = AnsatzConfig { scales: 1, components: Components::Scalar, ..Default::default() };
        let mut p = random_params(&cfg, seed, 5.0);
        for b in &mut p.blocks {
            b.scales[0] = LayerParams::zeros(3, 1);
        }
        let (g, rho) = random_fields(&grid, seed, true);
        let base = eval_ansatz(&p, &cfg, &g, &rho, &grid).unwrap().0;
        let mut q = p.clone();
        for b in &mut q.blocks {
            b.scales[1].readout.iter_mut().for_each(|x| *x *= c);
        }
        let scaled = eval_ansatz(&q, &cfg, &g, &rho, &grid).unwrap().0;
        let tol = 1e-12 * base.max_abs().max(1.0) * (1.0 + c.abs());
        for i in 0..base.data.len() {
            prop_assert!((scaled.data[i] - c * base.data[i]).abs() < tol);
        }
    }

    #[test]
    fn eps_pred_stays_in_its_interval(w in -15.0f64..15.0, i in 0usize..4) {
        let e = eps_pred(&ScaleParams { w_eps: w, mode: EpsMode::Global });
        prop_assert!(e > 0.0 && e <= 1.0);
        let (lo, hi) = interval_bounds(i);
        let e = eps_pred(&ScaleParams { w_eps: w, mode: EpsMode::Interval(i) });
        prop_assert!(e >= lo && e <= hi);
    }
}
