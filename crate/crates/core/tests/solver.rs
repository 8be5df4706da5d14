use kinlearn::grid::make_grid;
use kinlearn::operators::{FieldG, FieldRho};
use kinlearn::solver::*;

fn run(spec: &PhysicsSpec, grid: &kinlearn::grid::PhaseGrid, dt: f64, steps: usize) -> KineticState {
    let mut s = KineticState { g: spec.g0.clone(), rho: spec.rho0.clone() };
    for _ in 0..steps {
        s = step_ars222(&s, spec, grid, dt).unwrap();
    }
    s
}

fn diff_l1(a: &KineticState, b: &KineticState) -> f64 {
    let dg: f64 = a.g.data.iter().zip(&b.g.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.g.data.len() as f64;
    let dr: f64 = a.rho.data.iter().zip(&b.rho.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.rho.data.len() as f64;
    dg + dr
}

#[test]
fn equilibrium_is_stationary() {
    let grid = make_grid(16, 4).unwrap();
    let spec = PhysicsSpec {
        epsilon: 0.1,
        sigma_s: FieldRho { data: vec![1.0; 16] },
        sigma_a: FieldRho::zeros(16),
        source_g: FieldRho::zeros(16),
        rho0: FieldRho { data: vec![2.5; 16] },
        g0: FieldG::zeros(4, 16),
    };
    let s0 = KineticState { g: spec.g0.clone(), rho: spec.rho0.clone() };
    let s1 = step_ars222(&s0, &spec, &grid, 1e-3).unwrap();
    assert!(s1.g.max_abs() < 1e-14);
    assert!(s1.rho.data.iter().all(|r| (r - 2.5).abs() < 1e-14));
}

#[test]
fn mass_and_mean_are_conserved() {
    let grid = make_grid(50, 16).unwrap();
    let spec = PhysicsSpec::well_prepared(&grid, 1.0 / 16.0, |x| 1.0 + x, |_| 0.0, |_| 0.0).unwrap();
    let dt = 0.5 * grid.dx * grid.dx;
    let m0 = mass(&spec.rho0, &grid);
    let mut s = KineticState { g: spec.g0.clone(), rho: spec.rho0.clone() };
    for _ in 0..1000 {
        s = step_ars222(&s, &spec, &grid, dt).unwrap();
        assert!(max_mean(&s.g, &grid) < 1e-10);
    }
    assert!((mass(&s.rho, &grid) - m0).abs() < 1e-10);
}

#[test]
fn ars222_self_convergence_is_second_order() {
    let grid = make_grid(40, 8).unwrap();
    let spec = PhysicsSpec::well_prepared(&grid, 0.5, |_| 1.0, |_| 0.2, |x| 0.1 * x).unwrap();
    let t = 0.04;
    let base = 2e-3;
    let sols: Vec<KineticState> = (0..3)
        .map(|k| {
            let dt = base / 2f64.powi(k);
            run(&spec, &grid, dt, (t / dt).round() as usize)
        })
        .collect();
    let e1 = diff_l1(&sols[0], &sols[1]);
    let e2 = diff_l1(&sols[1], &sols[2]);
    let order = (e1 / e2).log2();
    assert!(order >= 1.9, "observed order {order}");
}

#[test]
fn generation_is_deterministic_and_subsampled() {
    let grid = make_grid(100, 16).unwrap();
    let spec = PhysicsSpec::well_prepared(&grid, 1.0 / 16.0, |_| 1.0, |_| 0.0, |_| 0.0).unwrap();
    let dt = 0.5 * grid.dx * grid.dx;
    let a = generate_dataset(&spec, &grid, dt, 200, 2, 10).unwrap();
    let b = generate_dataset(&spec, &grid, dt, 200, 2, 10).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.nt(), 20);
    assert_eq!((a.g_seq[0].nv, a.g_seq[0].nx), (16, 50));
    assert_eq!(a.rho_seq[5].data.len(), 50);
    assert!((a.dt() - 10.0 * dt).abs() < 1e-18);
    for g in &a.g_seq {
        assert!(max_mean(g, &a.grid) < 1e-10);
    }
}

#[test]
fn dataset_round_trip_and_corruption() {
    let grid = make_grid(20, 4).unwrap();
    let spec = PhysicsSpec::well_prepared(&grid, 0.25, |_| 1.0, |_| 0.0, |_| 0.0).unwrap();
    let ds = generate_dataset(&spec, &grid, 1e-4, 6, 1, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.kds");
    save_dataset(&ds, &p).unwrap();
    let back = load_dataset(&p).unwrap();
    assert_eq!(back.g_seq, ds.g_seq);
    assert_eq!(back.rho_seq, ds.rho_seq);
    assert_eq!(back.spec.sigma_s, ds.spec.sigma_s);
    assert_eq!(back.times, ds.times);

    let bytes = std::fs::read(&p).unwrap();
    let t = dir.path().join("t.kds");
    std::fs::write(&t, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_dataset(&t), Err(kinlearn::Error::Corrupt(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&t, &bad).unwrap();
    assert!(matches!(load_dataset(&t), Err(kinlearn::Error::Format(_))));
}

#[test]
fn diffusion_limit_matches_heat_equation() {
    use std::f64::consts::PI;
    let grid = make_grid(200, 16).unwrap();
    let spec = PhysicsSpec::well_prepared(&grid, 1.0 / 2048.0, |_| 1.0 / 3.0, |_| 0.0, |_| 0.0).unwrap();
    let dt = suggested_dt(&grid, spec.epsilon);
    let steps = (0.02 / dt).round() as usize;
    let s = run(&spec, &grid, dt, steps);
    let t = dt * steps as f64;
    let decay = (-4.0 * PI * PI * t).exp();
    let (mut num, mut den) = (0.0, 0.0);
    for (j, &x) in grid.x_centers.iter().enumerate() {
        let exact = 1.0 + 0.5 * decay * (2.0 * PI * x).sin();
        num += (s.rho.data[j] - exact).abs();
        den += exact.abs();
    }
    let rel = num / den;
    eprintln!("diffusion-limit relative L1 = {rel:e}");
    assert!(rel < 0.02);
}
