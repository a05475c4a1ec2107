use dlfm_core::fsolve::{kl_objective, solve_f_kl_with};
use dlfm_core::{
    objective, solve_f_kl, solve_p, ConstraintAtom, Dataset, FactorMatrix, LossAtom, LossMatrix, ModelSpec,
    RegularizerAtom,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_regression(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Dataset {
    let xs: Vec<Vec<f64>> = (0..m).map(|_| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let ys: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
    Dataset::from_vectors(&xs, &ys).unwrap()
}

fn random_soft(rng: &mut ChaCha8Rng, m: usize, k: usize) -> FactorMatrix {
    let rows: Vec<Vec<f64>> = (0..m)
        .map(|_| {
            let v: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
        .collect();
    FactorMatrix::from_rows(&rows).unwrap()
}

#[test]
fn free_square_loss_matches_weighted_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (m, n, k) = (30, 3, 2);
    let data = random_regression(&mut rng, m, n);
    let z = random_soft(&mut rng, m, k);
    let spec = ModelSpec::new(k, n, LossAtom::square());
    let out = solve_p(&spec, &data, &z, None).unwrap();
    for j in 0..k {
        let mut a = DMatrix::zeros(n, n);
        let mut b = DVector::zeros(n);
        for i in 0..m {
            let x = DVector::from_column_slice(data.feature(i));
            let w = z.get(i, j);
            a += &x * x.transpose() * w;
            b += &x * (w * data.observation(i)[0]);
        }
        let theta = a.lu().solve(&b).unwrap();
        for c in 0..n {
            assert!((out.thetas[j][c] - theta[c]).abs() <= 1e-8 * theta[c].abs().max(1.0));
        }
    }
}

#[test]
fn p_step_never_increases_the_objective_and_stays_feasible() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cases = [
        (LossAtom::huber(0.5), vec![ConstraintAtom::Box { lo: vec![-0.3; 3], hi: vec![0.3; 3] }]),
        (LossAtom::lp(1.0), vec![ConstraintAtom::NormBall2 { radius: 0.5 }]),
        (LossAtom::square(), vec![ConstraintAtom::Polyhedron { a: vec![vec![1.0, -1.0, 1.0]], b: vec![0.2] }]),
        (LossAtom::squared_distance(), vec![ConstraintAtom::MonotoneNondecreasing]),
    ];
    for (loss, atoms) in cases {
        let data = random_regression(&mut rng, 25, 3);
        let z = random_soft(&mut rng, 25, 2);
        let spec = ModelSpec::new(2, 3, loss).with_shared_constraints(atoms.clone());
        let warm = vec![vec![0.0; 3], vec![0.0; 3]];
        let out = solve_p(&spec, &data, &z, Some(&warm)).unwrap();
        let before = objective(&spec, &data, &warm, &z);
        let after = objective(&spec, &data, &out.thetas, &z);
        assert!(after <= before + 1e-10, "{after} > {before}");
        for theta in &out.thetas {
            for a in &atoms {
                assert!(a.violation(theta) <= 1e-6, "{a:?} violated by {theta:?}");
            }
        }
    }
}

#[test]
fn l1_regularized_p_step_beats_perturbations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data = random_regression(&mut rng, 40, 4);
    let z = random_soft(&mut rng, 40, 2);
    let spec = ModelSpec::new(2, 4, LossAtom::square()).with_p_regularizer(RegularizerAtom::L1 { weight: 3.0 });
    let out = solve_p(&spec, &data, &z, None).unwrap();
    let best = objective(&spec, &data, &out.thetas, &z);
    for _ in 0..200 {
        let mut t = out.thetas.clone();
        for v in t.iter_mut().flatten() {
            *v += rng.random_range(-1e-3..1e-3);
        }
        assert!(objective(&spec, &data, &t, &z) >= best - 1e-9);
    }
}

#[test]
fn kl_step_matches_grid_search_on_three_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..3 {
        let rows: Vec<Vec<f64>> = (0..3).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let r = LossMatrix::from_rows(&rows).unwrap();
        let weight = rng.random_range(0.1..2.0);
        let out = solve_f_kl(&r, weight, &FactorMatrix::uniform(3, 2)).unwrap();

        let grid: Vec<f64> = (0..=200).map(|i| i as f64 / 200.0).collect();
        let mut best = f64::INFINITY;
        for &a in &grid {
            for &b in &grid {
                for &c in &grid {
                    let z = FactorMatrix::from_rows(&[vec![a, 1.0 - a], vec![b, 1.0 - b], vec![c, 1.0 - c]]).unwrap();
                    best = best.min(kl_objective(&r, weight, &z));
                }
            }
        }
        assert!(out.objective <= best + 1e-3, "{} vs grid {best}", out.objective);
        assert!(out.objective >= best - 0.05);
    }
}

#[test]
fn kl_step_history_is_nonincreasing() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows: Vec<Vec<f64>> = (0..50).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let r = LossMatrix::from_rows(&rows).unwrap();
    let init = random_soft(&mut rng, 50, 3);
    let out = solve_f_kl(&r, 0.7, &init).unwrap();
    assert!(out.converged);
    assert!(out.history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    assert!(out.objective <= kl_objective(&r, 0.7, &init));
}

#[test]
fn heavy_kl_weight_forces_consensus() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let rows: Vec<Vec<f64>> = (0..10).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let r = LossMatrix::from_rows(&rows).unwrap();
    let out = solve_f_kl_with(&r, 1e4, &FactorMatrix::uniform(10, 2), 1e-12, 200_000).unwrap();
    for t in 1..10 {
        for c in 0..2 {
            assert!((out.z.get(t, c) - out.z.get(0, c)).abs() <= 1e-2);
        }
    }
}

#[test]
fn zero_kl_weight_reduces_to_plain_step() {
    let r = LossMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, -1.0]]).unwrap();
    let out = solve_f_kl(&r, 0.0, &FactorMatrix::uniform(3, 2)).unwrap();
    assert!((out.objective - -1.0).abs() <= 1e-6);
    assert_eq!(dlfm_core::harden(&out.z).0, vec![2, 1, 2]);
}
