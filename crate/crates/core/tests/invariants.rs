use dlfm_core::experiments::{aligned_accuracy, relabel};
use dlfm_core::kernels::{project, prox_block};
use dlfm_core::model::kl_divergence;
use dlfm_core::{
    fd_gradient, loss_eval, loss_grad, solve_f_plain, validate, ConstraintAtom, Dataset, FactorMatrix, Labels,
    LossAtom, LossMatrix, ModelSpec, RegularizerAtom,
};
use proptest::prelude::*;

/// A loss atom together with a feature row count and a valid observation.
fn loss_case() -> impl Strategy<Value = (LossAtom, usize, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let vec3 = || prop::collection::vec(-3.0..3.0f64, 3);
    (0..6usize, vec3(), vec3(), vec3(), -3.0..3.0f64, 0..3usize).prop_map(|(which, x, t1, t2, y, cls)| match which {
        0 => (LossAtom::square(), 1, x, vec![y], t1, t2),
        1 => (LossAtom::huber(0.7), 1, x, vec![y], t1, t2),
        2 => (LossAtom::lp(3.0), 1, x, vec![y], t1, t2),
        3 => (LossAtom::squared_distance(), 1, x, vec![y], t1, t2),
        4 => (LossAtom::binary_logit(), 1, x, vec![if y > 0.0 { 1.0 } else { 0.0 }], t1, t2),
        _ => {
            // three rows of a single feature each
            let mut onehot = vec![0.0; 3];
            onehot[cls] = 1.0;
            (LossAtom::multinomial_logit(), 3, x, onehot, t1[..1].to_vec(), t2[..1].to_vec())
        }
    })
}

fn simplex_row(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01..1.0f64, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn constraint_set() -> impl Strategy<Value = Vec<ConstraintAtom>> {
    prop_oneof![
        Just(vec![ConstraintAtom::Box { lo: vec![-1.0, 0.0, -0.5, -2.0], hi: vec![1.0, 0.5, 2.0, 0.0] }]),
        Just(vec![ConstraintAtom::NormBall2 { radius: 1.5 }]),
        Just(vec![ConstraintAtom::Nonneg, ConstraintAtom::SumEquals { value: 1.0 }]),
        Just(vec![ConstraintAtom::MonotoneNonincreasing]),
        Just(vec![ConstraintAtom::MonotoneNondecreasing, ConstraintAtom::Box { lo: vec![-1.0; 4], hi: vec![1.0; 4] }]),
        Just(vec![ConstraintAtom::Polyhedron { a: vec![vec![1.0, 1.0, 0.0, 0.0], vec![0.0, -1.0, 2.0, 1.0]], b: vec![0.5, 1.0] }]),
        Just(vec![ConstraintAtom::NormBall2 { radius: 2.0 }, ConstraintAtom::Nonneg]),
    ]
}

fn max_violation(atoms: &[ConstraintAtom], x: &[f64]) -> f64 {
    atoms.iter().map(|a| a.violation(x)).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn losses_are_convex_along_segments(case in loss_case(), t in 0.0..1.0f64) {
        let (atom, rows, x, y, t1, t2) = case;
        let mid: Vec<f64> = t1.iter().zip(&t2).map(|(a, b)| t * a + (1.0 - t) * b).collect();
        let f1 = loss_eval(&atom, &x, rows, &y, &t1).unwrap();
        let f2 = loss_eval(&atom, &x, rows, &y, &t2).unwrap();
        let fm = loss_eval(&atom, &x, rows, &y, &mid).unwrap();
        prop_assert!(fm <= t * f1 + (1.0 - t) * f2 + 1e-9 * (1.0 + f1.abs() + f2.abs()));
    }

    #[test]
    fn gradients_match_central_differences(case in loss_case()) {
        let (atom, rows, x, y, theta, _) = case;
        let g = loss_grad(&atom, &x, rows, &y, &theta).unwrap();
        let fd = fd_gradient(|th| loss_eval(&atom, &x, rows, &y, th).unwrap(), &theta, 1e-6);
        let scale = 1.0 + g.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for (a, b) in g.iter().zip(&fd) {
            prop_assert!((a - b).abs() <= 1e-5 * scale, "{a} vs {b}");
        }
    }

    #[test]
    fn projection_is_idempotent_and_optimal(
        atoms in constraint_set(),
        v in prop::collection::vec(-4.0..4.0f64, 4),
        w in prop::collection::vec(-4.0..4.0f64, 4),
    ) {
        let p = project(&atoms, &v).unwrap();
        prop_assert!(max_violation(&atoms, &p) <= 1e-7);
        let again = project(&atoms, &p).unwrap();
        for (a, b) in p.iter().zip(&again) {
            prop_assert!((a - b).abs() <= 1e-7);
        }
        // variational inequality against another feasible point
        let y = project(&atoms, &w).unwrap();
        let inner: f64 = (0..4).map(|j| (v[j] - p[j]) * (y[j] - p[j])).sum();
        prop_assert!(inner <= 1e-6, "{inner}");
    }

    #[test]
    fn l1_prox_matches_grid_search(v in -5.0..5.0f64, step in 0.01..2.0f64, weight in 0.0..2.0f64) {
        let p = prox_block(&RegularizerAtom::L1 { weight }, &[v], step).unwrap()[0];
        let obj = |x: f64| 0.5 * (x - v).powi(2) + step * weight * x.abs();
        let argmin = |grid: &mut dyn Iterator<Item = f64>| grid.min_by(|a, b| obj(*a).total_cmp(&obj(*b))).unwrap();
        let coarse = argmin(&mut (-6000..=6000).map(|i| i as f64 * 1e-3));
        let best = argmin(&mut (-10_000..=10_000).map(|i| coarse + i as f64 * 1e-7));
        prop_assert!((p - best).abs() <= 1e-6);
        prop_assert!(obj(p) <= obj(best) + 1e-12);
    }

    #[test]
    fn group_prox_matches_grid_on_ray(v in prop::collection::vec(-3.0..3.0f64, 3), weight in 0.0..3.0f64) {
        let p = prox_block(&RegularizerAtom::GroupL2 { weight }, &v, 1.0).unwrap();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // the minimizer is a nonnegative multiple of v
        let obj = |s: f64| 0.5 * (s - 1.0).powi(2) * norm * norm + weight * s * norm;
        let s = (0..=10000).map(|i| i as f64 * 1e-4).min_by(|a, b| obj(*a).total_cmp(&obj(*b))).unwrap();
        for (pj, vj) in p.iter().zip(&v) {
            prop_assert!((pj - s * vj).abs() <= 1e-3);
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_the_diagonal(u in simplex_row(4), v in simplex_row(4)) {
        prop_assert!(kl_divergence(&u, &v) >= -1e-15);
        prop_assert!(kl_divergence(&u, &u).abs() <= 1e-15);
    }

    #[test]
    fn plain_f_step_beats_any_soft_assignment(
        r in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 3), 1..8),
        z in prop::collection::vec(simplex_row(3), 8),
    ) {
        let losses = LossMatrix::from_rows(&r).unwrap();
        let opt = solve_f_plain(&losses).weighted_sum(&losses);
        let other = FactorMatrix::from_rows(&z[..r.len()]).unwrap().weighted_sum(&losses);
        prop_assert!(opt <= other + 1e-12);
    }

    #[test]
    fn aligned_accuracy_ignores_label_names(
        pred in prop::collection::vec(1..=3usize, 1..40),
        truth_seed in prop::collection::vec(1..=3usize, 40),
        perm in Just(vec![1usize, 2, 3]).prop_shuffle(),
    ) {
        let truth = Labels(truth_seed[..pred.len()].to_vec());
        let pred = Labels(pred);
        let (a, _) = aligned_accuracy(&pred, &truth, 3).unwrap();
        let (b, _) = aligned_accuracy(&relabel(&pred, &perm), &truth, 3).unwrap();
        prop_assert!((a - b).abs() <= 1e-15);
        prop_assert_eq!(aligned_accuracy(&pred, &pred, 3).unwrap().0, 1.0);
    }

    #[test]
    fn validate_is_pure(k in 1..4usize, n in 1..4usize, delta in -1.0..1.0f64, l1 in -1.0..1.0f64) {
        let spec = ModelSpec::new(k, n, LossAtom::huber(delta)).with_p_regularizer(RegularizerAtom::L1 { weight: l1 });
        let data = Dataset::from_vectors(&[vec![0.5; n], vec![-0.5; n]], &[1.0, 2.0]).unwrap();
        let before = spec.clone();
        let a = validate(&spec, &data);
        let b = validate(&spec, &data);
        prop_assert_eq!(&spec, &before);
        prop_assert_eq!(a.is_ok(), delta > 0.0 && l1 >= 0.0);
        prop_assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }
}

#[test]
fn plain_f_step_matches_enumeration() {
    let r = LossMatrix::from_rows(&[
        vec![3.0, 1.0, 2.0],
        vec![-1.0, 0.5, -1.0],
        vec![0.0, 0.0, 4.0],
        vec![2.5, 7.0, -3.0],
        vec![1.0, 1.0, 1.0],
    ])
    .unwrap();
    let mut best = f64::INFINITY;
    for code in 0..3usize.pow(5) {
        let labels = Labels((0..5).map(|i| (code / 3usize.pow(i)) % 3 + 1).collect());
        best = best.min(FactorMatrix::one_hot(&labels, 3).weighted_sum(&r));
    }
    let z = solve_f_plain(&r);
    assert_eq!(z.weighted_sum(&r), best);
    assert_eq!(dlfm_core::harden(&z).0, vec![2, 1, 1, 3, 1]);
}
