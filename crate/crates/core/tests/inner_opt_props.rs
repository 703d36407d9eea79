use proptest::prelude::*;
use smpcontrol::inner_opt::{lbfgs_maximize, InitPolicy, OptOptions};
use smpcontrol::problems::{hamiltonian, make_builtin, BuiltinParams, Domain};

fn spd(k: usize, entries: &[f64]) -> Vec<f64> {
    // A = LLᵀ + I with L lower-triangular from `entries`
    let mut l = vec![0.0; k * k];
    let mut it = entries.iter();
    for i in 0..k {
        for j in 0..=i {
            l[i * k + j] = *it.next().unwrap();
        }
    }
    let mut a = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            a[i * k + j] = (0..k).map(|m| l[i * k + m] * l[j * k + m]).sum::<f64>() + if i == j { 1.0 } else { 0.0 };
        }
    }
    a
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn concave_quadratics_reach_the_vertex(entries in prop::collection::vec(-1.0..1.0f64, 6), b in prop::collection::vec(-3.0..3.0f64, 3), u0 in prop::collection::vec(-5.0..5.0f64, 3)) {
        let k = 3;
        let a = spd(k, &entries);
        let f = |u: &[f64]| {
            let au: Vec<f64> = (0..k).map(|i| (0..k).map(|j| a[i * k + j] * u[j]).sum()).collect();
            let value = (0..k).map(|i| -0.5 * u[i] * au[i] + b[i] * u[i]).sum();
            let grad = (0..k).map(|i| b[i] - au[i]).collect();
            Ok((value, grad))
        };
        let opts = OptOptions { tol: 1e-10, ..OptOptions::default() };
        let r = lbfgs_maximize(f, &u0, &Domain::Free, &opts).unwrap();
        prop_assert!(r.grad_norm <= 1e-8, "{r:?}");
        prop_assert!(r.iters <= k + 1, "took {} iterations", r.iters);
    }

    #[test]
    fn never_below_the_starting_value(c in prop::collection::vec(-3.0..3.0f64, 2), w in 0.0..4.0f64, u0 in prop::collection::vec(-4.0..4.0f64, 2), iters in 1usize..20) {
        // concave part plus a wiggle that makes the objective nonconcave
        let f = |u: &[f64]| {
            let value = -(u[0] - c[0]).powi(2) - (u[1] - c[1]).powi(2) + w * (3.0 * u[0]).sin();
            let grad = vec![-2.0 * (u[0] - c[0]) + 3.0 * w * (3.0 * u[0]).cos(), -2.0 * (u[1] - c[1])];
            Ok((value, grad))
        };
        let start = f(&u0).unwrap().0;
        let opts = OptOptions { max_iters: iters, ..OptOptions::default() };
        let r = lbfgs_maximize(f, &u0, &Domain::Free, &opts).unwrap();
        prop_assert!(r.value >= start);
        let boxed = Domain::Box { lo: vec![-1.0, -1.0], hi: vec![1.0, 0.5] };
        let clamped = [u0[0].clamp(-1.0, 1.0), u0[1].clamp(-1.0, 0.5)];
        let r = lbfgs_maximize(f, &u0, &boxed, &opts).unwrap();
        prop_assert!(r.value >= f(&clamped).unwrap().0);
        prop_assert!(r.u[0] >= -1.0 && r.u[0] <= 1.0 && r.u[1] >= -1.0 && r.u[1] <= 0.5);
    }

    #[test]
    fn warm_start_never_worse_than_zero_start(x in prop::collection::vec(-2.0..2.0f64, 3), p in prop::collection::vec(-2.0..2.0f64, 3), q in prop::collection::vec(-2.0..2.0f64, 3), drift in prop::collection::vec(-0.05..0.05f64, 3)) {
        // a step along a path: warm start from the maximizer at a nearby point
        let prob = make_builtin("lq", 3, &BuiltinParams::default()).unwrap();
        let (prob, p, q) = (&prob, &p, &q);
        let objective = |x: Vec<f64>| move |u: &[f64]| {
            let e = hamiltonian(prob.as_ref(), 0.0, &x, u, p, q)?;
            Ok((e.value, e.grad_u))
        };
        let opts = OptOptions { max_iters: 3, ..OptOptions::default() };
        let prev = lbfgs_maximize(objective(x.clone()), &[0.0; 3], &Domain::Free, &opts).unwrap();
        let next_x: Vec<f64> = x.iter().zip(&drift).map(|(a, b)| a + b).collect();
        let warm = lbfgs_maximize(objective(next_x.clone()), &prev.u, &Domain::Free, &opts).unwrap();
        let cold = lbfgs_maximize(objective(next_x), &prev.u, &Domain::Free, &OptOptions { init: InitPolicy::Zero, ..opts }).unwrap();
        prop_assert!(warm.value >= cold.value - 1e-12 * cold.value.abs().max(1.0), "{} < {}", warm.value, cold.value);
    }
}
