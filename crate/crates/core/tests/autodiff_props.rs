use proptest::prelude::*;
use smpcontrol::autodiff::{finite_diff_check, Graph, Var};
use smpcontrol::{Result, Tensor};

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-5;

fn small_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, len)
}

// Each builder reduces to a scalar with a weighted sum so that every output
// entry carries a distinct adjoint.
fn weighted_sum(g: &mut Graph, v: Var) -> Result<Var> {
    let (r, c) = (g.rows(v), g.cols(v));
    let w: Vec<f64> = (0..r * c).map(|i| 0.3 + 0.17 * i as f64).collect();
    let w = g.constant(Tensor::matrix(r, c, w)?)?;
    let p = g.mul(v, w)?;
    g.sum(p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unary_adjoints(x in small_vec(6)) {
        type Unary = fn(&mut Graph, Var) -> Result<Var>;
        let ops: [(&str, Unary); 9] = [
            ("sin", |g, v| g.sin(v)),
            ("cos", |g, v| g.cos(v)),
            ("exp", |g, v| g.exp(v)),
            ("square", |g, v| g.square(v)),
            ("neg", |g, v| g.neg(v)),
            ("scale", |g, v| g.scale(v, -1.7)),
            ("shift", |g, v| g.shift(v, 0.4)),
            ("ln", |g, v| { let s = g.square(v)?; let s = g.shift(s, 0.5)?; g.ln(s) }),
            ("powf", |g, v| { let s = g.square(v)?; let s = g.shift(s, 0.5)?; g.powf(s, 1.3) }),
        ];
        for (name, op) in ops {
            let err = finite_diff_check(|g, v| { let y = op(g, v)?; weighted_sum(g, y) }, &x, STEP).unwrap();
            prop_assert!(err <= TOL, "{name}: {err}");
        }
    }

    #[test]
    fn relu_adjoint_away_from_kink(x in small_vec(6)) {
        prop_assume!(x.iter().all(|v| v.abs() > 1e-3));
        let err = finite_diff_check(|g, v| { let y = g.relu(v)?; weighted_sum(g, y) }, &x, STEP).unwrap();
        prop_assert!(err <= TOL);
    }

    #[test]
    fn binary_adjoints(x in small_vec(8)) {
        type Binary = fn(&mut Graph, Var, Var) -> Result<Var>;
        let ops: [(&str, Binary); 4] = [
            ("add", |g, a, b| g.add(a, b)),
            ("sub", |g, a, b| g.sub(a, b)),
            ("mul", |g, a, b| g.mul(a, b)),
            ("div", |g, a, b| { let s = g.square(b)?; let s = g.shift(s, 1.0)?; g.div(a, s) }),
        ];
        for (name, op) in ops {
            let err = finite_diff_check(
                |g, v| {
                    let a = g.slice_cols(v, 0, 4)?;
                    let b = g.slice_cols(v, 4, 4)?;
                    let y = op(g, a, b)?;
                    weighted_sum(g, y)
                },
                &x,
                STEP,
            )
            .unwrap();
            prop_assert!(err <= TOL, "{name}: {err}");
        }
    }

    #[test]
    fn broadcasting_adjoints(x in small_vec(8)) {
        // 2×3 against a 1×3 row and a 2×1 column
        let err = finite_diff_check(
            |g, v| {
                let m = g.slice_cols(v, 0, 6)?;
                let m = g.reshape(m, 2, 3)?;
                let row = g.slice_cols(v, 5, 3)?;
                let col = g.slice_cols(v, 6, 2)?;
                let col = g.reshape(col, 2, 1)?;
                let a = g.mul(m, row)?;
                let b = g.sub(a, col)?;
                weighted_sum(g, b)
            },
            &x,
            STEP,
        )
        .unwrap();
        prop_assert!(err <= TOL, "{err}");
    }

    #[test]
    fn linear_algebra_adjoints(x in small_vec(12)) {
        let err = finite_diff_check(
            |g, v| {
                let a = g.slice_cols(v, 0, 6)?;
                let a = g.reshape(a, 2, 3)?;
                let b = g.slice_cols(v, 6, 6)?;
                let b = g.reshape(b, 3, 2)?;
                let c = g.matmul(a, b)?;
                weighted_sum(g, c)
            },
            &x,
            STEP,
        )
        .unwrap();
        prop_assert!(err <= TOL, "matmul: {err}");
        let err = finite_diff_check(
            |g, v| {
                // two rows of 2×2 blocks times two rows of 2-vectors
                let a = g.slice_cols(v, 0, 8)?;
                let a = g.reshape(a, 2, 4)?;
                let b = g.slice_cols(v, 8, 4)?;
                let b = g.reshape(b, 2, 2)?;
                let c = g.bmm(a, b, 2, 2, 1)?;
                let t = g.transpose_blocks(a, 2, 2)?;
                let d = g.bmm(t, a, 2, 2, 2)?;
                let c = weighted_sum(g, c)?;
                let d = weighted_sum(g, d)?;
                g.add(c, d)
            },
            &x,
            STEP,
        )
        .unwrap();
        prop_assert!(err <= TOL, "bmm: {err}");
    }

    #[test]
    fn reduction_and_indexing_adjoints(x in small_vec(6)) {
        let err = finite_diff_check(
            |g, v| {
                let m = g.reshape(v, 3, 2)?;
                let s = g.sum_cols(m)?;
                let mr = g.mean_rows(m)?;
                let r = g.gather_rows(m, &[2, 0, 0])?;
                let c = g.gather_cols(m, &[1, 1, 0])?;
                let one = g.select_row(m, 1)?;
                let b = g.broadcast_rows(one, 3)?;
                let cat = g.concat(&[r, c, b, s])?;
                let a = weighted_sum(g, cat)?;
                let sq = g.square(mr)?;
                let m2 = g.mean(sq)?;
                g.add(a, m2)
            },
            &x,
            STEP,
        )
        .unwrap();
        prop_assert!(err <= TOL, "{err}");
    }

    #[test]
    fn gradient_is_linear_in_the_output(x in small_vec(4), a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let grad = |build: &dyn Fn(&mut Graph, Var) -> Result<Var>| -> Vec<f64> {
            let mut g = Graph::new();
            let v = g.parameter(Tensor::row(&x)).unwrap();
            let out = build(&mut g, v).unwrap();
            g.backward(out).unwrap().wrt(v).into_data()
        };
        let f = |g: &mut Graph, v: Var| -> Result<Var> { let s = g.sin(v)?; g.sum(s) };
        let h = |g: &mut Graph, v: Var| -> Result<Var> { let s = g.square(v)?; g.sum(s) };
        let combined = grad(&|g, v| {
            let fv = f(g, v)?;
            let hv = h(g, v)?;
            let fa = g.scale(fv, a)?;
            let hb = g.scale(hv, b)?;
            g.add(fa, hb)
        });
        let (gf, gh) = (grad(&f), grad(&h));
        for i in 0..x.len() {
            let expected = a * gf[i] + b * gh[i];
            prop_assert!((combined[i] - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
        }
    }
}

#[test]
fn unreachable_leaf_has_zero_gradient() {
    let mut g = Graph::new();
    let used = g.parameter(Tensor::row(&[1.0, 2.0])).unwrap();
    let unused = g.parameter(Tensor::row(&[3.0])).unwrap();
    let out = g.square(used).unwrap();
    let out = g.sum(out).unwrap();
    let grads = g.backward(out).unwrap();
    assert_eq!(grads.wrt(unused).into_data(), vec![0.0]);
    assert_eq!(grads.wrt(used).into_data(), vec![2.0, 4.0]);
}
