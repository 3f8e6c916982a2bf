//! Finite-difference checks for every forward primitive, plus a few
//! property tests on the forward values.

use diffcore::{gradcheck, Graph, ParamStore, Result, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.5..1.5))
}

/// Wrap `op` so the loss is a random weighted sum of its output, which keeps
/// every output entry's gradient distinct.
fn check_unary(name: &str, shape: &[usize], op: impl Fn(&mut Graph, Var) -> Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    let mut store = ParamStore::new();
    store.insert("x", random(shape, &mut rng)).unwrap();
    let weights_seed = rng.gen::<u64>();
    let report = gradcheck(
        |g, s| {
            let x = g.param(s, "x")?;
            let y = op(g, x)?;
            let w = random(g.shape(y), &mut ChaCha8Rng::seed_from_u64(weights_seed));
            let w = g.input(w);
            let p = g.mul(y, w)?;
            Ok(g.sum_all(p))
        },
        &store,
        STEP,
    )
    .unwrap();
    assert!(report.passed(TOL), "{name}:\n{}", report.to_csv());
}

fn check_binary(
    name: &str,
    sa: &[usize],
    sb: &[usize],
    op: impl Fn(&mut Graph, Var, Var) -> Result<Var>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 104_729);
    let mut store = ParamStore::new();
    store.insert("a", random(sa, &mut rng)).unwrap();
    store.insert("b", random(sb, &mut rng)).unwrap();
    let weights_seed = rng.gen::<u64>();
    let report = gradcheck(
        |g, s| {
            let a = g.param(s, "a")?;
            let b = g.param(s, "b")?;
            let y = op(g, a, b)?;
            let w = random(g.shape(y), &mut ChaCha8Rng::seed_from_u64(weights_seed));
            let w = g.input(w);
            let p = g.mul(y, w)?;
            Ok(g.sum_all(p))
        },
        &store,
        STEP,
    )
    .unwrap();
    assert!(report.passed(TOL), "{name}:\n{}", report.to_csv());
}

#[test]
fn add_sub_mul_with_broadcasting() {
    check_binary("add", &[2, 3, 4], &[2, 3, 4], |g, a, b| g.add(a, b));
    check_binary("add_bias", &[2, 3, 4], &[4], |g, a, b| g.add(a, b));
    check_binary("sub_bcast", &[2, 1, 4], &[3, 1], |g, a, b| g.sub(a, b));
    check_binary("mul", &[3, 4], &[3, 4], |g, a, b| g.mul(a, b));
    check_binary("mul_bcast", &[2, 3, 4], &[2, 1, 1], |g, a, b| g.mul(a, b));
}

#[test]
fn matmul_plain_and_batched() {
    check_binary("matmul2d", &[3, 4], &[4, 5], |g, a, b| g.matmul(a, b));
    check_binary("matmul_shared_rhs", &[2, 3, 4], &[4, 2], |g, a, b| g.matmul(a, b));
    check_binary("matmul_batched", &[2, 2, 3, 4], &[2, 2, 4, 3], |g, a, b| g.matmul(a, b));
}

#[test]
fn shape_primitives() {
    check_unary("transpose", &[2, 3, 4], |g, x| g.transpose(x));
    check_unary("permute", &[2, 3, 4, 5], |g, x| g.permute(x, &[0, 2, 3, 1]));
    check_unary("reshape", &[2, 6], |g, x| g.reshape(x, &[3, 4]));
    check_unary("slice", &[2, 5, 3], |g, x| g.slice(x, 1, 1, 3));
    check_unary("broadcast", &[1, 3], |g, x| g.broadcast_to(x, &[4, 2, 3]));
    check_binary("concat", &[2, 3, 2], &[2, 1, 2], |g, a, b| g.concat(&[a, b], 1));
    check_binary("concat_last", &[2, 3], &[2, 4], |g, a, b| g.concat(&[a, b, a], 1));
}

#[test]
fn reductions() {
    check_unary("sum_axis", &[2, 3, 4], |g, x| g.sum(x, 1));
    check_unary("mean_axis", &[2, 3, 4], |g, x| g.mean(x, 2));
    check_unary("sum_all", &[2, 3], |g, x| Ok(g.sum_all(x)));
    check_unary("scale", &[5], |g, x| Ok(g.scale(x, -2.5)));
}

#[test]
fn elementwise_nonlinearities() {
    check_unary("sin", &[3, 4], |g, x| Ok(g.sin(x)));
    check_unary("cos", &[3, 4], |g, x| Ok(g.cos(x)));
    check_unary("exp", &[3, 4], |g, x| Ok(g.exp(x)));
    check_unary("sigmoid", &[3, 4], |g, x| Ok(g.sigmoid(x)));
    check_unary("relu", &[3, 4], |g, x| Ok(g.relu(x)));
    check_unary("gelu", &[3, 4], |g, x| Ok(g.gelu(x)));
    check_unary("abs", &[3, 4], |g, x| Ok(g.abs(x)));
}

#[test]
fn row_normalizers() {
    check_unary("softmax", &[3, 5], |g, x| g.softmax(x));
    check_unary("layer_norm", &[3, 6], |g, x| g.layer_norm(x, 1e-5));
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let a = random(&[2, 3], &mut rng);
    let b = random(&[3, 2], &mut rng);
    let mut g = Graph::new();
    let (va, vb) = (g.input(a.clone()), g.input(b.clone()));
    let c = g.matmul(va, vb).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            let want: f64 = (0..3).map(|k| a.at(&[i, k]) * b.at(&[k, j])).sum();
            assert!((g.value(c).at(&[i, j]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn composed_chain_shares_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    store.insert("w", random(&[4, 4], &mut rng)).unwrap();
    let x = random(&[2, 4], &mut rng);
    let report = gradcheck(
        |g, s| {
            let xi = g.input(x.clone());
            let w = g.param(s, "w")?;
            let h = g.matmul(xi, w)?;
            let h = g.layer_norm(h, 1e-5)?;
            let h = g.gelu(h);
            let w_again = g.param(s, "w")?;
            let h = g.matmul(h, w_again)?;
            let h = g.softmax(h)?;
            let l = g.sin(h);
            Ok(g.sum_all(l))
        },
        &store,
        STEP,
    )
    .unwrap();
    assert!(report.passed(TOL), "{}", report.to_csv());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![3, 4], vals).unwrap());
        let y = g.softmax(x).unwrap();
        for row in g.value(y).values().chunks(4) {
            prop_assert!(row.iter().all(|v| *v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic(vals in proptest::collection::vec(-3.0f64..3.0, 8)) {
        let run = || {
            let mut g = Graph::new();
            let x = g.input(Tensor::from_vec(vec![2, 4], vals.clone()).unwrap());
            let y = g.layer_norm(x, 1e-5).unwrap();
            let y = g.gelu(y);
            g.value(y).clone()
        };
        prop_assert_eq!(run(), run());
    }
}
