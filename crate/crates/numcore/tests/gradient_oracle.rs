use numcore::{finite_difference, Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const REL_TOL: f64 = 1e-5;

type UnaryOp = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Norm-wise relative error between two gradients.
fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// Compares backward against finite differences for a function of one input.
fn check_unary(x: Tensor, build: impl Fn(&mut Graph, Var) -> Result<Var>) -> f64 {
    let mut g = Graph::new();
    let leaf = g.leaf(x.clone());
    let root = build(&mut g, leaf).unwrap();
    let analytic = g.backward(root).unwrap().wrt(leaf).unwrap();
    let numeric = finite_difference(
        |t| {
            let mut g = Graph::new();
            let leaf = g.leaf(t.clone());
            let root = build(&mut g, leaf)?;
            g.value(root)?.item()
        },
        &x,
        EPS,
    )
    .unwrap();
    rel_err(&analytic, &numeric)
}

/// Projects a matrix to a scalar with fixed weights so every entry matters.
fn project(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let shape = g.value(v)?.shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random_tensor(&mut rng, shape, 1.0));
    let p = g.mul(v, w)?;
    g.sum(p)
}

#[test]
fn per_op_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random_tensor(&mut rng, vec![3, 4], 1.0);
    let cases: Vec<(&str, UnaryOp)> = vec![
        ("gelu", Box::new(|g, v| {
            let y = g.gelu(v)?;
            project(g, y, 1)
        })),
        ("silu", Box::new(|g, v| {
            let y = g.silu(v)?;
            project(g, y, 2)
        })),
        ("exp", Box::new(|g, v| {
            let y = g.exp(v)?;
            project(g, y, 3)
        })),
        ("layer_norm", Box::new(|g, v| {
            let mut r = ChaCha8Rng::seed_from_u64(4);
            let gain = g.constant(random_tensor(&mut r, vec![4], 1.0));
            let bias = g.constant(random_tensor(&mut r, vec![4], 1.0));
            let y = g.layer_norm(v, gain, bias, 1e-5)?;
            project(g, y, 5)
        })),
        ("rms_norm", Box::new(|g, v| {
            let mut r = ChaCha8Rng::seed_from_u64(6);
            let gain = g.constant(random_tensor(&mut r, vec![4], 1.0));
            let y = g.rms_norm(v, gain, 1e-6)?;
            project(g, y, 7)
        })),
        ("rope", Box::new(|g, v| {
            let y = g.rope(v, 2, 10000.0)?;
            project(g, y, 8)
        })),
        ("causal_softmax", Box::new(|g, v| {
            let sq = g.slice_cols(v, 0, 3)?;
            let y = g.causal_softmax(sq)?;
            project(g, y, 9)
        })),
        ("log_softmax", Box::new(|g, v| {
            let y = g.log_softmax(v)?;
            project(g, y, 10)
        })),
        ("cross_entropy", Box::new(|g, v| g.cross_entropy(v, &[1, 3, 0]))),
        ("rows_and_concat", Box::new(|g, v| {
            let a = g.rows(v, 1, 2)?;
            let b = g.slice_cols(a, 1, 2)?;
            let c = g.concat_cols(&[a, b])?;
            project(g, c, 11)
        })),
        ("matmul_nt", Box::new(|g, v| {
            let y = g.matmul_nt(v, v)?;
            project(g, y, 12)
        })),
        ("add_row", Box::new(|g, v| {
            let mut r = ChaCha8Rng::seed_from_u64(13);
            let b = g.constant(random_tensor(&mut r, vec![4], 1.0));
            let y = g.add_row(v, b)?;
            let y = g.gelu(y)?;
            project(g, y, 13)
        })),
        ("pick_exp", Box::new(|g, v| {
            let y = g.log_softmax(v)?;
            let p = g.pick(y, 5)?;
            g.exp(p)
        })),
        ("override_input", Box::new(|g, v| {
            let vals = g.constant(Tensor::vector(vec![0.7, -0.4]).unwrap());
            let y = g.override_entries(v, 2, &[1, 3], vals)?;
            let y = g.gelu(y)?;
            project(g, y, 14)
        })),
    ];
    for (name, build) in &cases {
        let err = check_unary(x.clone(), build);
        assert!(err < REL_TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn bias_and_override_value_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_tensor(&mut rng, vec![3, 4], 1.0);
    let xb = x.clone();
    let err = check_unary(random_tensor(&mut rng, vec![4], 1.0), move |g, b| {
        let xv = g.constant(xb.clone());
        let y = g.add_row(xv, b)?;
        let y = g.silu(y)?;
        project(g, y, 31)
    });
    assert!(err < REL_TOL, "add_row bias: {err:e}");
    let err = check_unary(Tensor::vector(vec![0.3, -1.1]).unwrap(), move |g, vals| {
        let xv = g.constant(x.clone());
        let y = g.override_entries(xv, 2, &[1, 3], vals)?;
        let y = g.gelu(y)?;
        let y = g.log_softmax(y)?;
        project(g, y, 32)
    });
    assert!(err < REL_TOL, "override values: {err:e}");
}

#[test]
fn embedding_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let table = random_tensor(&mut rng, vec![5, 3], 1.0);
    let err = check_unary(table, |g, t| {
        let e = g.embedding(t, &[4, 0, 4, 2])?;
        let y = g.gelu(e)?;
        project(g, y, 21)
    });
    assert!(err < REL_TOL, "embedding: {err:e}");
}

/// Random 2–3 layer MLP, scalar output, gradient taken w.r.t. the input and every weight.
fn random_network_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.random_range(2..=3usize);
    let mut dims = vec![rng.random_range(2..=5usize)];
    for _ in 0..depth {
        dims.push(rng.random_range(2..=6usize));
    }
    let x = random_tensor(&mut rng, vec![2, dims[0]], 1.0);
    let weights: Vec<Tensor> = (0..depth)
        .map(|l| random_tensor(&mut rng, vec![dims[l], dims[l + 1]], 0.9))
        .collect();
    let target = rng.random_range(0..dims[depth]);

    let forward = |g: &mut Graph, input: Var, ws: &[Var]| -> Result<Var> {
        let mut h = input;
        for (l, &w) in ws.iter().enumerate() {
            h = g.matmul(h, w)?;
            if l + 1 < ws.len() {
                h = if l % 2 == 0 { g.gelu(h)? } else { g.silu(h)? };
            }
        }
        let lp = g.log_softmax(h)?;
        g.pick(lp, target)
    };

    let mut worst: f64 = 0.0;
    // wrt the input
    {
        let mut g = Graph::new();
        let xi = g.leaf(x.clone());
        let ws: Vec<Var> = weights.iter().map(|w| g.constant(w.clone())).collect();
        let root = forward(&mut g, xi, &ws).unwrap();
        let analytic = g.backward(root).unwrap().wrt(xi).unwrap();
        let numeric = finite_difference(
            |t| {
                let mut g = Graph::new();
                let xi = g.constant(t.clone());
                let ws: Vec<Var> = weights.iter().map(|w| g.constant(w.clone())).collect();
                let r = forward(&mut g, xi, &ws)?;
                g.value(r)?.item()
            },
            &x,
            EPS,
        )
        .unwrap();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    // wrt each weight
    for k in 0..depth {
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let ws: Vec<Var> = weights.iter().map(|w| g.leaf(w.clone())).collect();
        let root = forward(&mut g, xi, &ws).unwrap();
        let analytic = g.backward(root).unwrap().wrt(ws[k]).unwrap();
        let numeric = finite_difference(
            |t| {
                let mut g = Graph::new();
                let xi = g.constant(x.clone());
                let ws: Vec<Var> = weights
                    .iter()
                    .enumerate()
                    .map(|(j, w)| g.constant(if j == k { t.clone() } else { w.clone() }))
                    .collect();
                let r = forward(&mut g, xi, &ws)?;
                g.value(r)?.item()
            },
            &weights[k],
            EPS,
        )
        .unwrap();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

#[test]
fn random_networks_match_finite_differences() {
    for seed in 0..120 {
        let err = random_network_error(seed);
        assert!(err < REL_TOL, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn softmax_sums_to_one_and_is_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let n = rng.random_range(1..20);
        let x = random_tensor(&mut rng, vec![n], 30.0);
        let s = x.softmax().unwrap();
        let total: f64 = s.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(s.data().iter().all(|&v| v >= 0.0));
        let c = rng.random_range(-50.0..50.0);
        let shifted = x.map(|v| v + c).unwrap().softmax().unwrap();
        for (a, b) in s.data().iter().zip(shifted.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let a = g.constant(random_tensor(&mut rng, vec![4, 6], 1.0));
        let b = g.constant(random_tensor(&mut rng, vec![6, 3], 1.0));
        let c = g.matmul(a, b).unwrap();
        let d = g.gelu(c).unwrap();
        let e = g.log_softmax(d).unwrap();
        g.value(e).unwrap().to_vec()
    };
    let (x, y) = (run(), run());
    assert!(x.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits()));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn matmul_gradient_is_exact(a in proptest::collection::vec(-3.0f64..3.0, 6),
                                    b in proptest::collection::vec(-3.0f64..3.0, 6)) {
            // d/dA sum(A·B) = 1 · Bᵀ: each entry A[i][p] gets the row sum of B[p].
            let mut g = Graph::new();
            let ta = g.leaf(Tensor::matrix(2, 3, a).unwrap());
            let tb = g.constant(Tensor::matrix(3, 2, b.clone()).unwrap());
            let c = g.matmul(ta, tb).unwrap();
            let s = g.sum(c).unwrap();
            let grad = g.backward(s).unwrap().wrt(ta).unwrap();
            for i in 0..2 {
                for p in 0..3 {
                    let expect = b[p * 2] + b[p * 2 + 1];
                    prop_assert!((grad.data()[i * 3 + p] - expect).abs() < 1e-12);
                }
            }
        }
    }
}
