use mmfuse::tensor::gradcheck::{grad_check, GradCheckConfig};
use mmfuse::tensor::{Graph, Tensor, Var};
use mmfuse::Result;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

/// Reduces an arbitrary tensor to a scalar through a fixed random projection
/// so every output element carries a distinct upstream gradient.
fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let w = g.constant(rand_tensor(&g.shape(x).to_vec(), seed ^ 0xabcd));
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn check<F>(f: F, inputs: &[Tensor<f64>]) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let report = grad_check(f, inputs, &GradCheckConfig::default()).unwrap();
    report.max_rel_error
}

#[test]
fn sigmoid_values() {
    let x = Tensor::<f64>::from_f64(&[3], &[0.0, 30.0, 2.0])
        .unwrap()
        .sigmoid();
    assert_eq!(x.data()[0], 0.5);
    assert!(x.data()[1] > 1.0 - 1e-9);
    assert!((x.data()[2] - 0.880797).abs() < 1e-6);
}

#[test]
fn softmax_values() {
    let u = Tensor::<f64>::zeros(&[3]).softmax();
    for v in u.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let s = Tensor::<f64>::from_f64(&[3], &[1.0, 2.0, 3.0])
        .unwrap()
        .softmax();
    for (a, b) in s.data().iter().zip([0.09003, 0.24473, 0.66524]) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn layer_norm_values() {
    let g = Tensor::<f64>::ones(&[4]);
    let b = Tensor::<f64>::zeros(&[4]);
    let c = Tensor::<f64>::full(&[4], 3.0)
        .layer_norm(&g, &b, 1e-5)
        .unwrap();
    assert!(c.data().iter().all(|&v| v == 0.0));
    let x = Tensor::<f64>::from_f64(&[4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = x.layer_norm(&g, &b, 1e-5).unwrap();
    for (a, e) in y.data().iter().zip([-1.3416, -0.4472, 0.4472, 1.3416]) {
        assert!((a - e).abs() < 1e-3);
    }
    let short = Tensor::<f64>::ones(&[1]);
    assert!(short
        .layer_norm(&Tensor::ones(&[1]), &Tensor::zeros(&[1]), 1e-5)
        .is_err());
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    let x = rand_tensor(&[5, 6], 1);
    let w1 = rand_tensor(&[6, 8], 2);
    let b1 = rand_tensor(&[8], 3);
    let w2 = rand_tensor(&[8, 8], 4);
    let w3 = rand_tensor(&[8, 4], 5);
    let err = check(
        |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add_bias(h, v[2])?;
            let h = g.gelu(h);
            let h = g.matmul(h, v[3])?;
            let h = g.sigmoid(h);
            let logits = g.matmul(h, v[4])?;
            g.cross_entropy(logits, &[0, 3, 1, 2, 3])
        },
        &[x, w1, b1, w2, w3],
    );
    assert!(err < 1e-4, "{err}");
}

#[test]
fn self_gate_derivative_matches() {
    let x = rand_tensor(&[3, 4], 9).map(|v| v * 3.0);
    let err = check(
        |g, v| {
            let y = g.self_gate(v[0])?;
            project(g, y, 1)
        },
        &[x],
    );
    assert!(err < 1e-4, "{err}");
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let a = g.constant(rand_tensor(&[4, 8], 1).cast());
        let b = g.constant(rand_tensor(&[8, 8], 2).cast());
        let h = g.matmul(a, b).unwrap();
        let h = g.softmax(h);
        g.value(h).clone()
    };
    assert!(run().bit_eq(&run()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn matmul_gradients(seed in 0u64..1000, m in 1usize..4, k in 1usize..5, n in 1usize..4, batch in 1usize..3) {
        let a = rand_tensor(&[batch, m, k], seed);
        let b = rand_tensor(&[batch, k, n], seed + 1);
        let shared = rand_tensor(&[k, n], seed + 2);
        let err = check(|g, v| { let c = g.matmul(v[0], v[1])?; project(g, c, seed) }, &[a.clone(), b]);
        prop_assert!(err < 1e-4);
        let err = check(|g, v| { let c = g.matmul(v[0], v[1])?; project(g, c, seed) }, &[a, shared]);
        prop_assert!(err < 1e-4);
    }

    #[test]
    fn softmax_and_layer_norm_gradients(seed in 0u64..1000, rows in 1usize..4, n in 2usize..7) {
        let x = rand_tensor(&[rows, n], seed);
        let gain = rand_tensor(&[n], seed + 1);
        let bias = rand_tensor(&[n], seed + 2);
        let err = check(|g, v| { let y = g.softmax(v[0]); project(g, y, seed) }, &[x.clone()]);
        prop_assert!(err < 1e-4);
        let err = check(|g, v| { let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?; project(g, y, seed) }, &[x, gain, bias]);
        prop_assert!(err < 1e-4);
    }

    #[test]
    fn attention_gradients(seed in 0u64..1000, tq in 1usize..4, tk in 1usize..5, heads in 1usize..3) {
        let d = 2 * heads;
        let q = rand_tensor(&[2, tq, d], seed);
        let k = rand_tensor(&[2, tk, d], seed + 1);
        let v = rand_tensor(&[2, tk, d], seed + 2);
        let err = check(|g, x| { let y = g.attention(x[0], x[1], x[2], heads)?; project(g, y, seed) }, &[q, k, v]);
        prop_assert!(err < 1e-4);
    }

    #[test]
    fn shape_op_gradients(seed in 0u64..1000, b in 1usize..3, t in 1usize..4, d in 2usize..5) {
        let x = rand_tensor(&[b, t, d], seed);
        let y = rand_tensor(&[b, 2, d], seed + 1);
        let err = check(|g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            let c = g.transpose_last2(c)?;
            let c = g.reshape(c, &[b * d, t + 2])?;
            let c = g.narrow(c, 1, 1, t + 1)?;
            let c = g.mean_axis(c, 0)?;
            project(g, c, seed)
        }, &[x.clone(), y]);
        prop_assert!(err < 1e-4);
        let w = rand_tensor(&[t, d], seed + 2);
        let err = check(|g, v| {
            let c = g.broadcast_batch(v[0], 3);
            let c = g.mul(c, v[1])?;
            let c = g.scale(c, 0.7);
            project(g, c, seed)
        }, &[w, rand_tensor(&[3, t, d], seed + 3)]);
        prop_assert!(err < 1e-4);
    }

    #[test]
    fn softmax_is_shift_invariant(seed in 0u64..1000, c in -50.0f64..50.0) {
        let x = rand_tensor(&[5], seed);
        let shifted = x.map(|v| v + c);
        prop_assert!(x.softmax().max_abs_diff(&shifted.softmax()).unwrap() < 1e-12);
    }

    #[test]
    fn layer_norm_output_mean_equals_bias(seed in 0u64..1000, gain in -4.0f64..4.0, b in -3.0f64..3.0) {
        // Centering holds for any uniform gain; a per-channel gain reweights
        // the normalized values and moves the mean.
        let x = rand_tensor(&[6], seed);
        let y = x.layer_norm(&Tensor::full(&[6], gain), &Tensor::full(&[6], b), 1e-5).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 6.0;
        prop_assert!((mean - b).abs() < 1e-5);
    }
}
