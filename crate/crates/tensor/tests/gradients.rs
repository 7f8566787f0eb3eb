//! Every differentiable operation against central finite differences (f64).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segkit_tensor::gradcheck::{check_gradients, finite_diff_gradient, relative_error, DEFAULT_STEP};
use segkit_tensor::{Result, Tape, Tensor, Var};

const TOL: f64 = 1e-6;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// sum(y * r) with a fixed random weighting, so every output element matters.
fn weighted_sum(tape: &Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = tape.constant(rand_tensor(&mut rng, &tape.shape(y)));
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

fn assert_grads<F>(name: &str, inputs: &[Tensor<f64>], build: F)
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let report = check_gradients(build, inputs, DEFAULT_STEP).unwrap();
    assert!(
        report.max_rel_error() < TOL,
        "{name}: relative errors {:?}",
        report.rel_errors
    );
}

#[test]
fn finite_difference_examples() {
    let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
    let g = finite_diff_gradient(|t| t.data().iter().map(|v| v * v).sum(), &x, DEFAULT_STEP);
    assert!((g.data()[0] - 2.0).abs() < 1e-8);
    assert!((g.data()[1] - 4.0).abs() < 1e-8);

    let g = finite_diff_gradient(|_| 3.5, &x, DEFAULT_STEP);
    assert_eq!(g.data(), &[0.0, 0.0]);
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[3, 4]);
    let bias = rand_tensor(&mut rng, &[4]);
    assert_grads("add", &[a.clone(), b.clone()], |t, v| {
        let y = t.add(v[0], v[1])?;
        weighted_sum(t, y, 10)
    });
    assert_grads("sub", &[a.clone(), b.clone()], |t, v| {
        let y = t.sub(v[0], v[1])?;
        weighted_sum(t, y, 11)
    });
    assert_grads("mul", &[a.clone(), b.clone()], |t, v| {
        let y = t.mul(v[0], v[1])?;
        weighted_sum(t, y, 12)
    });
    assert_grads("broadcast add", &[a.clone(), bias.clone()], |t, v| {
        let y = t.add(v[0], v[1])?;
        weighted_sum(t, y, 13)
    });
    assert_grads("broadcast mul", &[a.clone(), bias], |t, v| {
        let y = t.mul(v[0], v[1])?;
        weighted_sum(t, y, 14)
    });
    assert_grads("scale", std::slice::from_ref(&a), |t, v| {
        let y = t.scale(v[0], -1.7)?;
        weighted_sum(t, y, 15)
    });
    assert_grads("gelu", std::slice::from_ref(&a), |t, v| {
        let y = t.gelu(v[0])?;
        weighted_sum(t, y, 16)
    });
    assert_grads("mean", &[a], |t, v| {
        let y = t.mul(v[0], v[0])?;
        t.mean(y)
    });
}

#[test]
fn matmul_and_layout_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[4, 5]);
    let c = rand_tensor(&mut rng, &[2, 4, 3]);
    assert_grads("matmul broadcast", &[a.clone(), b], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, 20)
    });
    assert_grads("matmul batched", &[a.clone(), c], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, 21)
    });
    assert_grads("permute", std::slice::from_ref(&a), |t, v| {
        let y = t.permute(v[0], &[2, 0, 1])?;
        weighted_sum(t, y, 22)
    });
    assert_grads("reshape", std::slice::from_ref(&a), |t, v| {
        let y = t.reshape(v[0], &[6, 4])?;
        weighted_sum(t, y, 23)
    });
    assert_grads("concat", &[a.clone(), rand_tensor(&mut rng, &[2, 1, 4])], |t, v| {
        let y = t.concat(&[v[0], v[1]], 1)?;
        weighted_sum(t, y, 24)
    });
    assert_grads("narrow", &[a], |t, v| {
        let y = t.narrow(v[0], 2, 1, 2)?;
        weighted_sum(t, y, 25)
    });
}

#[test]
fn normalizing_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[3, 5, 4]);
    for axis in 0..3 {
        assert_grads("softmax", std::slice::from_ref(&x), |t, v| {
            let y = t.softmax(v[0], axis)?;
            weighted_sum(t, y, 30 + axis as u64)
        });
    }
    let gamma = rand_tensor(&mut rng, &[4]);
    let beta = rand_tensor(&mut rng, &[4]);
    assert_grads("layer_norm", &[x.clone(), gamma, beta], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(t, y, 34)
    });
    let logits = rand_tensor(&mut rng, &[4, 3, 5]).map(|v| 3.0 * v);
    let target: Vec<u32> = (0..15).map(|i| if i % 7 == 3 { 255 } else { (i % 4) as u32 }).collect();
    assert_grads("cross_entropy", &[logits], |t, v| {
        Ok(t.cross_entropy(v[0], &target, 255)?.loss)
    });
}

#[test]
fn spatial_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    for (h, w) in [(6, 8), (2, 3), (5, 7), (1, 1)] {
        assert_grads("bilinear_resize", std::slice::from_ref(&x), |t, v| {
            let y = t.bilinear_resize(v[0], h, w)?;
            weighted_sum(t, y, 40)
        });
    }
    let w = rand_tensor(&mut rng, &[5, 2]);
    let b = rand_tensor(&mut rng, &[5]);
    assert_grads("pointwise_conv", &[x, w, b], |t, v| {
        let y = t.pointwise_conv(v[0], v[1], v[2])?;
        weighted_sum(t, y, 41)
    });
    let q = rand_tensor(&mut rng, &[2, 5, 6]);
    let angles = Tensor::from_fn(&[5, 3], |i| 0.3 * i as f64);
    for inverse in [false, true] {
        assert_grads("rotate_pairs", std::slice::from_ref(&q), |t, v| {
            let y = t.rotate_pairs(v[0], &angles, inverse)?;
            weighted_sum(t, y, 42)
        });
    }
}

#[test]
fn decayed_attention_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = rand_tensor(&mut rng, &[2, 3, 4, 5]);
    let k = rand_tensor(&mut rng, &[2, 3, 6, 5]);
    let v = rand_tensor(&mut rng, &[2, 3, 6, 2]);
    let d = rand_tensor(&mut rng, &[2, 1, 4, 6]);
    assert_grads("decayed_attention", &[q, k, v, d], |t, v| {
        let y = t.decayed_attention(v[0], v[1], v[2], v[3], 0.7)?;
        weighted_sum(t, y, 50)
    });
}

/// Random three-layer composition: linear -> gelu -> layer norm -> linear -> softmax.
#[test]
fn three_layer_composition_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[6, 8]);
    let w1 = rand_tensor(&mut rng, &[8, 8]);
    let w2 = rand_tensor(&mut rng, &[8, 4]);
    let g = rand_tensor(&mut rng, &[8]);
    let b = rand_tensor(&mut rng, &[8]);
    assert_grads("composition", &[x, w1, w2, g, b], |t, v| {
        let h = t.matmul(v[0], v[1])?;
        let h = t.gelu(h)?;
        let h = t.layer_norm(h, v[3], v[4], 1e-5)?;
        let h = t.matmul(h, v[2])?;
        let h = t.softmax(h, 1)?;
        weighted_sum(t, h, 50)
    });
}

#[test]
fn relative_error_is_scale_free() {
    let a = Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap();
    let b = Tensor::from_f64(&[2], &[1.0, 1.0 + 1e-9]).unwrap();
    let e = relative_error(&a, &b);
    assert!(e > 0.0 && e < 1e-9);
    let z = Tensor::<f64>::zeros(&[2]);
    assert_eq!(relative_error(&z, &z), 0.0);
}
