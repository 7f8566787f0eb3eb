use proptest::prelude::*;
use segkit_tensor::{kernels, serialize, Tape, Tensor};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::new(&[rows, cols], d).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-30.0f64..30.0, 24)) {
        let x = Tensor::new(&[4, 6], data).unwrap();
        for axis in 0..2 {
            let y = kernels::softmax(&x, axis).unwrap();
            prop_assert!(y.data().iter().all(|&v| v >= 0.0));
            let (outer, len) = if axis == 1 { (4, 6) } else { (6, 4) };
            for o in 0..outer {
                let s: f64 = (0..len)
                    .map(|j| if axis == 1 { y.get(&[o, j]) } else { y.get(&[j, o]) })
                    .sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_is_associative(a in matrix(3, 4), b in matrix(4, 5), c in matrix(5, 2)) {
        let left = kernels::matmul(&kernels::matmul(&a, &b).unwrap(), &c).unwrap();
        let right = kernels::matmul(&a, &kernels::matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-10);
    }

    #[test]
    fn resize_keeps_constants_exact(v in -1e3f64..1e3, h in 1usize..6, w in 1usize..6, oh in 1usize..20, ow in 1usize..20) {
        let x = Tensor::full(&[2, h, w], v);
        let y = kernels::bilinear_resize(&x, oh, ow).unwrap();
        prop_assert!(y.data().iter().all(|&u| u == v));
    }

    #[test]
    fn cross_entropy_is_nonnegative(data in prop::collection::vec(-50.0f64..50.0, 12), labels in prop::collection::vec(0u32..3, 4)) {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::new(&[3, 2, 2], data).unwrap());
        let ce = tape.cross_entropy(logits, &labels, 255).unwrap();
        prop_assert!(tape.value(ce.loss).item() >= 0.0);
    }

    #[test]
    fn serialization_round_trips(data in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
        let n = data.len();
        let t = Tensor::new(&[n], data).unwrap();
        let bytes = serialize::to_bytes(&t);
        let back: Tensor<f32> = serialize::read_tensor(&mut bytes.as_slice()).unwrap();
        prop_assert!(back.bit_eq(&t));
        prop_assert_eq!(serialize::to_bytes(&back), bytes);
    }
}

#[test]
fn cross_entropy_vanishes_as_correct_logit_grows() {
    let mut last = f64::INFINITY;
    for big in [0.0, 2.0, 8.0, 32.0] {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::from_f64(&[3, 1, 1], &[big, 0.5, -0.5]).unwrap());
        let loss = tape.value(tape.cross_entropy(logits, &[0], 255).unwrap().loss).item();
        assert!(loss < last);
        last = loss;
    }
    assert!(last < 1e-12);
}

#[test]
fn serialized_header_is_json() {
    let t = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64);
    let bytes = serialize::to_bytes(&t);
    let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + len]).unwrap();
    assert_eq!(header["dtype"], "f64");
    assert_eq!(header["shape"], serde_json::json!([2, 3]));
    assert_eq!(bytes.len(), 8 + len + 6 * 8);
    assert!(serialize::read_tensor::<f32, _>(&mut bytes.as_slice()).is_err());
}
