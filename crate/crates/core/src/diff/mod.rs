//! Dense `f32` tensors, a reverse-mode tape, and the Adam optimizer.

mod adam;
pub mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use adam::Adam;
pub use tape::{bce_term, sigmoid, Gradients, Reduction, Tape, Var, BCE_CLAMP, LAYER_NORM_EPS};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::gradcheck::{check_gradients, random_projection};
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    fn check<F>(inputs: Vec<Tensor>, f: F) -> f32
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        check_gradients(&inputs, f)
    }

    fn weighted(tape: &mut Tape, x: Var, seed: u64) -> Var {
        random_projection(tape, x, seed)
    }

    #[test]
    fn mean_pool_over_tokens() {
        let mut tape = Tape::new();
        let x = tape.constant_from(&[2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let m = tape.mean_pool(x, 0).unwrap();
        assert_eq!(tape.value(m), &[3.0, 5.0]);
        assert_eq!(tape.shape(m), &[2]);
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant_from(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = tape.constant_from(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(crate::Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn grad_of_sum_product_is_other_operand() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::new(&[3, 3], rand_vec(&mut rng, 9)).unwrap();
        let b = Tensor::new(&[3, 3], rand_vec(&mut rng, 9)).unwrap();
        let mut tape = Tape::new();
        let (va, vb) = (tape.param(&a), tape.constant(&b));
        let p = tape.mul(va, vb).unwrap();
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(va).unwrap(), b.data());
        assert!(g.get(vb).is_none());
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant_from(&[2], vec![0.0, 0.0]).unwrap();
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(s), &[0.5, 0.5]);
        let x = tape.constant_from(&[2], vec![1000.0, 1000.0]).unwrap();
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(s), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let x = tape
            .constant_from(&[3, 4, 5], rand_vec(&mut rng, 60).iter().map(|v| v * 30.0).collect())
            .unwrap();
        for axis in 0..3 {
            let s = tape.softmax(x, axis).unwrap();
            let (outer, n, inner) = kernels::split_axis(&[3, 4, 5], axis);
            let v = tape.value(s);
            for o in 0..outer {
                for j in 0..inner {
                    let sum: f32 = (0..n).map(|i| v[(o * n + i) * inner + j]).sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                }
            }
            assert!(v.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant_from(&[4], vec![1.0; 4]).unwrap();
        let b = tape.constant_from(&[4], vec![0.0; 4]).unwrap();
        let x = tape.constant_from(&[1, 4], vec![5.0; 4]).unwrap();
        let y = tape.layer_norm(x, g, b).unwrap();
        assert!(tape.value(y).iter().all(|v| v.abs() < 1e-6));

        let g = tape.constant_from(&[2], vec![1.0; 2]).unwrap();
        let b = tape.constant_from(&[2], vec![0.0; 2]).unwrap();
        let x = tape.constant_from(&[1, 2], vec![1.0, -1.0]).unwrap();
        let y = tape.layer_norm(x, g, b).unwrap();
        // mean 0, variance 1, so each entry is ±1/sqrt(1 + 1e-5)
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((tape.value(y)[0] as f64 - expect).abs() < 1e-6);
        assert!((tape.value(y)[1] as f64 + expect).abs() < 1e-6);

        let x1 = tape.constant_from(&[3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let g1 = tape.constant_from(&[1], vec![1.0]).unwrap();
        assert!(matches!(
            tape.layer_norm(x1, g1, g1),
            Err(crate::Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let g = tape.constant_from(&[6], vec![1.0; 6]).unwrap();
        let b = tape.constant_from(&[6], vec![0.0; 6]).unwrap();
        let x = tape
            .constant_from(&[5, 6], rand_vec(&mut rng, 30).iter().map(|v| v * 4.0 + 2.0).collect())
            .unwrap();
        let y = tape.layer_norm(x, g, b).unwrap();
        for row in tape.value(y).chunks(6) {
            let mean: f32 = row.iter().sum::<f32>() / 6.0;
            let var: f32 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 6.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn sigmoid_and_relu() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::new(&[2], vec![0.0, -3.0]).unwrap());
        let s = tape.sigmoid(x);
        let r = tape.relu(x);
        assert_eq!(tape.value(s)[0], 0.5);
        assert_eq!(tape.value(r)[1], 0.0);
        let l = tape.sum(s);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap()[0], 0.25);
    }

    #[test]
    fn backward_examples() {
        let x = Tensor::new(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let l = tape.sum(v);
        assert_eq!(tape.backward(l).unwrap().get(v).unwrap(), &[1.0; 4]);

        let mut tape = Tape::new();
        let v = tape.param(&x);
        let sq = tape.mul(v, v).unwrap();
        let l = tape.sum(sq);
        let g = tape.backward(l).unwrap();
        let expect: Vec<f32> = x.data().iter().map(|a| 2.0 * a).collect();
        assert_eq!(g.get(v).unwrap(), expect.as_slice());

        let y = tape.scale(v, 2.0);
        assert!(matches!(tape.backward(y), Err(crate::Error::InvalidArgument(_))));
    }

    #[test]
    fn two_consumers_sum_contributions() {
        // l = sum(3x) + sum(x*x) -> dl/dx = 3 + 2x
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let a = tape.scale(v, 3.0);
        let b = tape.mul(v, v).unwrap();
        let s = tape.add(a, b).unwrap();
        let l = tape.sum(s);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(v).unwrap(), &[4.0, 1.0, 7.0]);
    }

    #[test]
    fn repeated_backward_accumulates_into_tensor() {
        let mut x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_grad();
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let l = tape.sum(v);
        let g = tape.backward(l).unwrap();
        g.accumulate_into(v, &mut x).unwrap();
        let g = tape.backward(l).unwrap();
        g.accumulate_into(v, &mut x).unwrap();
        assert_eq!(x.grad().unwrap(), &[2.0, 2.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let d = tape.detach(v);
        let p = tape.mul(v, d).unwrap();
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(v).unwrap(), x.data());
    }

    #[test]
    fn concat_along_axes() {
        let mut tape = Tape::new();
        let a = tape.constant_from(&[2, 1], vec![1.0, 2.0]).unwrap();
        let b = tape.constant_from(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let d = tape.concat(&[b, b], 0).unwrap();
        assert_eq!(tape.shape(d), &[4, 2]);
        assert!(tape.concat(&[a, b], 0).is_err());
    }

    #[test]
    fn bce_analytic() {
        let mut tape = Tape::new();
        let p = tape.constant_from(&[2], vec![0.5, 0.5]).unwrap();
        let l = tape.bce(p, &[1.0, 0.0], Reduction::Mean).unwrap();
        assert!((tape.value(l)[0] - core::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn gradient_checks_on_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..20u64 {
            let m = rng.random_range(1..=4);
            let k = rng.random_range(2..=5);
            let n = rng.random_range(1..=4);
            let t = |rng: &mut ChaCha8Rng, s: &[usize]| Tensor::new(s, rand_vec(rng, s.iter().product())).unwrap();

            let e = check(vec![t(&mut rng, &[m, k]), t(&mut rng, &[k, n])], |tp, v| {
                let y = tp.matmul(v[0], v[1]).unwrap();
                weighted(tp, y, trial)
            });
            assert!(e < 1e-2, "matmul rel err {e}");

            let e = check(vec![t(&mut rng, &[2, m, k]), t(&mut rng, &[2, n, k])], |tp, v| {
                let y = tp.bmm(v[0], v[1], true).unwrap();
                weighted(tp, y, trial)
            });
            assert!(e < 1e-2, "bmm^T rel err {e}");

            let e = check(vec![t(&mut rng, &[2, m, k]), t(&mut rng, &[2, k, n])], |tp, v| {
                let y = tp.bmm(v[0], v[1], false).unwrap();
                weighted(tp, y, trial)
            });
            assert!(e < 1e-2, "bmm rel err {e}");

            let e = check(vec![t(&mut rng, &[4])], |tp, v| {
                let y = tp.softmax(v[0], 0).unwrap();
                weighted(tp, y, trial)
            });
            assert!(e < 1e-2, "softmax rel err {e}");

            let rows: Vec<f32> = rand_vec(&mut rng, m * (k + 1)).iter().map(|v| v * 3.0).collect();
            let e = check(
                vec![
                    Tensor::new(&[m, k + 1], rows).unwrap(),
                    t(&mut rng, &[k + 1]),
                    t(&mut rng, &[k + 1]),
                ],
                |tp, v| {
                    let y = tp.layer_norm(v[0], v[1], v[2]).unwrap();
                    weighted(tp, y, trial)
                },
            );
            assert!(e < 1e-2, "layer_norm rel err {e}");

            let e = check(vec![t(&mut rng, &[m, k]), t(&mut rng, &[k])], |tp, v| {
                let y = tp.add_bias(v[0], v[1]).unwrap();
                let y = tp.sigmoid(y);
                weighted(tp, y, trial)
            });
            assert!(e < 1e-2, "bias+sigmoid rel err {e}");

            let e = check(vec![t(&mut rng, &[m, k, n])], |tp, v| {
                let y = tp.mean_pool(v[0], 1).unwrap();
                let y = tp.l2_norm_rowwise(y);
                weighted(tp, y, trial)
            });
            assert!(e < 1e-2, "mean_pool+l2 rel err {e}");

            let e = check(vec![t(&mut rng, &[m, k]), t(&mut rng, &[m, n])], |tp, v| {
                let y = tp.concat(&[v[0], v[1]], 1).unwrap();
                let y = tp.scale(y, 1.5);
                weighted(tp, y, trial)
            });
            assert!(e < 1e-2, "concat rel err {e}");

            let probs: Vec<f32> = (0..m).map(|_| rng.random_range(0.05f32..0.95)).collect();
            let targets: Vec<f32> = (0..m).map(|i| (i % 2) as f32).collect();
            let e = check(vec![Tensor::new(&[m], probs).unwrap()], |tp, v| {
                tp.bce(v[0], &targets, Reduction::Mean).unwrap()
            });
            assert!(e < 1e-2, "bce rel err {e}");

            // keep relu inputs away from the kink
            let xs: Vec<f32> = rand_vec(&mut rng, m * k)
                .into_iter()
                .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
                .collect();
            let e = check(vec![Tensor::new(&[m, k], xs).unwrap()], |tp, v| {
                let y = tp.relu(v[0]);
                weighted(tp, y, trial)
            });
            assert!(e < 1e-2, "relu rel err {e}");
        }
    }
}
