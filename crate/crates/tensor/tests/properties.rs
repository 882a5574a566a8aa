use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use titkit_tensor::{log_softmax, softmax, Tensor};

fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), 2.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Naive triple loop on row-major data.
fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

fn transpose(t: &Tensor<f64>) -> Tensor<f64> {
    t.permute(&[1, 0])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_naive(m in 1usize..7, k in 1usize..7, n in 1usize..7, ta: bool, tb: bool, seed: u64) {
        let a = rnd(&[m, k], seed);
        let b = rnd(&[k, n], seed ^ 1);
        let expect = naive_matmul(a.data(), b.data(), m, k, n);
        let a_in = if ta { transpose(&a) } else { a.clone() };
        let b_in = if tb { transpose(&b) } else { b.clone() };
        let got = a_in.matmul(&b_in, ta, tb);
        prop_assert_eq!(got.shape(), &[m, n]);
        for (x, y) in got.data().iter().zip(&expect) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_then_inverse_is_identity(dims in prop::collection::vec(1usize..4, 1..5), seed: u64) {
        let t = rnd(&dims, seed);
        let mut perm: Vec<usize> = (0..dims.len()).collect();
        perm.rotate_left(1);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        prop_assert_eq!(t.permute(&perm).permute(&inverse), t);
    }

    #[test]
    fn broadcast_sum_round_trip(rows in 1usize..6, cols in 1usize..6, seed: u64) {
        let row = rnd(&[1, cols], seed);
        let wide = row.broadcast_zip(&Tensor::zeros(vec![rows, cols]), |a, b| a + b);
        prop_assert_eq!(wide.shape(), &[rows, cols]);
        let back = wide.sum_to_shape(&[1, cols]);
        for (x, y) in back.data().iter().zip(row.data()) {
            prop_assert!((x - rows as f64 * y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant(cols in 1usize..12, shift in -50.0f64..50.0, seed: u64) {
        let x = rnd(&[3, cols], seed);
        let p = softmax(&x);
        let q = softmax(&x.map(|v| v + shift));
        prop_assert!(p.max_abs_diff(&q) < 1e-12);
        let lp = log_softmax(&x);
        for (a, b) in lp.data().iter().zip(p.data()) {
            prop_assert!((a.exp() - b).abs() < 1e-12);
        }
        for row in p.data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
