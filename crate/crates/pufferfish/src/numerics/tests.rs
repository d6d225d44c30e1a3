use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Naive i-j-k triple loop, kept as an independent oracle for `matmul`.
fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    Tensor::from_fn_2d(m, n, |i, j| (0..k).map(|kk| a.at2(i, kk) * b.at2(kk, j)).sum())
}

/// Direct 6-nested-loop convolution oracle (no lowering).
fn conv_oracle(input: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (c_in, h, wd) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, k) = (w.shape()[1], w.shape()[2]);
    let h_out = conv_out_dim(h, k, stride, pad).unwrap();
    let w_out = conv_out_dim(wd, k, stride, pad).unwrap();
    let mut out = Tensor::zeros(&[c_out, h_out, w_out]);
    for co in 0..c_out {
        for ci in 0..c_in {
            for kr in 0..k {
                for kc in 0..k {
                    let wv = w.data()[((ci * c_out + co) * k + kr) * k + kc];
                    for oy in 0..h_out {
                        for ox in 0..w_out {
                            let iy = (oy * stride + kr) as isize - pad as isize;
                            let ix = (ox * stride + kc) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            out.data_mut()[(co * h_out + oy) * w_out + ox] +=
                                wv * input.data()[(ci * h + iy as usize) * wd + ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn matmul_identity() {
    let m = random_tensor(&[3, 5], 1);
    let got = matmul(&Tensor::eye(3), &m).unwrap();
    assert_eq!(got, m);
}

#[test]
fn matmul_hand_example() {
    let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap();
    let c = matmul(&a, &b).unwrap();
    assert_eq!(c.data(), &[17.0, 39.0]);
}

#[test]
fn matmul_matches_naive_oracle() {
    let a = random_tensor(&[17, 9], 2);
    let b = random_tensor(&[9, 5], 3);
    let got = matmul(&a, &b).unwrap();
    let want = matmul_oracle(&a, &b);
    assert!(max_abs_diff(&got, &want) <= 1e-12);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let a = random_tensor(&[2, 3], 4);
    let b = random_tensor(&[4, 2], 5);
    let err = matmul(&a, &b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
}

#[test]
fn matmul_deterministic_across_runs() {
    let a = random_tensor(&[33, 21], 6);
    let b = random_tensor(&[21, 19], 7);
    let c1 = matmul(&a, &b).unwrap();
    let c2 = matmul(&a, &b).unwrap();
    assert_eq!(c1.data(), c2.data());
}

#[cfg(feature = "parallel")]
#[test]
fn matmul_parallel_bitwise_equals_sequential() {
    let a = random_tensor(&[130, 70], 8);
    let b = random_tensor(&[70, 90], 9);
    let s = matmul_seq(&a, &b).unwrap();
    let p = matmul_par(&a, &b).unwrap();
    assert_eq!(s.data(), p.data());
}

#[test]
fn unroll_single_element() {
    let w = Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap();
    let u = unroll_conv_weight(&w).unwrap();
    assert_eq!(u.shape(), &[1, 1]);
    assert_eq!(u.data(), &[3.0]);
}

#[test]
fn unroll_rank_bounded_by_min_dim() {
    // rank(unrolled) <= min(c_in k^2, c_out), measured via the SVD tail.
    let w = random_tensor(&[3, 4, 2, 2], 10);
    let u = unroll_conv_weight(&w).unwrap();
    assert_eq!(u.shape(), &[12, 4]);
    let res = svd(&u).unwrap();
    let rank = res.s.iter().filter(|&&s| s > 1e-10).count();
    assert!(rank <= 4);
}

#[test]
fn im2col_k1_is_reshape() {
    let input = random_tensor(&[3, 4, 5], 11);
    let cols = im2col(&input, 1, 1, 0).unwrap();
    assert_eq!(cols.shape(), &[3, 20]);
    assert_eq!(cols.data(), input.data());
}

#[test]
fn im2col_patch_count() {
    let input = random_tensor(&[1, 3, 3], 12);
    let cols = im2col(&input, 2, 1, 0).unwrap();
    assert_eq!(cols.shape(), &[4, 4]);
}

#[test]
fn im2col_degenerate_output_errors() {
    let input = random_tensor(&[1, 2, 2], 13);
    assert!(im2col(&input, 5, 1, 0).is_err());
}

#[test]
fn conv_via_im2col_matches_nested_loop_oracle() {
    let input = random_tensor(&[2, 5, 5], 14);
    let w = random_tensor(&[2, 3, 3, 3], 15);
    for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 1)] {
        let cols = im2col(&input, 3, stride, pad).unwrap();
        let wu = unroll_conv_weight(&w).unwrap();
        let out = matmul(&wu.transposed(), &cols).unwrap();
        let want = conv_oracle(&input, &w, stride, pad);
        let got = out
            .reshaped(vec![want.shape()[0], want.shape()[1], want.shape()[2]])
            .unwrap();
        assert!(max_abs_diff(&got, &want) <= 1e-12);
    }
}

#[test]
fn col2im_roundtrips_against_fd() {
    // col2im is the adjoint of im2col: <im2col(x), c> == <x, col2im(c)>.
    let x = random_tensor(&[2, 4, 4], 16);
    let cols = im2col(&x, 3, 1, 1).unwrap();
    let c = random_tensor(&[cols.shape()[0], cols.shape()[1]], 17);
    let lhs: f64 = cols.data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
    let back = col2im(&c, 2, 4, 4, 3, 1, 1).unwrap();
    let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() <= 1e-12);
}

#[test]
fn svd_identity() {
    let res = svd(&Tensor::eye(3)).unwrap();
    for s in &res.s {
        assert!((s - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn svd_diagonal() {
    let m = Tensor::from_fn_2d(3, 3, |i, j| if i == j { (3 - i) as f64 } else { 0.0 });
    let res = svd(&m).unwrap();
    assert!((res.s[0] - 3.0).abs() <= 1e-12);
    assert!((res.s[1] - 2.0).abs() <= 1e-12);
    assert!((res.s[2] - 1.0).abs() <= 1e-12);
    // the sign convention resolves "up to sign" to exactly the identity
    assert!(max_abs_diff(&res.u, &Tensor::eye(3)) <= 1e-12);
    assert!(max_abs_diff(&res.vt, &Tensor::eye(3)) <= 1e-12);
}

#[test]
fn svd_reconstructs_random_matrix() {
    let m = random_tensor(&[8, 6], 7);
    let res = svd(&m).unwrap();
    let rec = res.reconstruct().unwrap();
    let err = rec.sub(&m).unwrap().frob_norm();
    assert!(err <= 1e-10 * m.frob_norm(), "err {err}");
}

#[test]
fn svd_wide_matrix_and_orthonormality() {
    let m = random_tensor(&[5, 9], 18);
    let res = svd(&m).unwrap();
    assert_eq!(res.u.shape(), &[5, 5]);
    assert_eq!(res.vt.shape(), &[5, 9]);
    let utu = matmul(&res.u.transposed(), &res.u).unwrap();
    assert!(max_abs_diff(&utu, &Tensor::eye(5)) <= 1e-9);
    let vvt = matmul(&res.vt, &res.vt.transposed()).unwrap();
    assert!(max_abs_diff(&vvt, &Tensor::eye(5)) <= 1e-9);
    let rec = res.reconstruct().unwrap();
    assert!(rec.sub(&m).unwrap().frob_norm() <= 1e-10 * m.frob_norm());
}

#[test]
fn svd_singular_values_match_gram_eigenvalues() {
    // s_i^2 must agree with the eigenvalues of m^T m, computed by running
    // the same Jacobi routine on the symmetric problem.
    let m = random_tensor(&[9, 6], 19);
    let gram = matmul(&m.transposed(), &m).unwrap();
    let s = svd(&m).unwrap().s;
    let eig = svd(&gram).unwrap().s;
    for (si, ei) in s.iter().zip(&eig) {
        let want = ei.sqrt();
        assert!((si - want).abs() <= 1e-8 * want.max(1e-30), "{si} vs {want}");
    }
}

#[test]
fn svd_rank_deficient_keeps_orthonormal_u() {
    // rank-1 matrix: trailing singular values are zero, u must still be
    // orthonormal thanks to the completion step.
    let m = Tensor::from_fn_2d(4, 3, |_, _| 1.0);
    let res = svd(&m).unwrap();
    assert!((res.s[0] - (12.0f64).sqrt()).abs() <= 1e-10);
    assert!(res.s[1].abs() <= 1e-10);
    let utu = matmul(&res.u.transposed(), &res.u).unwrap();
    assert!(max_abs_diff(&utu, &Tensor::eye(3)) <= 1e-9);
}

#[test]
fn truncated_split_diag_example() {
    let m = Tensor::new(vec![2, 2], vec![4.0, 0.0, 0.0, 1.0]).unwrap();
    let (u, v) = truncated_split(&m, 1).unwrap();
    assert!(max_abs_diff(&u, &Tensor::new(vec![2, 1], vec![2.0, 0.0]).unwrap()) <= 1e-12);
    assert!(max_abs_diff(&v, &Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap()) <= 1e-12);
}

#[test]
fn truncated_split_full_rank_reconstructs() {
    let m = random_tensor(&[7, 4], 20);
    let (u, v) = truncated_split(&m, 4).unwrap();
    let rec = matmul(&u, &v).unwrap();
    assert!(rec.sub(&m).unwrap().frob_norm() <= 1e-9 * m.frob_norm());
}

#[test]
fn truncated_split_error_equals_sigma_tail() {
    let m = random_tensor(&[10, 4], 21);
    let s = svd(&m).unwrap().s;
    let (u, v) = truncated_split(&m, 2).unwrap();
    let err = matmul(&u, &v).unwrap().sub(&m).unwrap().frob_norm();
    let want = (s[2] * s[2] + s[3] * s[3]).sqrt();
    assert!((err - want).abs() <= 1e-9, "err {err} want {want}");
}

#[test]
fn truncated_split_factors_have_equal_norm() {
    let m = random_tensor(&[12, 9], 22);
    let (u, v) = truncated_split(&m, 3).unwrap();
    assert!((u.frob_norm() - v.frob_norm()).abs() <= 1e-9);
}

#[test]
fn truncated_split_rank_out_of_range() {
    let m = random_tensor(&[4, 3], 23);
    assert!(truncated_split(&m, 0).is_err());
    assert!(truncated_split(&m, 4).is_err());
}

#[test]
fn truncated_split_beats_random_factor_pairs() {
    // Eckart-Young proxy: no random rank-r pair does better in Frobenius norm.
    let m = random_tensor(&[10, 8], 24);
    let r = 3;
    let (u, v) = truncated_split(&m, r).unwrap();
    let best = matmul(&u, &v).unwrap().sub(&m).unwrap().frob_norm();
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    for _ in 0..200 {
        let ur = Tensor::from_fn(&[10, r], |_| rng.gen_range(-1.0..1.0));
        let vr = Tensor::from_fn(&[r, 8], |_| rng.gen_range(-1.0..1.0));
        let err = matmul(&ur, &vr).unwrap().sub(&m).unwrap().frob_norm();
        assert!(best <= err + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn prop_matmul_associative(seed in 0u64..1000, m in 1usize..5, k in 1usize..5, n in 1usize..5, q in 1usize..5) {
        let a = random_tensor(&[m, k], seed);
        let b = random_tensor(&[k, n], seed.wrapping_add(1));
        let c = random_tensor(&[n, q], seed.wrapping_add(2));
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        let scale = left.frob_norm().max(right.frob_norm()).max(1.0);
        prop_assert!(left.sub(&right).unwrap().frob_norm() <= 1e-9 * scale);
    }

    #[test]
    fn prop_roll_unroll_inverse(seed in 0u64..1000, c_in in 1usize..4, c_out in 1usize..5, k in 1usize..4) {
        let w = random_tensor(&[c_in, c_out, k, k], seed);
        let back = roll_conv_weight(&unroll_conv_weight(&w).unwrap(), c_in, k).unwrap();
        prop_assert_eq!(w.data(), back.data());
    }
}
