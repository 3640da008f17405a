mod common;

use common::*;
use proptest::prelude::*;
use psat::tape::Tape;
use psat::{Error, Tensor};
use rand::Rng;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
}

fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    for b in 0..n {
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let y = (i * stride + ky) as isize - pad as isize;
                                let xx = (j * stride + kx) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((b * c + ci) * h + y as usize) * wd + xx as usize];
                                acc += xv * w.data()[((o * c + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out.data_mut()[((b * co + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    out
}

fn forward_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> psat::Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let o = tape.conv2d(xv, wv, stride, pad)?;
    Ok(tape.value(o).clone())
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let z = tape.constant(Tensor::zeros(&[2, 2]));
    let ib = tape.matmul(i2, b).unwrap();
    assert_eq!(tape.value(ib).data(), &[5.0, 6.0, 7.0, 8.0]);
    let ab = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(ab).data(), &[19.0, 22.0, 43.0, 50.0]);
    assert_eq!(tape.value(ab).data(), &matmul_oracle(tape.value(a), tape.value(b))[..]);
    let az = tape.matmul(a, z).unwrap();
    assert!(tape.value(az).data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_matches_triple_loop_on_random_shapes() {
    let mut r = rng(11);
    for _ in 0..20 {
        let (m, k, n) = (r.gen_range(1..7), r.gen_range(1..7), r.gen_range(1..7));
        let a = uniform(&[m, k], -1.0, 1.0, &mut r);
        let b = uniform(&[k, n], -1.0, 1.0, &mut r);
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let o = tape.matmul(av, bv).unwrap();
        assert_eq!(tape.value(o).data(), &matmul_oracle(&a, &b)[..]);
    }
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension(_)), "{msg}");
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn conv_examples() {
    let ones = Tensor::full(&[1, 1, 3, 3], 1.0);
    let out = forward_conv(&ones, &Tensor::full(&[1, 1, 2, 2], 1.0), 1, 0).unwrap();
    assert_eq!(out.shape(), &[1, 1, 2, 2]);
    assert!(out.data().iter().all(|&v| v == 4.0));

    let mut r = rng(3);
    let x = uniform(&[1, 1, 3, 3], 0.0, 1.0, &mut r);
    let id = forward_conv(&x, &Tensor::full(&[1, 1, 1, 1], 1.0), 1, 0).unwrap();
    assert_eq!(id, x);
}

#[test]
fn conv_matches_nested_loop_oracle_bitwise() {
    let mut r = rng(5);
    let x = uniform(&[2, 3, 5, 5], -1.0, 1.0, &mut r);
    let w = uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut r);
    let got = forward_conv(&x, &w, 2, 1).unwrap();
    assert_eq!(got.shape(), &[2, 4, 3, 3]);
    assert_eq!(got, conv_oracle(&x, &w, 2, 1));

    for _ in 0..30 {
        let k = [1, 2, 3][r.gen_range(0..3)];
        let (h, wd) = (r.gen_range(k..=8), r.gen_range(k..=8));
        let (c, co, n) = (r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..3));
        let stride = r.gen_range(1..3);
        let pad = r.gen_range(0..2);
        let x = uniform(&[n, c, h, wd], -1.0, 1.0, &mut r);
        let w = uniform(&[co, c, k, k], -1.0, 1.0, &mut r);
        let got = forward_conv(&x, &w, stride, pad).unwrap();
        let want = conv_oracle(&x, &w, stride, pad);
        let same = got.data().iter().zip(want.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same && got.shape() == want.shape(), "n{n} c{c} {h}x{wd} co{co} k{k} s{stride} p{pad}");
    }
}

#[test]
fn conv_kernel_larger_than_input_is_dimension_error() {
    let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
    let w = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
    assert!(matches!(forward_conv(&x, &w, 1, 0), Err(Error::Dimension(_))));
    assert!(forward_conv(&x, &w, 1, 1).is_ok());
    assert!(matches!(forward_conv(&x, &Tensor::zeros(&[1, 2, 1, 1]), 1, 0), Err(Error::Dimension(_))));
}

fn ce(logits: Tensor<f64>, labels: &[usize]) -> psat::Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits);
    let o = tape.cross_entropy(l, labels)?;
    Ok(tape.value(o).item().unwrap())
}

#[test]
fn cross_entropy_examples() {
    let u = ce(Tensor::full(&[1, 10], 0.3), &[4]).unwrap();
    assert!((u - 10f64.ln()).abs() < 1e-12, "{u}");

    let mut sat = Tensor::full(&[2, 5], -1.0);
    sat.data_mut()[2] = 39.0;
    sat.data_mut()[5] = 39.0;
    let v = ce(sat, &[2, 0]).unwrap();
    assert!((0.0..1e-6).contains(&v), "{v}");

    let mut r = rng(9);
    let logits = uniform(&[4, 3], -3.0, 3.0, &mut r);
    let labels = [0, 2, 1, 2];
    let mut want = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        want -= (row[y].exp() / z).ln();
    }
    want /= 4.0;
    let got = ce(logits, &labels).unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn cross_entropy_label_out_of_range_is_index_error() {
    assert!(matches!(ce(Tensor::zeros(&[2, 3]), &[0, 3]), Err(Error::Index(_))));
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[3], &[1.0, -2.0, 3.0]), true);
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(&tape, x).data(), &[2.0, -4.0, 6.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(t(&[3], &[1.0, -2.0, 3.0]), true);
    let c = tape.leaf(t(&[2], &[0.5, 0.25]), true);
    let loss = tape.sum(c).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.get(x).is_none());
    assert_eq!(g.wrt(&tape, x).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn backward_accumulates_over_uses() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[3], &[1.0, -2.0, 3.0]), true);
    let sq = tape.mul(x, x).unwrap();
    let a = tape.sum(sq).unwrap();
    let b = tape.sum(x).unwrap();
    let b3 = tape.scale(b, 3.0).unwrap();
    let loss = tape.add(a, b3).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(&tape, x).data(), &[5.0, -1.0, 9.0]);
}

#[test]
fn backward_on_non_scalar_is_contract_error() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
    let y = tape.scale(x, 2.0).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
}

#[test]
fn ops_leave_inputs_untouched() {
    let mut r = rng(21);
    for case in op_cases(&mut r) {
        let mut tape = Tape::new();
        let vars: Vec<_> = case.inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let out = (case.build)(&mut tape, &vars).unwrap();
        tape.backward(out).unwrap();
        for (v, x) in vars.iter().zip(&case.inputs) {
            assert_eq!(tape.value(*v), x, "{} mutated an input", case.name);
        }
    }
}

#[test]
fn every_op_matches_finite_differences() {
    let mut r = rng(1);
    for _ in 0..5 {
        for case in op_cases(&mut r) {
            let e = check_op(&case.inputs, &case.build, &mut r);
            assert!(e < FD_TOL, "{}: relative error {e:e}", case.name);
        }
    }
}

#[test]
fn composition_matches_finite_differences() {
    let mut r = rng(2);
    let (e, _) = composition_suite(5, 0, &mut r);
    assert!(e < FD_TOL, "relative error {e:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>(), spread in 0.1f64..60.0) {
        let mut r = rng(seed);
        let x = uniform(&[rows, cols], -spread, spread, &mut r);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax(v).unwrap();
        for i in 0..rows {
            let total: f64 = tape.value(s).row(i).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_is_nonnegative(rows in 1usize..5, cols in 2usize..9, seed in any::<u64>(), spread in 0.1f64..80.0) {
        let mut r = rng(seed);
        let x = uniform(&[rows, cols], -spread, spread, &mut r);
        let labels: Vec<usize> = (0..rows).map(|_| r.gen_range(0..cols)).collect();
        let v = ce(x, &labels).unwrap();
        prop_assert!(v >= 0.0 && v.is_finite());
    }
}
