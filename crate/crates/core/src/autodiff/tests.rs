use super::*;
use crate::error::Error;
use crate::geometry::Region;

fn t(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
}

#[test]
fn tensor_shape_invariant() {
    assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    let mut a = t(&[2], &[1.0, 2.0]);
    assert!(a.accumulate_grad(&[1.0]).is_err());
    a.accumulate_grad(&[0.5, 0.25]).unwrap();
    a.accumulate_grad(&[0.5, 0.25]).unwrap();
    assert_eq!(a.grad().unwrap(), &[1.0, 0.5]);
}

#[test]
fn conv_identity_kernel() {
    let mut g = Graph::new();
    let vals: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
    let x = g.constant(&t(&[1, 3, 4], &vals));
    let w = g.constant(&t(&[1, 1, 1, 1], &[1.0]));
    let b = g.constant(&t(&[1], &[0.0]));
    let y = g.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 4]);
    assert_eq!(g.value(y), vals.as_slice());
}

#[test]
fn conv_all_ones_sum() {
    let mut g = Graph::new();
    let x = g.constant(&t(&[1, 3, 3], &[1.0; 9]));
    let w = g.constant(&t(&[1, 1, 3, 3], &[1.0; 9]));
    let b = g.constant(&t(&[1], &[0.0]));
    let y = g.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(g.value(y), &[9.0]);
}

#[test]
fn conv_output_size_and_errors() {
    let mut g = Graph::new();
    let x = g.constant(&Tensor::zeros(vec![2, 7, 9]));
    let w = g.constant(&Tensor::zeros(vec![3, 2, 3, 3]));
    let b = g.constant(&Tensor::zeros(vec![3]));
    let y = g.conv2d(x, w, b, 2, 0).unwrap();
    assert_eq!(g.shape(y), &[3, 3, 4]);
    let y = g.conv2d(x, w, b, 1, 1).unwrap();
    assert_eq!(g.shape(y), &[3, 7, 9]);
    let wbad = g.constant(&Tensor::zeros(vec![3, 4, 3, 3]));
    match g.conv2d(x, wbad, b, 1, 0) {
        Err(Error::ShapeMismatch { left, right, .. }) => {
            assert_eq!(left, vec![2, 7, 9]);
            assert_eq!(right, vec![3, 4, 3, 3]);
        }
        other => panic!("{other:?}"),
    }
    let big = g.constant(&Tensor::zeros(vec![3, 2, 9, 9]));
    assert!(g.conv2d(x, big, b, 1, 0).is_err());
}

#[test]
fn conv_padding_matches_explicit_zero_border() {
    // direct summation oracle with a zero border
    let (h, w) = (3usize, 4usize);
    let xs: Vec<f64> = (0..h * w).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
    let ks: Vec<f64> = (0..9).map(|i| (i as f64 - 4.0) * 0.25).collect();
    let mut g = Graph::new();
    let x = g.constant(&t(&[1, h, w], &xs));
    let k = g.constant(&t(&[1, 1, 3, 3], &ks));
    let b = g.constant(&t(&[1], &[0.5]));
    let y = g.conv2d(x, k, b, 1, 1).unwrap();
    let at = |yy: isize, xx: isize| {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            0.0
        } else {
            xs[yy as usize * w + xx as usize]
        }
    };
    for oy in 0..h {
        for ox in 0..w {
            let mut s = 0.5;
            for ky in 0..3 {
                for kx in 0..3 {
                    s += ks[ky * 3 + kx] * at(oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                }
            }
            assert!((g.value(y)[oy * w + ox] - s).abs() < 1e-12);
        }
    }
}

#[test]
fn relu_examples() {
    let mut g = Graph::new();
    let x = g.variable(&t(&[2], &[-3.0, 4.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y), &[0.0, 4.0]);

    let mut g = Graph::new();
    let x = g.variable(&t(&[3], &[-1.0, -2.0, -0.5]));
    let y = g.relu(x);
    let w = g.constant(&t(&[1, 3], &[1.0, 1.0, 1.0]));
    let b = g.constant(&t(&[1], &[0.0]));
    let l = g.linear(y, w, b).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.value(y), &[0.0, 0.0, 0.0]);
    assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
}

#[test]
fn max_pool_examples() {
    let mut g = Graph::new();
    let x = g.variable(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.max_pool2d(x, 2, 2).unwrap();
    assert_eq!(g.value(y), &[4.0]);
    let l = g.sum(&[y]).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 0.0, 1.0]);

    // ties route to the first row-major element
    let mut g = Graph::new();
    let x = g.variable(&t(&[1, 2, 2], &[5.0, 5.0, 5.0, 5.0]));
    let y = g.max_pool2d(x, 2, 2).unwrap();
    let l = g.sum(&[y]).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);

    assert!(g.max_pool2d(x, 3, 1).is_err());
}

#[test]
fn max_pool_odd_size_floors() {
    let mut g = Graph::new();
    let x = g.constant(&Tensor::zeros(vec![2, 5, 7]));
    let y = g.max_pool2d(x, 2, 2).unwrap();
    assert_eq!(g.shape(y), &[2, 2, 3]);
}

#[test]
fn linear_examples() {
    let mut g = Graph::new();
    let x = g.constant(&t(&[3], &[1.5, -2.0, 0.25]));
    let w = g.constant(&t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
    let b = g.constant(&Tensor::zeros(vec![3]));
    let y = g.linear(x, w, b).unwrap();
    assert_eq!(g.value(y), &[1.5, -2.0, 0.25]);

    let z = g.constant(&Tensor::zeros(vec![3]));
    let w2 = g.constant(&t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
    let b2 = g.constant(&t(&[2], &[0.5, -1.0]));
    let y = g.linear(z, w2, b2).unwrap();
    assert_eq!(g.value(y), &[0.5, -1.0]);

    let bad = g.constant(&Tensor::zeros(vec![4]));
    assert!(matches!(g.linear(bad, w2, b2), Err(Error::ShapeMismatch { .. })));

    // batched rows
    let xs = g.constant(&t(&[2, 3], &[1., 0., 0., 0., 0., 1.]));
    let y = g.linear(xs, w2, b2).unwrap();
    assert_eq!(g.shape(y), &[2, 2]);
    assert_eq!(g.value(y), &[1.5, 3.0, 3.5, 5.0]);
}

#[test]
fn roi_pool_examples() {
    let full = Region::new(0.0, 0.0, 2.0, 2.0).unwrap();
    let mut g = Graph::new();
    let f = g.variable(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let p1 = g.roi_max_pool(f, &[full], 1.0, 1).unwrap();
    assert_eq!(g.value(p1), &[4.0]);
    let p2 = g.roi_max_pool(f, &[full], 1.0, 2).unwrap();
    assert_eq!(g.shape(p2), &[1, 1, 2, 2]);
    assert_eq!(g.value(p2), &[1.0, 2.0, 3.0, 4.0]);

    // constant map
    let mut g = Graph::new();
    let f = g.constant(&t(&[2, 3, 3], &[0.7; 18]));
    let r = Region::new(0.5, 0.2, 2.9, 2.0).unwrap();
    let p = g.roi_max_pool(f, &[r], 1.0, 4).unwrap();
    assert!(g.value(p).iter().all(|&v| v == 0.7));

    // single cell
    let mut g = Graph::new();
    let vals: Vec<f64> = (0..16).map(|i| i as f64).collect();
    let f = g.constant(&t(&[1, 4, 4], &vals));
    let cell = Region::new(4.0, 8.0, 8.0, 12.0).unwrap();
    let p = g.roi_max_pool(f, &[cell], 0.25, 1).unwrap();
    assert_eq!(g.value(p), &[9.0]);

    let outside = Region::new(20.0, 20.0, 30.0, 30.0).unwrap();
    assert!(g.roi_max_pool(f, &[outside], 0.25, 2).is_err());
}

#[test]
fn roi_pool_gradient_accumulates_over_overlapping_rois() {
    let full = Region::new(0.0, 0.0, 2.0, 2.0).unwrap();
    let mut g = Graph::new();
    let f = g.variable(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let p = g.roi_max_pool(f, &[full, full], 1.0, 1).unwrap();
    let flat = g.reshape(p, vec![1, 2]).unwrap();
    let m = g.reduce_max_rows(flat).unwrap();
    let zero = g.constant(&t(&[1], &[0.0]));
    let r = g.reshape(m, vec![2]).unwrap();
    let w = g.constant(&t(&[1, 2], &[1.0, 1.0]));
    let s = g.linear(r, w, zero).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(f).unwrap(), &[0.0, 0.0, 0.0, 2.0]);
}

#[test]
fn reduce_max_rows_examples() {
    let mut g = Graph::new();
    let x = g.variable(&t(&[1, 3], &[0.1, 0.2, 0.3]));
    let m = g.reduce_max_rows(x).unwrap();
    assert_eq!(g.value(m), &[0.1, 0.2, 0.3]);
    assert_eq!(g.argmax(m).unwrap(), &[0, 0, 0]);

    let x = g.variable(&t(&[3, 1], &[0.3, 0.9, 0.1]));
    let m = g.reduce_max_rows(x).unwrap();
    assert_eq!(g.value(m), &[0.9]);
    assert_eq!(g.argmax(m).unwrap(), &[1]);

    let x = g.variable(&t(&[2, 1], &[0.5, 0.5]));
    let m = g.reduce_max_rows(x).unwrap();
    assert_eq!(g.argmax(m).unwrap(), &[0]);

    let empty = g.variable(&Tensor::zeros(vec![0, 2]));
    assert!(g.reduce_max_rows(empty).is_err());
}

#[test]
fn reduce_max_rows_ties_prefer_lowest_row_in_any_order() {
    let mut g = Graph::new();
    let x = g.variable(&t(&[3, 2], &[1.0, 0.0, 2.0, 5.0, 2.0, 5.0]));
    let m = g.reduce_max_rows_among(x, &[vec![2, 1], vec![2, 0, 1]]).unwrap();
    assert_eq!(g.argmax(m).unwrap(), &[1, 1]);
}

#[test]
fn reduce_max_rows_gradient_single_row_per_column() {
    let mut g = Graph::new();
    let x = g.variable(&t(&[3, 2], &[1.0, 4.0, 3.0, 2.0, 0.0, 9.0]));
    let m = g.reduce_max_rows(x).unwrap();
    let w = g.constant(&t(&[1, 2], &[2.0, -1.0]));
    let b = g.constant(&t(&[1], &[0.0]));
    let y = g.linear(m, w, b).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 2.0, 0.0, 0.0, -1.0]);
}

#[test]
fn softmax_logloss_examples() {
    let mut g = Graph::new();
    let x = g.variable(&Tensor::zeros(vec![10]));
    let l = g.softmax_logloss(x, 3).unwrap();
    assert!((g.value(l)[0] - 10f64.ln()).abs() < 1e-12);
    assert!(g.probabilities(l).unwrap().iter().all(|p| (p - 0.1).abs() < 1e-15));

    let x = g.variable(&t(&[2], &[1000.0, 0.0]));
    let l = g.softmax_logloss(x, 0).unwrap();
    assert!(g.value(l)[0].is_finite());
    assert!(g.value(l)[0].abs() < 1e-300);
    let l1 = g.softmax_logloss(x, 1).unwrap();
    assert!((g.value(l1)[0] - 1000.0).abs() < 1e-9);

    let bad = g.variable(&t(&[2], &[f64::NAN, 0.0]));
    assert!(g.softmax_logloss(bad, 0).is_err());
    assert!(g.softmax_logloss(x, 2).is_err());
}

#[test]
fn sigmoid_cross_entropy_examples() {
    let mut g = Graph::new();
    let x = g.variable(&t(&[1], &[0.0]));
    let l = g.sigmoid_cross_entropy(x, &[true]).unwrap();
    assert!((g.value(l)[0] - std::f64::consts::LN_2).abs() < 1e-15);
    let x = g.variable(&t(&[1], &[40.0]));
    let l = g.sigmoid_cross_entropy(x, &[true]).unwrap();
    assert!(g.value(l)[0] < 1e-17);
    assert!(g.sigmoid_cross_entropy(x, &[true, false]).is_err());
}

#[test]
fn backward_errors_and_unused_parameters() {
    let mut other = Graph::new();
    let foreign = other.constant(&Tensor::scalar(1.0));
    let mut g = Graph::new();
    assert!(matches!(g.backward(foreign), Err(Error::NoForward)));
    let a = g.variable(&t(&[2], &[1.0, 2.0]));
    let unused = g.variable(&t(&[2], &[3.0, 4.0]));
    let s = g.softmax_logloss(a, 0).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(unused).is_none());
    assert_eq!(g.grad_or_zero(unused), vec![0.0, 0.0]);
    assert_eq!(g.grad(s).unwrap(), &[1.0]);
    // non-scalar loss
    assert!(g.backward(a).is_err());
}

#[test]
fn repeated_backward_accumulates_exactly_double() {
    let mut g = Graph::new();
    let a = g.variable(&t(&[3], &[0.3, -1.0, 2.0]));
    let s = g.softmax_logloss(a, 1).unwrap();
    let mut param = t(&[3], &[0.3, -1.0, 2.0]);
    g.backward(s).unwrap();
    param.accumulate_grad(g.grad(a).unwrap()).unwrap();
    let once = param.grad().unwrap().to_vec();
    g.backward(s).unwrap();
    param.accumulate_grad(g.grad(a).unwrap()).unwrap();
    let twice = param.grad().unwrap();
    for (o, t) in once.iter().zip(twice) {
        assert_eq!(2.0 * o, *t);
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let vals: Vec<f64> = (0..48).map(|i| ((i * 37) % 11) as f64 / 7.0 - 0.6).collect();
        let x = g.constant(&t(&[3, 4, 4], &vals));
        let wv: Vec<f64> = (0..54).map(|i| vals[i % 48] * 0.5).collect();
        let w = g.variable(&t(&[2, 3, 3, 3], &wv));
        let b = g.variable(&t(&[2], &[0.1, -0.1]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        let y = g.relu(y);
        g.value(y).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
