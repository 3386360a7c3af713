use mmdg_autodiff::gradcheck::{analytic_gradient, numeric_gradient};
use mmdg_autodiff::{AutodiffError, CounterRng, Graph, Tensor};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
    let y = g.matmul(eye, b).unwrap();
    assert_eq!(g.data(y), &[3.0, 4.0]);

    let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let y = g.matmul(a, b).unwrap();
    assert_eq!(g.data(y), &[11.0]);
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let a = t(&[1, 2], &[1.0, 2.0]);
    let mut f = |g: &mut Graph, p| {
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let y = g.matmul(p, b)?;
        g.sum(y)
    };
    let (_, analytic) = analytic_gradient(&mut f, &a).unwrap();
    let numeric = numeric_gradient(|q| Ok(q[0] * 3.0 + q[1] * 4.0), a.data(), 1e-6, None).unwrap();
    close(&analytic, &[3.0, 4.0], 0.0);
    close(&numeric, &[3.0, 4.0], 1e-8);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        AutodiffError::Shape {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("[2, 3] and [2, 3]"));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[0.0; 3]));
    let y = g.softmax_rows(x).unwrap();
    close(g.data(y), &[1.0 / 3.0; 3], 1e-15);

    let x = g.constant(t(&[2], &[1f64.ln(), 3f64.ln()]));
    let y = g.softmax_rows(x).unwrap();
    close(g.data(y), &[0.25, 0.75], 1e-15);

    let x = g.constant(t(&[1, 4], &[5.0, -2.0, 0.5, 9.0]));
    let z = g.scale(x, 0.0).unwrap();
    let y = g.softmax_rows(z).unwrap();
    close(g.data(y), &[0.25; 4], 0.0);

    let x = g.constant(t(&[2], &[f64::NAN, 0.0]));
    assert!(matches!(
        g.softmax_rows(x),
        Err(AutodiffError::Numeric { .. })
    ));
}

#[test]
fn softmax_rows_sum_to_one_and_stay_in_open_interval() {
    let r = CounterRng::new(3);
    let data: Vec<f64> = (0..40).map(|i| 20.0 * (r.uniform(0, i) - 0.5)).collect();
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 4, 5], &data));
    let y = g.softmax_rows(x).unwrap();
    for row in g.data(y).chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let one = g.constant(t(&[2], &[1.0, 1.0]));
    let zero = g.constant(t(&[2], &[0.0, 0.0]));

    let x = g.constant(t(&[1, 1, 2], &[4.0, 4.0]));
    let y = g.layer_norm(x, one, zero, 1e-6).unwrap();
    assert_eq!(g.data(y), &[0.0, 0.0]);

    let x = g.constant(t(&[1, 1, 2], &[1.0, 3.0]));
    let y = g.layer_norm(x, one, zero, 0.0).unwrap();
    close(g.data(y), &[-1.0, 1.0], 1e-15);
}

#[test]
fn layer_norm_standardizes_each_token() {
    let r = CounterRng::new(9);
    let data: Vec<f64> = (0..24).map(|i| 3.0 * r.uniform(1, i) - 1.0).collect();
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 3, 4], &data));
    let one = g.constant(Tensor::filled(&[4], 1.0));
    let zero = g.constant(Tensor::zeros(&[4]));
    let y = g.layer_norm(x, one, zero, 0.0).unwrap();
    for tok in g.data(y).chunks(4) {
        let m = tok.iter().sum::<f64>() / 4.0;
        let v = tok.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-14 && (v - 1.0).abs() < 1e-12);
    }
}

/// Straight nested-loop evaluation of
/// `y(p0) = Σ w(pn)·x(p0+pn) − θ·x(p0)·Σ w(pn)` over in-image taps.
fn cdc_brute_force(x: &[f64], w: &[f64], h: usize, wd: usize, theta: f64) -> Vec<f64> {
    let mut y = vec![0.0; h * wd];
    for i in 0..h as i64 {
        for j in 0..wd as i64 {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for di in -1..=1i64 {
                for dj in -1..=1i64 {
                    let (ii, jj) = (i + di, j + dj);
                    if ii < 0 || jj < 0 || ii >= h as i64 || jj >= wd as i64 {
                        continue;
                    }
                    let wv = w[((di + 1) * 3 + (dj + 1)) as usize];
                    acc += wv * x[(ii * wd as i64 + jj) as usize];
                    wsum += wv;
                }
            }
            y[(i * wd as i64 + j) as usize] = acc - theta * x[(i * wd as i64 + j) as usize] * wsum;
        }
    }
    y
}

#[test]
fn cdc_identity_kernel_at_theta_zero() {
    let r = CounterRng::new(5);
    let x: Vec<f64> = (0..16).map(|i| r.uniform(0, i)).collect();
    let mut w = vec![0.0; 9];
    w[4] = 1.0;
    let mut g = Graph::new();
    let xv = g.constant(t(&[1, 1, 4, 4], &x));
    let wv = g.constant(t(&[1, 1, 3, 3], &w));
    let y = g.cdc_conv(xv, wv, 0.0).unwrap();
    assert_eq!(g.data(y), x.as_slice());
}

#[test]
fn cdc_annihilates_constants_at_theta_one() {
    let r = CounterRng::new(6);
    let w: Vec<f64> = (0..2 * 3 * 9).map(|i| r.uniform(0, i) - 0.5).collect();
    let mut g = Graph::new();
    let xv = g.constant(Tensor::filled(&[2, 3, 4, 4], 2.5));
    let wv = g.constant(t(&[2, 3, 3, 3], &w));
    let y = g.cdc_conv(xv, wv, 1.0).unwrap();
    assert!(g.data(y).iter().all(|v| v.abs() < 1e-14));
}

#[test]
fn cdc_matches_nested_loop_oracle() {
    for seed in 0..10 {
        let r = CounterRng::new(seed);
        let x: Vec<f64> = (0..16).map(|i| r.uniform(0, i) * 2.0 - 1.0).collect();
        let w: Vec<f64> = (0..9).map(|i| r.uniform(1, i) * 2.0 - 1.0).collect();
        let mut g = Graph::new();
        let xv = g.constant(t(&[1, 1, 4, 4], &x));
        let wv = g.constant(t(&[1, 1, 3, 3], &w));
        let y = g.cdc_conv(xv, wv, 0.7).unwrap();
        close(g.data(y), &cdc_brute_force(&x, &w, 4, 4, 0.7), 1e-14);
    }
}

#[test]
fn cdc_rejects_theta_outside_unit_interval() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
    let w = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(matches!(
        g.cdc_conv(x, w, 1.5),
        Err(AutodiffError::Config(_))
    ));
    assert!(matches!(
        g.cdc_conv(x, w, -0.1),
        Err(AutodiffError::Config(_))
    ));
}

#[test]
fn dropout_is_inverted_and_replayable() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::filled(&[1000], 1.0));
    let rng = CounterRng::new(11);
    let a = g.dropout(x, 0.25, rng, 3).unwrap();
    let b = g.dropout(x, 0.25, rng, 3).unwrap();
    assert_eq!(g.data(a), g.data(b));
    assert!(g.data(a).iter().all(|&v| v == 0.0 || v == 1.0 / 0.75));
}

#[test]
fn cross_entropy_of_confident_logits() {
    let mut g = Graph::new();
    let l = g.constant(t(&[1, 2], &[10.0, -10.0]));
    let ce = g.cross_entropy(l, &[0]).unwrap();
    let expected = (-20f64).exp().ln_1p();
    assert!((g.value(ce).item() - expected).abs() < 1e-12 * expected);
    assert!((g.value(ce).item() - 2.06e-9).abs() < 1e-11);
}

#[test]
fn backward_reaches_every_differentiable_leaf() {
    let mut g = Graph::new();
    let a = g.variable(t(&[2], &[1.0, 2.0]));
    let b = g.variable(t(&[2], &[3.0, 4.0]));
    let frozen = g.constant(t(&[2], &[5.0, 6.0]));
    let s = g.add(a, b).unwrap();
    let s = g.mul(s, frozen).unwrap();
    let loss = g.sum(s).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(a).unwrap(), &[5.0, 6.0]);
    assert_eq!(grads.get(b).unwrap(), &[5.0, 6.0]);
    assert!(grads.get(frozen).is_none());
}

#[test]
fn backward_requires_scalar_root() {
    let mut g = Graph::new();
    let a = g.variable(t(&[2], &[1.0, 2.0]));
    assert!(g.backward(a).is_err());
}
