//! Dense tensor math, layer passes, losses and the Adam optimizer.
//!
//! Everything here works on row-major, batch-first `f64` data. The `Tensor`
//! type is the checked public surface; the slice-level helpers (`gemm`,
//! `affine_rows`, ...) are what the hypernetwork and main network use on
//! their flat parameter buffers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Dimension(format!("invalid shape {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor data"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape, vec![0.0; len])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::new(vec![n, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension(format!("{what} must be 2-D, got {s:?}"))),
        }
    }
}

/// `c = beta * c + op(a) * op(b)` with `op(a)` of size m×k and `op(b)` k×n.
///
/// `trans_a`/`trans_b` select whether the row-major buffers are read
/// transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: buffer lengths are asserted above and the strides describe
    // in-bounds row-major layouts of exactly those sizes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `x[n×d_in] · w[d_in×d_out] + b`, returned row-major.
pub(crate) fn affine_rows(x: &[f64], n: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let d_out = b.len();
    let d_in = w.len() / d_out;
    let mut y = Vec::with_capacity(n * d_out);
    for _ in 0..n {
        y.extend_from_slice(b);
    }
    gemm(n, d_in, d_out, x, false, w, false, 1.0, &mut y);
    y
}

/// Accumulates `dw += xᵀ·dy`, `db += Σ_rows dy` and, when requested,
/// returns `dx = dy·wᵀ`.
pub(crate) fn affine_rows_backward(
    x: &[f64],
    n: usize,
    w: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Option<Vec<f64>> {
    let d_out = db.len();
    let d_in = w.len() / d_out;
    gemm(d_in, n, d_out, x, true, dy, false, 1.0, dw);
    for row in dy.chunks_exact(d_out) {
        for (acc, g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    want_dx.then(|| {
        let mut dx = vec![0.0; n * d_in];
        gemm(n, d_out, d_in, dy, false, w, true, 0.0, &mut dx);
        dx
    })
}

pub(crate) fn relu_in_place(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `dy` wherever the forward activation was clamped.
pub(crate) fn relu_backward_in_place(activated: &[f64], dy: &mut [f64]) {
    for (g, a) in dy.iter_mut().zip(activated) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn affine_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, d_in) = x.dims2("x")?;
    let (w_in, d_out) = w.dims2("W")?;
    if w_in != d_in || b.shape() != [d_out] {
        return Err(Error::Dimension(format!(
            "affine: x {:?}, W {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    Tensor::new(vec![n, d_out], affine_rows(x.data(), n, w.data(), b.data()))
}

#[derive(Debug, Clone)]
pub struct AffineGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

pub fn affine_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<AffineGrads> {
    let (n, d_in) = x.dims2("x")?;
    let (w_in, d_out) = w.dims2("W")?;
    if w_in != d_in || dy.shape() != [n, d_out] {
        return Err(Error::Dimension("affine backward shapes".into()));
    }
    let mut dw = vec![0.0; d_in * d_out];
    let mut db = vec![0.0; d_out];
    let dx = affine_rows_backward(x.data(), n, w.data(), dy.data(), &mut dw, &mut db, true)
        .expect("dx requested");
    Ok(AffineGrads {
        dx: Tensor::new(vec![n, d_in], dx)?,
        dw: Tensor::new(vec![d_in, d_out], dw)?,
        db: Tensor::new(vec![d_out], db)?,
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    relu_in_place(&mut out.data);
    out
}

/// Per-sample `-log softmax(logits)[label]` and, optionally, the gradient of
/// the batch mean with respect to the logits.
pub(crate) fn cross_entropy_rows(
    logits: &[f64],
    classes: usize,
    labels: &[usize],
    grad: Option<&mut [f64]>,
) -> Result<Vec<f64>> {
    let n = labels.len();
    if logits.len() != n * classes {
        return Err(Error::Dimension(format!(
            "logits length {} for {n} labels × {classes} classes",
            logits.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let mut losses = Vec::with_capacity(n);
    let mut grad = grad;
    for (i, (row, &label)) in logits.chunks_exact(classes).zip(labels).enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let log_sum = sum.ln();
        losses.push(log_sum - (row[label] - max));
        if let Some(g) = grad.as_deref_mut() {
            let g_row = &mut g[i * classes..(i + 1) * classes];
            for (c, (gc, z)) in g_row.iter_mut().zip(row).enumerate() {
                let p = ((z - max) - log_sum).exp();
                *gc = (p - if c == label { 1.0 } else { 0.0 }) / n as f64;
            }
        }
    }
    Ok(losses)
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, classes) = logits.dims2("logits")?;
    if n != labels.len() {
        return Err(Error::Dimension(format!("{n} logit rows, {} labels", labels.len())));
    }
    let mut grad = vec![0.0; n * classes];
    let losses = cross_entropy_rows(logits.data(), classes, labels, Some(&mut grad))?;
    let loss = losses.iter().sum::<f64>() / n as f64;
    Ok((loss, Tensor::new(vec![n, classes], grad)?))
}

/// Squared L2 norm of `a - b` (a sum, not an element mean).
pub fn mse_to_target(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("lengths {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// In-place bias-corrected Adam update. Leaves everything untouched when
    /// the gradient contains a non-finite entry.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "adam tracks {} params, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Value-semantics wrapper around [`AdamState::step`].
pub fn adam_step(state: AdamState, params: Tensor, grads: &Tensor) -> Result<(Tensor, AdamState)> {
    let mut state = state;
    let shape = params.shape().to_vec();
    let mut data = params.into_data();
    state.step(&mut data, grads.data())?;
    Ok((Tensor::new(shape, data)?, state))
}

/// Gradients smaller than this are compared in absolute terms against it.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Maximum relative error between the analytic gradient returned by
/// `loss_fn` and central finite differences with step `eps`.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<F>(loss_fn: F, params: &[f64], eps: f64) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = loss_fn(params);
    let mut probe = params.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..params.len() {
        probe[i] = params[i] + eps;
        let (plus, _) = loss_fn(&probe);
        probe[i] = params[i] - eps;
        let (minus, _) = loss_fn(&probe);
        probe[i] = params[i];
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn affine_identity_and_bias() {
        let x = t2(&[&[1.0, 0.0]]);
        let w = Tensor::identity(2).unwrap();
        let b = Tensor::vector(vec![0.0, 0.0]).unwrap();
        assert_eq!(affine_forward(&x, &w, &b).unwrap().data(), &[1.0, 0.0]);

        let x = t2(&[&[1.0, 2.0]]);
        let w = t2(&[&[1.0, 0.0], &[1.0, 1.0]]);
        let b = Tensor::vector(vec![0.0, 1.0]).unwrap();
        assert_eq!(affine_forward(&x, &w, &b).unwrap().data(), &[3.0, 3.0]);

        let x = t2(&[&[0.0, 0.0]]);
        let w = t2(&[&[0.3, -2.0], &[7.0, 1.5]]);
        let b = Tensor::vector(vec![5.0, -5.0]).unwrap();
        assert_eq!(affine_forward(&x, &w, &b).unwrap().data(), &[5.0, -5.0]);
    }

    #[test]
    fn affine_shape_mismatch() {
        let x = t2(&[&[1.0, 2.0, 3.0]]);
        let w = Tensor::identity(2).unwrap();
        let b = Tensor::vector(vec![0.0, 0.0]).unwrap();
        assert!(matches!(affine_forward(&x, &w, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn tensor_rejects_bad_data() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn relu_cases() {
        let x = Tensor::vector(vec![-1.0, 2.0, 0.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0, 0.0]);
        let pos = Tensor::vector(vec![0.5, 3.0]).unwrap();
        assert_eq!(relu(&pos), pos);
        let neg = Tensor::vector(vec![-0.5, -3.0]).unwrap();
        assert_eq!(relu(&neg).data(), &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_values() {
        let (loss, _) = softmax_cross_entropy(&t2(&[&[0.0, 0.0]]), &[0]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);

        let c = 7;
        let logits = Tensor::new(vec![3, c], vec![1.25; 3 * c]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 3, 6]).unwrap();
        assert!((loss - (c as f64).ln()).abs() < 1e-12);

        let (loss, grad) = softmax_cross_entropy(&t2(&[&[1000.0, -1000.0]]), &[0]).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-12);
        assert!(grad.data().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let err = softmax_cross_entropy(&t2(&[&[0.0, 0.0]]), &[2]).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 2, classes: 2 }));
    }

    #[test]
    fn mse_values() {
        assert_eq!(mse_to_target(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse_to_target(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 25.0);
        assert_eq!(mse_to_target(&[1.0], &[0.0]).unwrap(), 1.0);
        assert!(mse_to_target(&[1.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let state = AdamState::new(3, 0.001);
        let params = Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap();
        let grads = Tensor::zeros(vec![3]).unwrap();
        let (out, state) = adam_step(state, params.clone(), &grads).unwrap();
        assert_eq!(out, params);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [0.37, -12.0, 1e-3] {
            let mut state = AdamState::new(1, 0.001);
            state.eps = 0.0;
            let mut p = [2.0];
            state.step(&mut p, &[g]).unwrap();
            let moved = 2.0 - p[0];
            assert!((moved - 0.001 * g.signum()).abs() < 1e-15, "g={g} moved={moved}");
        }
    }

    #[test]
    fn adam_moment_accumulation_differs_from_doubled_lr() {
        let grads = Tensor::vector(vec![0.5, -0.25]).unwrap();
        let p0 = Tensor::vector(vec![1.0, 1.0]).unwrap();

        let (p1, s1) = adam_step(AdamState::new(2, 0.01), p0.clone(), &grads).unwrap();
        let (two_calls, _) = adam_step(s1, p1, &grads).unwrap();

        let (one_call, _) = adam_step(AdamState::new(2, 0.02), p0, &grads).unwrap();
        assert_ne!(two_calls, one_call);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut state = AdamState::new(2, 0.001);
        let mut p = [1.0, 2.0];
        assert!(state.step(&mut p, &[0.0, f64::INFINITY]).is_err());
        assert_eq!(p, [1.0, 2.0]);
        assert_eq!(state.t, 0);
    }

    #[test]
    fn grad_check_quadratic_and_constant() {
        let quad = |p: &[f64]| (0.5 * p.iter().map(|x| x * x).sum::<f64>(), p.to_vec());
        let p = [0.3, -1.7, 2.5, 0.01];
        assert!(grad_check(quad, &p, 1e-5) < 1e-7);

        let constant = |p: &[f64]| (4.2, vec![0.0; p.len()]);
        assert!(grad_check(constant, &p, 1e-5) < 1e-12);
    }

    #[test]
    fn affine_backward_matches_finite_differences() {
        let x = t2(&[&[0.3, -1.1, 0.7], &[1.5, 0.2, -0.4]]);
        let w0 = [0.1, -0.2, 0.5, 0.7, -0.3, 0.9];
        let b0 = vec![0.05, -0.1];
        let target = [0.2, -0.5, 1.0, 0.3];
        let loss = |p: &[f64]| {
            let w = Tensor::new(vec![3, 2], p[..6].to_vec()).unwrap();
            let b = Tensor::vector(p[6..].to_vec()).unwrap();
            let y = affine_forward(&x, &w, &b).unwrap();
            let dy: Vec<f64> = y.data().iter().zip(&target).map(|(a, t)| 2.0 * (a - t)).collect();
            let l = mse_to_target(y.data(), &target).unwrap();
            let g = affine_backward(&x, &w, &Tensor::new(vec![2, 2], dy).unwrap()).unwrap();
            (l, [g.dw.into_data(), g.db.into_data()].concat())
        };
        let p: Vec<f64> = w0.iter().chain(&b0).cloned().collect();
        assert!(grad_check(loss, &p, 1e-5) < 1e-7);
    }

    proptest! {
        #[test]
        fn cross_entropy_gradient_and_bounds(
            logits in proptest::collection::vec(-8.0f64..8.0, 12),
            labels in proptest::collection::vec(0usize..4, 3),
        ) {
            let loss = |p: &[f64]| {
                let t = Tensor::new(vec![3, 4], p.to_vec()).unwrap();
                let (l, g) = softmax_cross_entropy(&t, &labels).unwrap();
                (l, g.into_data())
            };
            let (l, _) = loss(&logits);
            prop_assert!(l >= 0.0);
            prop_assert!(grad_check(loss, &logits, 1e-5) < 1e-5);
        }

        #[test]
        fn adam_is_deterministic(
            g in proptest::collection::vec(-5.0f64..5.0, 5),
            p in proptest::collection::vec(-5.0f64..5.0, 5),
        ) {
            let grads = Tensor::vector(g).unwrap();
            let params = Tensor::vector(p).unwrap();
            let a = adam_step(AdamState::new(5, 0.001), params.clone(), &grads).unwrap();
            let b = adam_step(AdamState::new(5, 0.001), params, &grads).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
