//! The generated classifier: reshape a flat parameter vector into MLP layers,
//! run it, and score datasets.
//!
//! Layer `l` computes `s_l · (h W + b)` with the fixed scale
//! `s_l = sqrt(2 / fan_in)`, so unit-variance parameters behave like a
//! Kaiming-initialized network.

use crate::data::Split;
use crate::error::{Error, Result};
use crate::hypernet::{layer_scale, GeneratedParams, MainArch};
use crate::nn::{self, Tensor};

/// Per-layer `(W[d_in×d_out], b[d_out])`, laid out in the flat vector as
/// layer by layer, W row-major then b.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredParams {
    pub layers: Vec<(Tensor, Tensor)>,
}

pub fn assemble(flat: &GeneratedParams, arch: &MainArch) -> Result<LayeredParams> {
    if flat.d() != arch.param_count() {
        return Err(Error::Dimension(format!(
            "{} parameters for an architecture of {}",
            flat.d(),
            arch.param_count()
        )));
    }
    let mut off = 0;
    let mut layers = Vec::new();
    for (d_in, d_out) in arch.layers() {
        let w = flat.flat[off..off + d_in * d_out].to_vec();
        off += d_in * d_out;
        let b = flat.flat[off..off + d_out].to_vec();
        off += d_out;
        layers.push((Tensor::new(vec![d_in, d_out], w)?, Tensor::new(vec![d_out], b)?));
    }
    Ok(LayeredParams { layers })
}

impl LayeredParams {
    pub fn flatten(&self) -> GeneratedParams {
        let mut flat = Vec::new();
        for (w, b) in &self.layers {
            flat.extend_from_slice(w.data());
            flat.extend_from_slice(b.data());
        }
        GeneratedParams { flat }
    }
}

pub fn forward(params: &LayeredParams, x: &Tensor) -> Result<Tensor> {
    let last = params.layers.len() - 1;
    let mut h = x.clone();
    for (l, (w, b)) in params.layers.iter().enumerate() {
        let s = layer_scale(w.shape()[0]);
        let y = nn::affine_forward(&h, w, b)?;
        let shape = y.shape().to_vec();
        h = Tensor::new(shape, y.into_data().into_iter().map(|v| s * v).collect())?;
        if l < last {
            h = nn::relu(&h);
        }
    }
    Ok(h)
}

/// Logits straight from the flat parameter vector.
pub(crate) fn logits_flat(arch: &MainArch, theta: &[f64], x: &[f64], n: usize) -> Vec<f64> {
    forward_cached(arch, theta, x, n).pop().expect("at least one layer")
}

fn forward_cached(arch: &MainArch, theta: &[f64], x: &[f64], n: usize) -> Vec<Vec<f64>> {
    let n_layers = arch.dims.len() - 1;
    let mut acts = vec![x.to_vec()];
    let mut off = 0;
    for (l, (d_in, d_out)) in arch.layers().enumerate() {
        let w = &theta[off..off + d_in * d_out];
        let b = &theta[off + d_in * d_out..off + d_in * d_out + d_out];
        off += d_in * d_out + d_out;
        let mut y = nn::affine_rows(&acts[l], n, w, b);
        let s = layer_scale(d_in);
        y.iter_mut().for_each(|v| *v *= s);
        if l + 1 < n_layers {
            nn::relu_in_place(&mut y);
        }
        acts.push(y);
    }
    acts
}

/// Mean cross-entropy on a batch and its gradient w.r.t. the flat parameters.
pub fn loss_and_grad(
    arch: &MainArch,
    theta: &[f64],
    x: &[f64],
    labels: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let n = labels.len();
    if theta.len() != arch.param_count() || x.len() != n * arch.input_dim() {
        return Err(Error::Dimension("main network batch shapes".into()));
    }
    let acts = forward_cached(arch, theta, x, n);
    let classes = arch.classes();
    let mut dy = vec![0.0; n * classes];
    let losses = nn::cross_entropy_rows(&acts[acts.len() - 1], classes, labels, Some(&mut dy))?;
    let loss = losses.iter().sum::<f64>() / n as f64;

    let mut grad = vec![0.0; theta.len()];
    let mut offsets = Vec::new();
    let mut off = 0;
    for (d_in, d_out) in arch.layers() {
        offsets.push(off);
        off += d_in * d_out + d_out;
    }
    let layers: Vec<(usize, usize)> = arch.layers().collect();
    for l in (0..layers.len()).rev() {
        let (d_in, d_out) = layers[l];
        let start = offsets[l];
        let w = &theta[start..start + d_in * d_out];
        let (gw, rest) = grad[start..].split_at_mut(d_in * d_out);
        let gb = &mut rest[..d_out];
        let s = layer_scale(d_in);
        dy.iter_mut().for_each(|v| *v *= s);
        let dx = nn::affine_rows_backward(&acts[l], n, w, &dy, gw, gb, l > 0);
        if let Some(mut dx) = dx {
            nn::relu_backward_in_place(&acts[l], &mut dx);
            dy = dx;
        }
    }
    Ok((loss, grad))
}

/// Index of the largest logit per row; ties go to the lowest class index.
pub fn argmax_rows(logits: &[f64], classes: usize) -> Vec<usize> {
    logits
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

const EVAL_BATCH: usize = 500;

/// Test accuracy in percent.
pub fn evaluate_flat(arch: &MainArch, theta: &[f64], split: &Split) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if split.dim != arch.input_dim() || theta.len() != arch.param_count() {
        return Err(Error::Dimension("evaluation shapes".into()));
    }
    let mut correct = 0usize;
    for start in (0..split.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(split.len());
        let x = &split.x[start * split.dim..end * split.dim];
        let logits = logits_flat(arch, theta, x, end - start);
        correct += argmax_rows(&logits, arch.classes())
            .iter()
            .zip(&split.y[start..end])
            .filter(|(p, y)| p == y)
            .count();
    }
    Ok(100.0 * correct as f64 / split.len() as f64)
}

pub fn evaluate(params: &LayeredParams, arch: &MainArch, split: &Split) -> Result<f64> {
    evaluate_flat(arch, &params.flatten().flat, split)
}

/// Cross-entropy of every sample under the given parameters.
pub fn per_sample_losses_flat(arch: &MainArch, theta: &[f64], split: &Split) -> Result<Vec<f64>> {
    if split.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if split.dim != arch.input_dim() || theta.len() != arch.param_count() {
        return Err(Error::Dimension("loss shapes".into()));
    }
    let mut out = Vec::with_capacity(split.len());
    for start in (0..split.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(split.len());
        let x = &split.x[start * split.dim..end * split.dim];
        let logits = logits_flat(arch, theta, x, end - start);
        out.extend(nn::cross_entropy_rows(&logits, arch.classes(), &split.y[start..end], None)?);
    }
    Ok(out)
}

pub fn per_sample_losses(params: &LayeredParams, arch: &MainArch, split: &Split) -> Result<Vec<f64>> {
    per_sample_losses_flat(arch, &params.flatten().flat, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn arch(dims: &[usize]) -> MainArch {
        MainArch::new(dims.to_vec()).unwrap()
    }

    fn split(x: Vec<f64>, y: Vec<usize>, dim: usize) -> Split {
        Split { x, y, dim }
    }

    #[test]
    fn assemble_layout_rule() {
        let p = assemble(&GeneratedParams { flat: vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0] }, &arch(&[2, 2]))
            .unwrap();
        assert_eq!(p.layers[0].0, Tensor::identity(2).unwrap());
        assert_eq!(p.layers[0].1.data(), &[0.0, 0.0]);
    }

    #[test]
    fn assemble_wrong_length() {
        let err = assemble(&GeneratedParams { flat: vec![0.0; 5] }, &arch(&[2, 2])).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let a = arch(&[3, 4, 5]);
        let p = assemble(&GeneratedParams { flat: vec![0.0; a.param_count()] }, &a).unwrap();
        let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.1, 0.0]).unwrap();
        assert!(forward(&p, &x).unwrap().data().iter().all(|&v| v == 0.0));
        let losses = per_sample_losses(&p, &a, &split(x.data().to_vec(), vec![1, 4], 3)).unwrap();
        for l in losses {
            assert!((l - 5f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn single_layer_is_affine() {
        let a = arch(&[2, 3]);
        let flat = vec![0.5, -1.0, 2.0, 0.25, 0.0, 1.0, 0.1, 0.2, 0.3];
        let p = assemble(&GeneratedParams { flat }, &a).unwrap();
        let x = Tensor::new(vec![1, 2], vec![2.0, -4.0]).unwrap();
        let expected = nn::affine_forward(&x, &p.layers[0].0, &p.layers[0].1).unwrap();
        assert_eq!(forward(&p, &x).unwrap(), expected);
    }

    #[test]
    fn toy_network_hand_computed() {
        // [2, 2, 1], so both layer scales are sqrt(2 / 2) = 1.
        // W1 = [[1, -1], [0, 0]], b1 = [0, 0.5], w2 = [2, 3], b2 = [-1].
        // x = (2, 7): h = relu([2, -1.5]) = [2, 0]; y = 4 - 1 = 3.
        let a = arch(&[2, 2, 1]);
        let flat = vec![1.0, -1.0, 0.0, 0.0, 0.0, 0.5, 2.0, 3.0, -1.0];
        let p = assemble(&GeneratedParams { flat }, &a).unwrap();
        let y = forward(&p, &Tensor::new(vec![1, 2], vec![2.0, 7.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[3.0]);
        // x = (-1, 0): h = relu([-1, 1.5]) = [0, 1.5]; y = 4.5 - 1 = 3.5.
        let y = forward(&p, &Tensor::new(vec![1, 2], vec![-1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[3.5]);
    }

    #[test]
    fn layer_scale_follows_fan_in() {
        // A single [8, 1] layer with unit weights on x = 1: 8 · sqrt(2 / 8) = 4.
        let a = arch(&[8, 1]);
        let mut flat = vec![1.0; 8];
        flat.push(0.0);
        let p = assemble(&GeneratedParams { flat: flat.clone() }, &a).unwrap();
        let x = Tensor::new(vec![1, 8], vec![1.0; 8]).unwrap();
        assert_eq!(forward(&p, &x).unwrap().data(), &[4.0]);
        assert_eq!(logits_flat(&a, &flat, x.data(), 1), vec![4.0]);
    }

    #[test]
    fn evaluate_degenerate_and_tie_break() {
        let a = arch(&[1, 2]);
        // Logit for class 1 = x, class 0 = 0.
        let flat = vec![0.0, 1.0, 0.0, 0.0];
        let p = assemble(&GeneratedParams { flat }, &a).unwrap();
        assert_eq!(evaluate(&p, &a, &split(vec![1.0], vec![1], 1)).unwrap(), 100.0);

        // Zero network on a balanced 4-class set: every prediction is class 0.
        let a = arch(&[2, 4]);
        let zero = assemble(&GeneratedParams { flat: vec![0.0; a.param_count()] }, &a).unwrap();
        let y = vec![2, 0, 3, 1, 1, 3, 0, 2];
        let s = split(vec![0.3; 16], y, 2);
        assert_eq!(evaluate(&zero, &a, &s).unwrap(), 25.0);
    }

    #[test]
    fn evaluate_empty_dataset() {
        let a = arch(&[1, 2]);
        let p = assemble(&GeneratedParams { flat: vec![0.0; 4] }, &a).unwrap();
        assert!(matches!(evaluate(&p, &a, &split(vec![], vec![], 1)), Err(Error::EmptyDataset)));
        assert!(per_sample_losses(&p, &a, &split(vec![], vec![], 1)).is_err());
    }

    #[test]
    fn confident_model_has_near_zero_loss() {
        let a = arch(&[1, 2]);
        let p = assemble(&GeneratedParams { flat: vec![0.0, 0.0, 500.0, -500.0] }, &a).unwrap();
        let losses = per_sample_losses(&p, &a, &split(vec![1.0, -2.0], vec![0, 0], 1)).unwrap();
        assert!(losses.iter().all(|&l| l < 1e-12));
    }

    #[test]
    fn per_sample_mean_matches_batch_loss() {
        let a = arch(&[4, 6, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta: Vec<f64> = (0..a.param_count()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let x: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
        let y = vec![0, 2, 1, 1, 0];
        let s = split(x.clone(), y.clone(), 4);
        let per = per_sample_losses_flat(&a, &theta, &s).unwrap();
        let (mean, _) = loss_and_grad(&a, &theta, &x, &y).unwrap();
        assert!((per.iter().sum::<f64>() / 5.0 - mean).abs() < 1e-12);
    }

    #[test]
    fn random_network_is_near_chance() {
        // Balanced 10-class set of unit-normal inputs, θ ~ N(0, I); average
        // over seeds should sit near 10%.
        let a = arch(&[20, 30, 10]);
        let mut accs = Vec::new();
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let theta: Vec<f64> =
                (0..a.param_count()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let x: Vec<f64> = (0..1000 * 20).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let y: Vec<usize> = (0..1000).map(|i| i % 10).collect();
            accs.push(evaluate_flat(&a, &theta, &split(x, y, 20)).unwrap());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 10.0).abs() < 3.0, "{accs:?}");
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let a = arch(&[3, 5, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let theta: Vec<f64> = (0..a.param_count()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let x: Vec<f64> = (0..12).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let y = vec![3, 0, 1, 2];
        let err = grad_check(|p| loss_and_grad(&a, p, &x, &y).unwrap(), &theta, 1e-5);
        assert!(err < 1e-5, "{err}");
    }

    proptest! {
        #[test]
        fn flatten_assemble_round_trip(flat in proptest::collection::vec(-3.0f64..3.0, 23)) {
            // [4, 3, 2]: 12 + 3 + 6 + 2 = 23 parameters.
            let a = arch(&[4, 3, 2]);
            let g = GeneratedParams { flat };
            let layered = assemble(&g, &a).unwrap();
            prop_assert_eq!(layered.flatten(), g);
            prop_assert_eq!(assemble(&layered.flatten(), &a).unwrap(), layered);
        }

        #[test]
        fn evaluate_is_permutation_invariant(seed in 0u64..1000) {
            let a = arch(&[3, 4, 3]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let theta: Vec<f64> = (0..a.param_count()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let x: Vec<f64> = (0..30).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let y: Vec<usize> = (0..10).map(|_| rng.random_range(0..3)).collect();
            let s = split(x.clone(), y.clone(), 3);
            let acc = evaluate_flat(&a, &theta, &s).unwrap();
            prop_assert!((0.0..=100.0).contains(&acc));
            let order: Vec<usize> = (0..10).rev().collect();
            let rev = Split {
                x: order.iter().flat_map(|&i| x[i * 3..i * 3 + 3].to_vec()).collect(),
                y: order.iter().map(|&i| y[i]).collect(),
                dim: 3,
            };
            prop_assert_eq!(evaluate_flat(&a, &theta, &rev).unwrap(), acc);
        }
    }
}
