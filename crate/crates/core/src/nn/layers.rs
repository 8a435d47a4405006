use rand::Rng;

use super::{Mode, NnError, Result, Scalar, Tensor};

/// Valid cross-correlation of a `len × height` input with a `width × height`
/// filter that spans the full height, sliding along the first axis only.
///
/// Learned filters absorb the kernel flip of a true convolution, so the
/// two are interchangeable here.
pub fn conv_full_height<T: Scalar>(input: &[T], height: usize, filter: &[T], bias: T) -> Result<Vec<T>> {
    if height == 0 || !input.len().is_multiple_of(height) || !filter.len().is_multiple_of(height) || filter.is_empty() {
        return Err(NnError::ShapeMismatch(format!(
            "input {} and filter {} values are not multiples of height {height}",
            input.len(),
            filter.len()
        )));
    }
    let len = input.len() / height;
    let width = filter.len() / height;
    if width > len {
        return Err(NnError::FilterWiderThanInput { width, len });
    }
    // Rows t..t+width of a row-major matrix are contiguous.
    Ok((0..=len - width)
        .map(|t| {
            let window = &input[t * height..(t + width) * height];
            window.iter().zip(filter).fold(bias, |acc, (&x, &w)| acc + x * w)
        })
        .collect())
}

/// Accumulates gradients of [`conv_full_height`]. `d_input` may be `None`
/// when the input gradient is not needed.
pub fn conv_full_height_backward<T: Scalar>(
    input: &[T],
    height: usize,
    filter: &[T],
    d_out: &[T],
    d_filter: &mut [T],
    d_bias: &mut T,
    mut d_input: Option<&mut [T]>,
) {
    let span = filter.len();
    for (t, &g) in d_out.iter().enumerate() {
        if g == T::zero() {
            continue;
        }
        *d_bias = *d_bias + g;
        let start = t * height;
        let window = &input[start..start + span];
        for (df, &x) in d_filter.iter_mut().zip(window) {
            *df = *df + g * x;
        }
        if let Some(d_in) = d_input.as_deref_mut() {
            for (di, &w) in d_in[start..start + span].iter_mut().zip(filter) {
                *di = *di + g * w;
            }
        }
    }
}

/// Non-overlapping max pooling along time; the last window may be short.
pub fn max_pool_time<T: Scalar>(v: &[T], pool: usize) -> Vec<T> {
    max_pool_time_argmax(v, pool).into_iter().map(|i| v[i]).collect()
}

/// Index of the maximum of each pooling window (first one on ties).
pub fn max_pool_time_argmax<T: Scalar>(v: &[T], pool: usize) -> Vec<usize> {
    assert!(pool >= 1, "pool size must be positive");
    v.chunks(pool)
        .enumerate()
        .map(|(k, chunk)| {
            let mut best = 0;
            for (i, &x) in chunk.iter().enumerate() {
                if x > chunk[best] {
                    best = i;
                }
            }
            k * pool + best
        })
        .collect()
}

pub fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    ReLU,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    /// out × in
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub activation: Activation,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, activation: Activation) -> Result<Self> {
        let ok = weight.shape().len() == 2 && bias.shape() == [weight.shape()[0]];
        if !ok {
            return Err(NnError::ShapeMismatch(format!(
                "weight {:?} incompatible with bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self { weight, bias, activation })
    }

    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Self { weight: Tensor::zeros(&[output, input]), bias: Tensor::zeros(&[output]), activation }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// `W·x + b` before the activation.
pub fn dense_pre_activation<T: Scalar>(x: &[T], layer: &DenseLayer<T>) -> Result<Vec<T>> {
    let (out, inp) = (layer.output_dim(), layer.input_dim());
    if x.len() != inp {
        return Err(NnError::ShapeMismatch(format!("layer expects {inp} inputs, got {}", x.len())));
    }
    let w = layer.weight.data();
    Ok((0..out)
        .map(|o| {
            w[o * inp..(o + 1) * inp]
                .iter()
                .zip(x)
                .fold(layer.bias.data()[o], |acc, (&a, &b)| acc + a * b)
        })
        .collect())
}

pub fn dense_forward<T: Scalar>(x: &[T], layer: &DenseLayer<T>) -> Result<Vec<T>> {
    let mut z = dense_pre_activation(x, layer)?;
    if layer.activation == Activation::ReLU {
        z.iter_mut().for_each(|v| *v = relu(*v));
    }
    Ok(z)
}

/// Given the layer input, its pre-activation and the gradient w.r.t. the
/// layer output, accumulates weight/bias gradients into `grad` and returns
/// the gradient w.r.t. the input.
pub fn dense_backward<T: Scalar>(
    x: &[T],
    pre: &[T],
    d_out: &[T],
    layer: &DenseLayer<T>,
    grad: &mut DenseLayer<T>,
) -> Vec<T> {
    let inp = layer.input_dim();
    let mut d_x = vec![T::zero(); inp];
    let w = layer.weight.data();
    for (o, (&g, &z)) in d_out.iter().zip(pre).enumerate() {
        let g = match layer.activation {
            Activation::ReLU if z <= T::zero() => continue,
            _ => g,
        };
        if g == T::zero() {
            continue;
        }
        grad.bias.data_mut()[o] = grad.bias.data()[o] + g;
        let gw = &mut grad.weight.data_mut()[o * inp..(o + 1) * inp];
        for (dw, &xi) in gw.iter_mut().zip(x) {
            *dw = *dw + g * xi;
        }
        for (dx, &wi) in d_x.iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
            *dx = *dx + g * wi;
        }
    }
    d_x
}

/// Softmax with the maximum subtracted before exponentiation.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Probabilities and `-ln p[target]`, computed through log-sum-exp so the
/// loss stays finite for extreme logits.
pub fn softmax_xent<T: Scalar>(logits: &[T], target: usize) -> (Vec<T>, T) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = logits.iter().map(|&z| (z - max).exp()).sum();
    let log_total = total.ln();
    let probs = logits.iter().map(|&z| (z - max).exp() / total).collect();
    let loss = log_total - (logits[target] - max);
    (probs, loss)
}

/// Inverted-dropout multipliers: 0 with probability `rate`, else 1/(1-rate).
pub fn dropout_mask<T: Scalar, R: Rng>(len: usize, rate: f64, rng: &mut R) -> Vec<T> {
    assert!((0.0..1.0).contains(&rate), "dropout rate must lie in [0, 1)");
    let keep = T::of(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rate > 0.0 && rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

pub fn dropout<T: Scalar, R: Rng>(x: &[T], rate: f64, mode: Mode, rng: &mut R) -> Vec<T> {
    match mode {
        Mode::Eval => x.to_vec(),
        Mode::Train => {
            let mask = dropout_mask::<T, R>(x.len(), rate, rng);
            x.iter().zip(mask).map(|(&v, m)| v * m).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_examples() {
        let input = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        assert_eq!(conv_full_height(&input, 2, &[1.0, 1.0], 0.0).unwrap(), vec![5.0, 7.0, 9.0]);
        assert_eq!(conv_full_height(&input, 2, &[1.0; 4], 0.0).unwrap(), vec![12.0, 16.0]);
        assert_eq!(conv_full_height(&input, 2, &[0.0; 4], 0.0).unwrap(), vec![0.0, 0.0]);
        assert_eq!(conv_full_height(&input, 2, &[0.0; 2], 1.5).unwrap(), vec![1.5; 3]);
    }

    #[test]
    fn conv_errors() {
        let input = [1.0f64; 6];
        assert_eq!(
            conv_full_height(&input, 2, &[1.0; 8], 0.0),
            Err(NnError::FilterWiderThanInput { width: 4, len: 3 })
        );
        assert!(matches!(conv_full_height(&input, 4, &[1.0; 4], 0.0), Err(NnError::ShapeMismatch(_))));
    }

    #[test]
    fn pool_examples() {
        assert_eq!(max_pool_time(&[1.0, 3.0, 2.0, 5.0], 2), vec![3.0, 5.0]);
        assert_eq!(max_pool_time(&[1.0, 3.0, 2.0], 50), vec![3.0]);
        assert_eq!(max_pool_time(&[7.0], 1), vec![7.0]);
        assert_eq!(max_pool_time(&[1.0, 2.0, 3.0, 4.0, 0.0], 2), vec![2.0, 4.0, 0.0]);
        assert_eq!(max_pool_time_argmax(&[2.0, 2.0, 1.0], 3), vec![0]);
    }

    #[test]
    fn dense_examples() {
        let id = DenseLayer::new(
            Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            Tensor::zeros(&[2]),
            Activation::ReLU,
        )
        .unwrap();
        assert_eq!(dense_forward(&[-1.0, 2.0], &id).unwrap(), vec![0.0, 2.0]);

        let c = DenseLayer::new(Tensor::zeros(&[1, 2]), Tensor::from_vec(&[1], vec![3.0]).unwrap(), Activation::Identity)
            .unwrap();
        assert_eq!(dense_forward(&[5.0, -5.0], &c).unwrap(), vec![3.0]);

        let wide = DenseLayer::<f64>::zeros(3, 2, Activation::Identity);
        assert!(matches!(dense_forward(&[1.0, 2.0], &wide), Err(NnError::ShapeMismatch(_))));
        assert!(DenseLayer::new(Tensor::<f64>::zeros(&[2, 3]), Tensor::zeros(&[3]), Activation::ReLU).is_err());
    }

    #[test]
    fn softmax_examples() {
        let (p, loss) = softmax_xent(&[0.0f64, 0.0, 0.0], 1);
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
        assert!((loss - 3f64.ln()).abs() < 1e-12);

        let (p, loss) = softmax_xent(&[1000.0f32, 0.0, 0.0], 0);
        assert!(loss.is_finite() && loss.abs() < 1e-6);
        assert!((p[0] - 1.0).abs() < 1e-6);

        let (_, loss) = softmax_xent(&[1000.0f32, 0.0, 0.0], 1);
        assert!((loss - 1000.0).abs() < 1e-3);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let logits: Vec<f32> = (0..3).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let p = softmax(&logits);
            let s: f32 = p.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn softmax_gradient_closed_form() {
        // d loss / d logits = probs - onehot, checked by central differences.
        let logits = [0.3f64, -1.2, 2.0];
        let (p, _) = softmax_xent(&logits, 2);
        for k in 0..3 {
            let mut up = logits;
            let mut down = logits;
            up[k] += 1e-6;
            down[k] -= 1e-6;
            let fd = (softmax_xent(&up, 2).1 - softmax_xent(&down, 2).1) / 2e-6;
            let analytic = p[k] - if k == 2 { 1.0 } else { 0.0 };
            assert!((fd - analytic).abs() < 1e-8);
        }
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = vec![1.5f32, -2.0, 3.0];
        assert_eq!(dropout(&x, 0.5, Mode::Eval, &mut rng), x);
        assert_eq!(dropout(&x, 0.0, Mode::Train, &mut rng), x);

        let ones = vec![1.0f64; 100_000];
        let out = dropout(&ones, 0.5, Mode::Train, &mut rng);
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        assert!((0.98..=1.02).contains(&mean), "mean {mean}");
        assert!(out.iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn dense_backward_matches_manual() {
        let layer = DenseLayer::new(
            Tensor::from_vec(&[2, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap(),
            Tensor::from_vec(&[2], vec![0.0, -10.0]).unwrap(),
            Activation::ReLU,
        )
        .unwrap();
        let x = [2.0, 1.0];
        let pre = dense_pre_activation(&x, &layer).unwrap();
        assert_eq!(pre, vec![1.0, -7.0]);
        let mut grad = DenseLayer::zeros(2, 2, Activation::ReLU);
        let dx = dense_backward(&x, &pre, &[1.0, 1.0], &layer, &mut grad);
        // Second unit is inactive, so only the first row contributes.
        assert_eq!(dx, vec![1.0, -1.0]);
        assert_eq!(grad.weight.data(), &[2.0, 1.0, 0.0, 0.0]);
        assert_eq!(grad.bias.data(), &[1.0, 0.0]);
    }
}
