use super::{Scalar, Tensor};

/// Something whose loss on a sample can be differentiated w.r.t. its
/// parameters. Used by [`grad_check`].
pub trait Differentiable<T: Scalar> {
    type Sample;

    /// Parameter tensors in a fixed order, with names.
    fn parameters(&self) -> Vec<(String, &Tensor<T>)>;

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn loss(&self, sample: &Self::Sample) -> T;

    /// Loss and gradients, gradients in [`parameters`](Self::parameters) order.
    fn loss_and_grads(&self, sample: &Self::Sample) -> (T, Vec<Tensor<T>>);

    /// Discrete state of every non-smooth op (ReLU sign, pooling argmax).
    /// A perturbation that changes it has crossed a kink.
    fn kink_signature(&self, _sample: &Self::Sample) -> Vec<u32> {
        Vec::new()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a kink.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.entries.iter().map(|e| e.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.entries.iter().map(|e| e.skipped).sum()
    }
}

/// Compares analytic gradients with central differences of step `eps`,
/// coordinate by coordinate. Relative error is
/// `|g_a - g_n| / max(|g_a|, |g_n|, 1e-8)`.
pub fn grad_check<T: Scalar, M: Differentiable<T>>(model: &mut M, sample: &M::Sample, eps: f64) -> GradReport {
    let (_, analytic) = model.loss_and_grads(sample);
    let base_sig = model.kink_signature(sample);
    let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
    let h = T::of(eps);
    let mut report = GradReport::default();
    for (ti, name) in names.into_iter().enumerate() {
        let len = analytic[ti].len();
        let mut entry = GradEntry { name, max_rel_error: 0.0, checked: 0, skipped: 0 };
        for k in 0..len {
            let original = model.parameters_mut()[ti].data()[k];
            model.parameters_mut()[ti].data_mut()[k] = original + h;
            let plus = model.loss(sample);
            let sig_plus = model.kink_signature(sample);
            model.parameters_mut()[ti].data_mut()[k] = original - h;
            let minus = model.loss(sample);
            let sig_minus = model.kink_signature(sample);
            model.parameters_mut()[ti].data_mut()[k] = original;
            if sig_plus != base_sig || sig_minus != base_sig {
                entry.skipped += 1;
                continue;
            }
            let numeric = ((plus - minus) / (h + h)).to_f64().unwrap_or(f64::NAN);
            let exact = analytic[ti].data()[k].to_f64().unwrap_or(f64::NAN);
            let denom = exact.abs().max(numeric.abs()).max(1e-8);
            let rel = (exact - numeric).abs() / denom;
            entry.max_rel_error = entry.max_rel_error.max(rel);
            entry.checked += 1;
        }
        report.entries.push(entry);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{dense_backward, dense_pre_activation, fan_balanced_uniform, softmax_xent, Activation, DenseLayer};
    use rand::SeedableRng;

    struct DenseSoftmax {
        layer: DenseLayer<f64>,
    }

    impl Differentiable<f64> for DenseSoftmax {
        type Sample = (Vec<f64>, usize);

        fn parameters(&self) -> Vec<(String, &Tensor<f64>)> {
            vec![("weight".into(), &self.layer.weight), ("bias".into(), &self.layer.bias)]
        }

        fn parameters_mut(&mut self) -> Vec<&mut Tensor<f64>> {
            vec![&mut self.layer.weight, &mut self.layer.bias]
        }

        fn loss(&self, (x, y): &Self::Sample) -> f64 {
            let z = dense_pre_activation(x, &self.layer).unwrap();
            softmax_xent(&z, *y).1
        }

        fn loss_and_grads(&self, (x, y): &Self::Sample) -> (f64, Vec<Tensor<f64>>) {
            let z = dense_pre_activation(x, &self.layer).unwrap();
            let (p, loss) = softmax_xent(&z, *y);
            let d: Vec<f64> = p.iter().enumerate().map(|(k, &v)| v - if k == *y { 1.0 } else { 0.0 }).collect();
            let mut g = DenseLayer::zeros(self.layer.input_dim(), 3, Activation::Identity);
            dense_backward(x, &z, &d, &self.layer, &mut g);
            (loss, vec![g.weight, g.bias])
        }
    }

    #[test]
    fn single_dense_layer_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut model = DenseSoftmax {
            layer: DenseLayer::new(
                fan_balanced_uniform(&[3, 4], 4, 3, &mut rng),
                fan_balanced_uniform(&[3], 4, 3, &mut rng),
                Activation::Identity,
            )
            .unwrap(),
        };
        let sample = (vec![0.5, -1.0, 2.0, 0.25], 1);
        let report = grad_check(&mut model, &sample, 1e-4);
        assert_eq!(report.checked(), 15);
        assert_eq!(report.skipped(), 0);
        assert!(report.max_rel_error() < 1e-6, "{report:?}");
    }

    #[test]
    fn degenerate_zero_loss_has_zero_gradient() {
        // A saturated one-class model: all logit gaps are huge, loss underflows to 0.
        let mut layer = DenseLayer::<f64>::zeros(1, 3, Activation::Identity);
        layer.bias.data_mut().copy_from_slice(&[1e4, 0.0, 0.0]);
        let model = DenseSoftmax { layer };
        let (loss, grads) = model.loss_and_grads(&(vec![0.0], 0));
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
    }
}
