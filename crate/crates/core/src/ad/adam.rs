use super::param::ParamSet;
use super::tensor::Tensor;
use super::AdError;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            config,
            m: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            step: 0,
        }
    }

    pub fn for_params(config: AdamConfig, set: &ParamSet<T>) -> Self {
        let shapes: Vec<_> = set.params.iter().map(|p| p.value.shape()).collect();
        Self::new(config, &shapes)
    }

    /// One descent step on `values` along `grads`. Rejects the whole step,
    /// leaving values and moments untouched, if any gradient is non-finite.
    pub fn update(&mut self, values: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<(), AdError> {
        if values.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(AdError::Shape("adam: slot count".into()));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != self.m[i].shape() || values[i].shape() != self.m[i].shape() {
                return Err(AdError::Shape(format!("adam: slot {i} shape")));
            }
            if !g.is_finite() {
                return Err(AdError::NonFinite(format!("gradient slot {i}")));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let one = T::one();
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        for (i, g) in grads.iter().enumerate() {
            let m = &mut self.m[i].data;
            let v = &mut self.v[i].data;
            let x = &mut values[i].data;
            for j in 0..g.data.len() {
                let gj = g.data[j];
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                x[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Descent step using the gradients stored in the parameter set.
    pub fn step_params(&mut self, set: &mut ParamSet<T>) -> Result<(), AdError> {
        let grads: Vec<Tensor<T>> = set.params.iter().map(|p| p.grad.clone()).collect();
        let grefs: Vec<&Tensor<T>> = grads.iter().collect();
        let mut vals: Vec<&mut Tensor<T>> = set.params.iter_mut().map(|p| &mut p.value).collect();
        self.update(&mut vals, &grefs)
    }
}

/// Stand-alone Adam update over parallel slices.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut Adam<T>,
) -> Result<(), AdError> {
    state.update(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut x = Tensor::<f64>::row(vec![1.0, -2.0, 3.0]);
        let g = Tensor::zeros(1, 3);
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &[(1, 3)]);
        for _ in 0..5 {
            opt.update(&mut [&mut x], &[&g]).unwrap();
        }
        assert_eq!(x.data, vec![1.0, -2.0, 3.0]);
        assert_eq!(opt.step, 5);
    }

    #[test]
    fn first_step_is_lr_sign() {
        // At t=1, m_hat = g and v_hat = g^2, so the step is lr * g / (|g| + eps).
        let mut x = Tensor::<f64>::row(vec![0.0, 0.0, 0.0]);
        let g = Tensor::row(vec![0.3, -5.0, 1e-2]);
        let mut opt = Adam::new(AdamConfig::with_lr(0.01), &[(1, 3)]);
        opt.update(&mut [&mut x], &[&g]).unwrap();
        for (xi, gi) in x.data.iter().zip(&g.data) {
            let want = -0.01 * gi / (gi.abs() + 1e-8);
            assert!((xi - want).abs() < 1e-12, "{xi} vs {want}");
            assert!((xi.abs() - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn quadratic_converges() {
        let mut x = Tensor::<f64>::scalar(1.0);
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &[(1, 1)]);
        let mut trace = Vec::new();
        for _ in 0..100 {
            let g = Tensor::scalar(2.0 * x.item());
            opt.update(&mut [&mut x], &[&g]).unwrap();
            trace.push(x.item().abs());
        }
        // Scalar reference run: the first ten steps move by ~lr towards 0, after
        // which |x| oscillates with a shrinking envelope.
        for w in trace[..10].windows(2) {
            assert!(w[1] < w[0]);
        }
        let peaks: Vec<f64> = trace
            .windows(3)
            .filter(|w| w[1] > w[0] && w[1] > w[2])
            .map(|w| w[1])
            .collect();
        assert!(peaks.len() >= 3);
        for w in peaks.windows(2) {
            assert!(w[1] < w[0], "{peaks:?}");
        }
        assert!(trace[99] < 0.005, "{}", trace[99]);
    }

    #[test]
    fn non_finite_rejected() {
        let mut x = Tensor::<f64>::row(vec![1.0, 2.0]);
        let g = Tensor::row(vec![1.0, f64::NAN]);
        let mut opt = Adam::new(AdamConfig::default(), &[(1, 2)]);
        let err = opt.update(&mut [&mut x], &[&g]).unwrap_err();
        assert!(matches!(err, AdError::NonFinite(_)));
        assert_eq!(x.data, vec![1.0, 2.0]);
        assert_eq!(opt.step, 0);
    }
}
