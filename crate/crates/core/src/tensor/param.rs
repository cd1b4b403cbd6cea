use super::tape::Gradients;
use super::{Scalar, Tensor};

/// Identifies a parameter binding on a tape: `group` is an owner (a model
/// module), `index` the parameter's slot within that owner's store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub group: u32,
    pub index: u32,
}

#[derive(Clone, Debug)]
pub struct Parameter<S: Scalar = f32> {
    pub name: String,
    pub value: Tensor<S>,
    pub requires_grad: bool,
    pub grad: Option<Tensor<S>>,
    pub adam_m: Tensor<S>,
    pub adam_v: Tensor<S>,
    pub step: u64,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(name: impl Into<String>, value: Tensor<S>) -> Self {
        let shape = value.shape().to_vec();
        Parameter {
            name: name.into(),
            value,
            requires_grad: true,
            grad: None,
            adam_m: Tensor::zeros(shape.clone()),
            adam_v: Tensor::zeros(shape),
            step: 0,
        }
    }

    /// `grad += g`; a frozen parameter ignores the call.
    pub fn accumulate_grad(&mut self, g: &[S]) {
        if !self.requires_grad {
            return;
        }
        let grad = self
            .grad
            .get_or_insert_with(|| Tensor::zeros(self.value.shape().to_vec()));
        for (a, &b) in grad.data_mut().iter_mut().zip(g) {
            *a = *a + b;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// An ordered, name-unique collection of parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S: Scalar = f32> {
    params: Vec<Parameter<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    /// Append a parameter and return its slot. Panics on a duplicate name.
    pub fn push(&mut self, p: Parameter<S>) -> usize {
        assert!(
            self.params.iter().all(|q| q.name != p.name),
            "duplicate parameter name {}",
            p.name
        );
        self.params.push(p);
        self.params.len() - 1
    }

    pub fn get(&self, slot: usize) -> &Parameter<S> {
        &self.params[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Parameter<S> {
        &mut self.params[slot]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<S>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.requires_grad)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        for p in &mut self.params {
            p.requires_grad = on;
            if !on {
                p.grad = None;
            }
        }
    }

    /// Add every gradient the tape produced for keys `(group, slot)`.
    pub fn accumulate(&mut self, grads: &Gradients<S>, group: u32) {
        for (i, p) in self.params.iter_mut().enumerate() {
            let key = ParamKey {
                group,
                index: i as u32,
            };
            if let Some(g) = grads.param(key) {
                p.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over every trainable parameter holding a gradient,
/// then zero all gradients.
pub fn adam_step<'a, S: Scalar>(
    params: impl IntoIterator<Item = &'a mut Parameter<S>>,
    cfg: AdamConfig,
) {
    let (b1, b2) = (S::c(cfg.beta1), S::c(cfg.beta2));
    let one = S::one();
    for p in params {
        let Some(grad) = p.grad.take() else { continue };
        if !p.requires_grad {
            continue;
        }
        p.step += 1;
        let bc1 = one - b1.powi(p.step as i32);
        let bc2 = one - b2.powi(p.step as i32);
        let (lr, eps) = (S::c(cfg.lr), S::c(cfg.eps));
        let m = p.adam_m.data_mut();
        let v = p.adam_v.data_mut();
        let w = p.value.data_mut();
        for i in 0..w.len() {
            let g = grad.data()[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] = w[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Parameter::new("w", Tensor::<f64>::from_fn(vec![3], |i| i as f64));
        let before = p.value.clone();
        p.accumulate_grad(&[0.0, 0.0, 0.0]);
        adam_step([&mut p], AdamConfig::default());
        assert_eq!(p.value, before);
        assert!(p.grad.is_none());
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Parameter::new("w", Tensor::<f64>::scalar(0.5));
        p.accumulate_grad(&[1.0]);
        adam_step([&mut p], AdamConfig::default());
        let delta = p.value.item() - 0.5;
        assert!((delta + 1e-3).abs() < 1e-10, "delta {delta}");
    }

    #[test]
    fn frozen_parameters_ignore_gradients() {
        let mut p = Parameter::new("w", Tensor::<f64>::scalar(0.5));
        p.requires_grad = false;
        p.accumulate_grad(&[1.0]);
        assert!(p.grad.is_none());
        adam_step([&mut p], AdamConfig::default());
        assert_eq!(p.value.item(), 0.5);
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let mut p = Parameter::new("w", Tensor::<f64>::zeros(vec![2]));
        p.accumulate_grad(&[1.0, 2.0]);
        p.accumulate_grad(&[1.0, 2.0]);
        assert_eq!(p.grad.as_ref().unwrap().data(), &[2.0, 4.0]);
        p.zero_grad();
        assert!(p.grad.is_none());
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn names_are_unique() {
        let mut store = ParamStore::<f32>::new();
        store.push(Parameter::new("a", Tensor::zeros(vec![1])));
        store.push(Parameter::new("a", Tensor::zeros(vec![1])));
    }
}
