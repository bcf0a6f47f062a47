use super::ParameterStore;

/// Adaptive-moment optimizer settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

/// One bias-corrected Adam update.
///
/// Only parameters that received a gradient since the previous step move;
/// the others keep their values and moments. Gradients are zeroed and the
/// store's step counter is incremented.
pub fn adam_step(store: &mut ParameterStore, cfg: &AdamConfig) {
    store.apply_adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Array, Tape};

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParameterStore::new();
        let id = store.add("w", Array::scalar(0.0)).unwrap();
        store.accumulate_grad(id, &[1.0]);
        adam_step(&mut store, &AdamConfig::new(0.1));
        assert!((store.value(id).item() + 0.1).abs() < 1e-8);
        assert_eq!(store.grad(id).item(), 0.0);
        assert_eq!(store.step(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut store = ParameterStore::new();
        let id = store.add("w", Array::from_vec(vec![1.0, 2.0])).unwrap();
        store.accumulate_grad(id, &[0.0, 0.0]);
        adam_step(&mut store, &AdamConfig::new(0.1));
        assert_eq!(store.value(id).data(), &[1.0, 2.0]);
    }

    #[test]
    fn untouched_parameters_keep_value_despite_momentum() {
        let mut store = ParameterStore::new();
        let a = store.add("a", Array::scalar(0.0)).unwrap();
        let b = store.add("b", Array::scalar(0.0)).unwrap();
        store.accumulate_grad(a, &[1.0]);
        store.accumulate_grad(b, &[1.0]);
        adam_step(&mut store, &AdamConfig::new(0.1));
        let before = store.value(b).item();
        store.accumulate_grad(a, &[1.0]);
        adam_step(&mut store, &AdamConfig::new(0.1));
        assert_eq!(store.value(b).item(), before);
        assert!(store.value(a).item() < before);
    }

    #[test]
    fn converges_on_quadratic() {
        // f(w) = (w - 3)^2, 200 steps at lr 0.1.
        let mut store = ParameterStore::new();
        let id = store.add("w", Array::scalar(0.0)).unwrap();
        let cfg = AdamConfig::new(0.1);
        for _ in 0..200 {
            let mut tape = Tape::new();
            let w = tape.param(&store, id);
            let target = tape.constant(Array::scalar(3.0));
            let d = tape.sub(w, target).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let loss = tape.sum(sq);
            tape.backward(loss, &mut store).unwrap();
            adam_step(&mut store, &cfg);
        }
        assert!((store.value(id).item() - 3.0).abs() < 0.05);
    }
}
