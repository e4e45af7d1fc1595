//! Adaptive moment optimizer with bias correction.

use std::collections::HashMap;

use super::param::Parameter;

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam. Defaults: lr 1e-3, betas (0.9, 0.999), eps 1e-8.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    slots: HashMap<u64, Slot>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            slots: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over the given parameters. Non-trainable parameters are
    /// skipped; all listed parameters have their gradients cleared after
    /// the update.
    pub fn step(&mut self, params: &[Parameter]) {
        assert!(
            params.iter().any(|p| p.grad_seen()),
            "optimizer_step: no gradient has been populated; call backward first"
        );
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in params {
            if !p.trainable() {
                continue;
            }
            let g = p.grad();
            let slot = self.slots.entry(p.id()).or_insert_with(|| Slot {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            for i in 0..g.len() {
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g[i];
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            }
            let (lr, eps) = (self.lr, self.eps);
            let (m, v) = (&slot.m, &slot.v);
            p.apply_delta(|i, x| {
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                x - lr * mh / (vh.sqrt() + eps)
            });
            p.zero_grad();
        }
        // clear any remaining (non-trainable) grads as well
        for p in params {
            p.zero_grad();
        }
    }

    /// Moment buffers for checkpointing, in the given parameter order.
    pub fn export_state(&self, params: &[Parameter]) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        params
            .iter()
            .map(|p| {
                let (m, v) = match self.slots.get(&p.id()) {
                    Some(s) => (s.m.clone(), s.v.clone()),
                    None => (vec![0.0; p.numel()], vec![0.0; p.numel()]),
                };
                (p.name().to_string(), m, v)
            })
            .collect()
    }

    pub fn import_state(&mut self, params: &[Parameter], step_count: u64, state: &[(String, Vec<f64>, Vec<f64>)]) {
        self.step_count = step_count;
        self.slots.clear();
        for p in params {
            let entry = state
                .iter()
                .find(|(name, _, _)| name == p.name())
                .unwrap_or_else(|| panic!("optimizer state missing parameter {}", p.name()));
            assert_eq!(entry.1.len(), p.numel(), "moment shape mismatch for {}", p.name());
            self.slots.insert(
                p.id(),
                Slot {
                    m: entry.1.clone(),
                    v: entry.2.clone(),
                },
            );
        }
    }
}
