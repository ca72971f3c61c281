use super::{Gradients, ParamStore, ShapeMismatch};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First/second moment buffers, one pair per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimState {
    pub fn new(store: &ParamStore) -> Self {
        OptimState {
            m: store.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            v: store.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            step: 0,
        }
    }
}

impl AdamW {
    /// One update over every trainable parameter. Trainable parameters
    /// absent from `grads` are treated as having zero gradient.
    pub fn step(
        &self,
        store: &mut ParamStore,
        grads: &Gradients,
        state: &mut OptimState,
        lr: f64,
    ) -> Result<(), ShapeMismatch> {
        self.step_with(store, grads, state, |_| lr)
    }

    /// As `step`, with the learning rate chosen per parameter name.
    pub fn step_with(
        &self,
        store: &mut ParamStore,
        grads: &Gradients,
        state: &mut OptimState,
        lr_of: impl Fn(&str) -> f64,
    ) -> Result<(), ShapeMismatch> {
        if state.m.len() != store.len() {
            return Err(ShapeMismatch {
                op: "adamw",
                lhs: (store.len(), 0),
                rhs: (state.m.len(), 0),
            });
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            if !store.is_trainable(id) {
                continue;
            }
            let lr = lr_of(store.name(id));
            let g = grads.param(id);
            let p = store.get_mut(id);
            let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
            if m.len() != p.len() || g.is_some_and(|g| g.len() != p.len()) {
                return Err(ShapeMismatch {
                    op: "adamw",
                    lhs: p.shape(),
                    rhs: (g.map_or(m.len(), <[f64]>::len), 1),
                });
            }
            for j in 0..p.data.len() {
                let gj = g.map_or(0.0, |g| g[j]);
                p.data[j] -= lr * self.weight_decay * p.data[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p.data[j] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr`, then half-cosine decay to 0.
pub fn cosine_lr(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1) as f64;
    let t = ((step - warmup_steps) as f64 / span).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{Graph, Tensor};

    fn one_param(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(v));
        s
    }

    fn grads_for(s: &ParamStore, g: f64) -> Gradients {
        let mut gr = Graph::new(s);
        let p = gr.p("p");
        let l = gr.scale(p, g);
        gr.backward(l)
    }

    #[test]
    fn zero_grad_cases() {
        let mut s = one_param(2.0);
        let mut st = OptimState::new(&s);
        let g = grads_for(&s, 0.0);
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        opt.step(&mut s, &g, &mut st, 0.1).unwrap();
        assert_eq!(s.by_name("p").unwrap().item(), 2.0);

        let mut st = OptimState::new(&s);
        AdamW::default().step(&mut s, &g, &mut st, 0.1).unwrap();
        assert!((s.by_name("p").unwrap().item() - 2.0 * 0.995).abs() < 1e-15);
    }

    #[test]
    fn first_step_by_hand() {
        let mut s = one_param(1.0);
        let mut st = OptimState::new(&s);
        let g = grads_for(&s, 1.0);
        let lr = 2e-4;
        AdamW::default().step(&mut s, &g, &mut st, lr).unwrap();
        // Bias-corrected moments at step 1 equal g and g^2.
        let expect = (1.0 - lr * 0.05) - lr * 1.0 / (1.0 + 1e-8);
        assert!((s.by_name("p").unwrap().item() - expect).abs() < 1e-15);
        assert_eq!(st.step, 1);
        assert!((st.m[0][0] - 0.1).abs() < 1e-15);
        assert!((st.v[0][0] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn frozen_params_do_not_move() {
        let mut s = one_param(1.0);
        s.set_trainable("p", false);
        let mut st = OptimState::new(&s);
        let g = grads_for(&s, 1.0);
        assert!(g.param(s.id("p").unwrap()).is_none());
        AdamW::default().step(&mut s, &g, &mut st, 0.1).unwrap();
        assert_eq!(s.by_name("p").unwrap().item(), 1.0);
    }

    #[test]
    fn schedule_points() {
        assert_eq!(cosine_lr(0, 100, 10, 1.0), 0.0);
        assert_eq!(cosine_lr(10, 100, 10, 1.0), 1.0);
        assert!((cosine_lr(55, 100, 10, 1.0) - 0.5).abs() < 1e-12);
        assert!(cosine_lr(100, 100, 10, 1.0).abs() < 1e-12);
        assert!((cosine_lr(5, 100, 10, 2.0) - 1.0).abs() < 1e-12);
    }
}
