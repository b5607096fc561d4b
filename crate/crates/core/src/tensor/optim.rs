//! Decoupled-weight-decay Adam and gradient utilities.

use serde::{Deserialize, Serialize};

use super::graph::{Gradients, ParamId, ParamStore};
use super::{c, Element, Result, TensorError};

/// Per-run gradient accumulator, one slot per parameter. Accumulation
/// happens in a fixed parameter/index order so reruns are bit-identical.
pub struct GradAccum<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Element> GradAccum<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self { slots: (0..store.len()).map(|_| None).collect() }
    }

    /// Fold one backward pass into the accumulator.
    pub fn add(&mut self, store: &ParamStore<T>, grads: &Gradients<T>) {
        for (id, entry) in store.iter() {
            if let Some(g) = grads.param(id) {
                let slot = self.slots[id.0].get_or_insert_with(|| vec![T::zero(); entry.value.numel()]);
                for (o, &v) in slot.iter_mut().zip(g.data()) {
                    *o += v;
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        let f = c::<T>(factor);
        for slot in self.slots.iter_mut().flatten() {
            for v in slot.iter_mut() {
                *v *= f;
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.slots[id.0].as_deref()
    }

    /// Global L2 norm over all accumulated gradients (fixed order).
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for slot in self.slots.iter().flatten() {
            for &v in slot {
                let v = v.to_f64();
                acc += v * v;
            }
        }
        acc.sqrt()
    }
}

/// Scale gradients so their global norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm<T: Element>(grads: &mut GradAccum<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, betas: (0.9, 0.999), eps: 1e-8, weight_decay: 0.05 }
    }
}

/// AdamW with bias-corrected moments and decoupled weight decay. Decay is
/// applied only to parameters registered with `decay = true`.
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<T>) -> Self {
        let m = store.iter().map(|(_, e)| vec![T::zero(); e.value.numel()]).collect();
        let v = store.iter().map(|(_, e)| vec![T::zero(); e.value.numel()]).collect();
        Self { cfg, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. `lr_scale` multiplies the base learning rate (schedule).
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &GradAccum<T>,
        lr_scale: f64,
    ) -> Result<()> {
        self.step += 1;
        let lr = self.cfg.lr * lr_scale;
        let (b1, b2) = self.cfg.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (b1t, b2t) = (c::<T>(b1), c::<T>(b2));
        let (ob1, ob2) = (c::<T>(1.0 - b1), c::<T>(1.0 - b2));
        let eps = c::<T>(self.cfg.eps);

        for i in 0..store.len() {
            let id = ParamId(i);
            let decay = store.entry(id).decay;
            let name_nonfinite = grads
                .get(id)
                .map(|g| g.iter().any(|v| !v.is_finite()))
                .unwrap_or(false);
            if name_nonfinite {
                return Err(TensorError::NonFiniteGrad(store.entry(id).name.clone()));
            }
            let wd_factor = if decay { 1.0 - lr * self.cfg.weight_decay } else { 1.0 };
            let wd = c::<T>(wd_factor);
            let value = store.value_mut(id);
            let data = value.data_mut();
            if let Some(g) = grads.get(id) {
                let m = &mut self.m[i];
                let v = &mut self.v[i];
                for j in 0..data.len() {
                    m[j] = b1t * m[j] + ob1 * g[j];
                    v[j] = b2t * v[j] + ob2 * g[j] * g[j];
                    let mhat = m[j].to_f64() / bc1;
                    let vhat = v[j].to_f64() / bc2;
                    let update = c::<T>(lr * mhat / (vhat.sqrt() + eps.to_f64()));
                    data[j] = wd * data[j] - update;
                }
            } else if decay {
                for d in data.iter_mut() {
                    *d = wd * *d;
                }
            }
        }
        Ok(())
    }
}

/// Linear warmup followed by cosine decay to a small floor.
pub fn warmup_cosine(step: u64, total_steps: u64, warmup_steps: u64) -> f64 {
    if total_steps == 0 {
        return 1.0;
    }
    if warmup_steps > 0 && step < warmup_steps {
        return (step + 1) as f64 / warmup_steps as f64;
    }
    let denom = total_steps.saturating_sub(warmup_steps).max(1) as f64;
    let progress = (step.saturating_sub(warmup_steps)) as f64 / denom;
    let progress = progress.clamp(0.0, 1.0);
    let floor = 0.01;
    floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Mode, Tensor};

    fn single_param_store(v: f64, decay: bool) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(v), decay);
        (store, id)
    }

    fn grads_of(store: &ParamStore<f64>, id: ParamId, g: f64) -> GradAccum<f64> {
        let mut g_accum = GradAccum::new(store);
        // Build a trivial graph: loss = g * p, so dloss/dp = g.
        let mut graph = Graph::new(store, Mode::Train);
        let p = graph.param(id);
        let s = graph.scale(p, g).unwrap();
        let loss = graph.sum_all(s).unwrap();
        let grads = graph.backward(loss).unwrap();
        g_accum.add(store, &grads);
        g_accum
    }

    #[test]
    fn zero_grad_no_decay_leaves_params_unchanged() {
        let (mut store, id) = single_param_store(1.5, false);
        let grads = grads_of(&store, id, 0.0);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &store);
        opt.step(&mut store, &grads, 1.0).unwrap();
        assert_eq!(store.value(id).data()[0], 1.5);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // g=1, lr=0.1, step 1, betas (0.9, 0.999), eps 1e-8:
        // mhat = 1, vhat = 1, update = lr / (1 + eps) ~= 0.1
        let (mut store, id) = single_param_store(0.0, false);
        let grads = grads_of(&store, id, 1.0);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store, &grads, 1.0).unwrap();
        let p = store.value(id).data()[0];
        assert!((p + 0.1).abs() < 1e-8, "param should decrease by ~0.1, got {p}");
    }

    #[test]
    fn decoupled_decay_formula() {
        // weight_decay=0.1, grad=0, lr=0.1, param=1 -> 1 * (1 - 0.01) = 0.99
        let (mut store, id) = single_param_store(1.0, true);
        let grads = grads_of(&store, id, 0.0);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.1, ..Default::default() };
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store, &grads, 1.0).unwrap();
        assert!((store.value(id).data()[0] - 0.99).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_aborts_with_name() {
        let (mut store, id) = single_param_store(1.0, false);
        let mut accum = GradAccum::new(&store);
        accum.slots[id.0] = Some(vec![f64::NAN]);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let err = opt.step(&mut store, &accum, 1.0).unwrap_err();
        assert!(matches!(err, TensorError::NonFiniteGrad(ref n) if n == "p"));
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let (store, id) = single_param_store(1.0, false);
        let mut accum = GradAccum::new(&store);
        accum.slots[id.0] = Some(vec![3.0, 4.0]);
        let pre = clip_grad_norm(&mut accum, 1.0);
        assert!((pre - 5.0).abs() < 1e-12);
        assert!((accum.global_norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn warmup_then_decay() {
        assert!(warmup_cosine(0, 100, 10) < warmup_cosine(9, 100, 10));
        assert!((warmup_cosine(9, 100, 10) - 1.0).abs() < 1e-12);
        assert!(warmup_cosine(50, 100, 10) < 1.0);
        assert!(warmup_cosine(99, 100, 10) >= 0.01);
    }
}
