use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moments per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore<f32>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape().to_vec()))
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Whether every moment mirrors the shape of its parameter.
    pub fn matches(&self, store: &ParamStore<f32>) -> bool {
        self.m.len() == store.len()
            && self.v.len() == store.len()
            && store.iter().all(|(id, _, t)| {
                self.m[id.index()].shape() == t.shape() && self.v[id.index()].shape() == t.shape()
            })
    }
}

/// Fails naming the first parameter whose gradient is not finite.
pub fn check_finite(store: &ParamStore<f32>, grads: &[Option<Tensor<f32>>]) -> Result<()> {
    for (id, name, _) in store.iter() {
        if let Some(g) = &grads[id.index()] {
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
    }
    Ok(())
}

impl AdamW {
    /// One update: decoupled decay `p ← p·(1 − lr·wd)`, then the
    /// bias-corrected moment step `p ← p − lr·√(1−β2ᵗ)/(1−β1ᵗ) · m / (√v + ε)`. Parameters without a gradient are decayed
    /// and their moments advanced with a zero gradient, as in the usual
    /// dense implementation.
    pub fn step(
        &self,
        store: &mut ParamStore<f32>,
        state: &mut OptimizerState,
        grads: &[Option<Tensor<f32>>],
        lr: f64,
    ) -> Result<()> {
        check_finite(store, grads)?;
        state.step += 1;
        let t = state.step as f64;
        let bc1 = 1.0 - libm::pow(self.beta1, t);
        let bc2 = 1.0 - libm::pow(self.beta2, t);
        let decay = (1.0 - lr * self.weight_decay) as f32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (lr * libm::sqrt(bc2) / bc1) as f32;
        let eps = self.eps as f32;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let g = grads[i].as_ref();
            let p = store.get_mut(id);
            let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g.data()[j]);
                *w *= decay;
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                *w -= step * m[j] / (libm::sqrtf(v[j]) + eps);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor<f32>>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|&v| v as f64 * v as f64)
        .sum();
    let norm = libm::sqrt(sq);
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Constant rate, then cosine annealing to a floor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub fixed_iters: u64,
    pub cosine_iters: u64,
    pub start: f64,
    pub floor: f64,
}

impl LrSchedule {
    /// 92K iterations at 1e-4 then 208K iterations of cosine decay to 1e-6.
    pub fn full() -> Self {
        Self {
            fixed_iters: 92_000,
            cosine_iters: 208_000,
            start: 1e-4,
            floor: 1e-6,
        }
    }

    /// A quarter of `iterations` at `start`, the rest annealed to 1e-6.
    pub fn desk(iterations: u64, start: f64) -> Self {
        let fixed = iterations / 4;
        Self {
            fixed_iters: fixed,
            cosine_iters: iterations - fixed,
            start,
            floor: 1e-6,
        }
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        if iteration < self.fixed_iters || self.cosine_iters == 0 {
            return self.start;
        }
        let t = ((iteration - self.fixed_iters) as f64).min(self.cosine_iters as f64);
        let c = libm::cos(core::f64::consts::PI * t / self.cosine_iters as f64);
        self.floor + 0.5 * (self.start - self.floor) * (1.0 + c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f32) -> (ParamStore<f32>, crate::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::new([1], alloc::vec![v]).unwrap());
        (s, id)
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut s, id) = scalar_store(0.7);
        let mut st = OptimizerState::new(&s);
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        for _ in 0..3 {
            opt.step(&mut s, &mut st, &[Some(Tensor::zeros([1]))], 0.1)
                .unwrap();
        }
        assert_eq!(s.get(id).data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let (mut s, id) = scalar_store(1.0);
        let mut st = OptimizerState::new(&s);
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let g = 0.37f32;
        opt.step(&mut s, &mut st, &[Some(Tensor::full([1], g))], 1e-3)
            .unwrap();
        let expect = 1e-3 * g as f64 / (g as f64 + 1e-8 / libm::sqrt(1.0 - 0.999));
        // one f32 ulp at 1.0 is about 1.2e-7
        assert!(((1.0 - s.get(id).data()[0] as f64) - expect).abs() < 2e-7);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let (mut s, id) = scalar_store(2.0);
        let mut st = OptimizerState::new(&s);
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        for _ in 0..500 {
            let p = s.get(id).data()[0];
            let g = 2.0 * (p - 1.25);
            opt.step(&mut s, &mut st, &[Some(Tensor::full([1], g))], 0.01)
                .unwrap();
        }
        assert!(
            (s.get(id).data()[0] - 1.25).abs() < 1e-3,
            "{}",
            s.get(id).data()[0]
        );
    }

    #[test]
    fn decay_applies_before_moments() {
        let (mut s, id) = scalar_store(2.0);
        let mut st = OptimizerState::new(&s);
        AdamW {
            weight_decay: 0.5,
            ..AdamW::default()
        }
        .step(&mut s, &mut st, &[None], 0.1)
        .unwrap();
        assert_eq!(s.get(id).data(), &[2.0 * 0.95]);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let (mut s, id) = scalar_store(1.0);
        let mut st = OptimizerState::new(&s);
        let err = AdamW::default()
            .step(&mut s, &mut st, &[Some(Tensor::full([1], f32::NAN))], 0.1)
            .unwrap_err();
        assert!(alloc::format!("{err}").contains("p"));
        assert_eq!(s.get(id).data(), &[1.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn clipping() {
        let mut g = [
            Some(Tensor::full([2], 3.0f32)),
            None,
            Some(Tensor::full([1], 4.0)),
        ];
        let n = clip_global_norm(&mut g, 1.0);
        assert!((n - libm::sqrt(34.0)).abs() < 1e-9);
        let after: f64 = g
            .iter()
            .flatten()
            .flat_map(|t| t.data())
            .map(|&v| (v * v) as f64)
            .sum();
        assert!((after - 1.0).abs() < 1e-6);
        let mut small = [Some(Tensor::full([1], 0.5f32))];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].as_ref().unwrap().data(), &[0.5]);
    }

    #[test]
    fn full_schedule_shape() {
        let s = LrSchedule::full();
        assert_eq!(s.lr_at(0), 1e-4);
        assert_eq!(s.lr_at(91_999), 1e-4);
        assert_eq!(s.lr_at(92_000), 1e-4);
        assert!((s.lr_at(92_000 + 104_000) - 5.05e-5).abs() < 1e-15);
        assert!((s.lr_at(299_999) - 1e-6).abs() < 1e-8);
        let mut last = s.lr_at(92_000);
        for i in (92_000..300_000).step_by(997) {
            assert!(s.lr_at(i) <= last);
            last = s.lr_at(i);
        }
    }
}
