//! Adam with bias-corrected moments.

use serde::{Deserialize, Serialize};

use crate::model::ParamSet;
use crate::ops::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam<T> {
    cfg: AdamConfig,
    m: ParamSet<T>,
    v: ParamSet<T>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>, cfg: AdamConfig) -> Self {
        let zeros = ParamSet::zeros(&params.spec).expect("spec already validated");
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, lr: f64) {
        self.t += 1;
        let c = self.cfg;
        let t = self.t as i32;
        let lr = T::from_f64(lr).unwrap();
        let bc1 = T::from_f64(1.0 - c.beta1.powi(t)).unwrap();
        let bc2 = T::from_f64(1.0 - c.beta2.powi(t)).unwrap();
        let (b1, b2) = (T::from_f64(c.beta1).unwrap(), T::from_f64(c.beta2).unwrap());
        let eps = T::from_f64(c.eps).unwrap();
        let one = T::one();
        for (((p, g), m), v) in params.layers.iter_mut().zip(&grads.layers).zip(&mut self.m.layers).zip(&mut self.v.layers) {
            let upd = |p: &mut T, g: T, m: &mut T, v: &mut T| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p = *p - lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            };
            ndarray::Zip::from(&mut p.w).and(&g.w).and(&mut m.w).and(&mut v.w).for_each(|p, &g, m, v| upd(p, g, m, v));
            ndarray::Zip::from(&mut p.b).and(&g.b).and(&mut m.b).and(&mut v.b).for_each(|p, &g, m, v| upd(p, g, m, v));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ArchSpec;

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        let spec = ArchSpec::with_widths([1, 1, 1], 1);
        let mut p: ParamSet<f64> = ParamSet::zeros(&spec).unwrap();
        let mut g = p.clone();
        for l in &mut g.layers {
            l.w.fill(0.3);
            l.b.fill(-2.0);
        }
        let mut opt = Adam::new(&p, AdamConfig::default());
        opt.step(&mut p, &g, 1e-3);
        for l in &p.layers {
            assert!(l.w.iter().all(|&w| (w + 1e-3).abs() < 1e-9));
            assert!(l.b.iter().all(|&b| (b - 1e-3).abs() < 1e-9));
        }
    }
}
