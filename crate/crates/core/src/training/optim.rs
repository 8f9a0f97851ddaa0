//! Adam with an inverse-square-root learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Mat;
use crate::params::{ParamInfo, ParamKind, Parameterized};
use crate::scalar::Scalar;

/// Linear warmup to `peak` over `warmup` steps, then decay `∝ 1/√step`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverseSqrt {
    pub peak: f64,
    pub warmup: u64,
}

impl InverseSqrt {
    /// Learning rate for 1-based `step`. At `step == warmup` it equals `peak`.
    pub fn lr(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        if self.warmup == 0 {
            return self.peak / s.sqrt();
        }
        let w = self.warmup as f64;
        if s <= w {
            self.peak * s / w
        } else {
            self.peak * (w / s).sqrt()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// Moment estimates, one slot per parameter in visit order. Slots stay empty
/// until the parameter first receives a gradient.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Option<Mat<T>>>,
    v: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn first_moment(&self, i: usize) -> Option<&Mat<T>> {
        self.m.get(i).and_then(Option::as_ref)
    }

    pub fn second_moment(&self, i: usize) -> Option<&Mat<T>> {
        self.v.get(i).and_then(Option::as_ref)
    }
}

/// Global L2 norm over the present gradients.
pub fn global_norm<T: Scalar>(grads: &[Option<Mat<T>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.squared_norm().to_f64_lossy())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Option<Mat<T>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// One Adam update with learning rate `lr`. `grads` follow the visit order of
/// `params`; parameters without a gradient, or rejected by `trainable`, are
/// left untouched along with their moments.
pub fn adam_step<T, P>(
    params: &mut P,
    grads: &[Option<Mat<T>>],
    state: &mut AdamState<T>,
    lr: f64,
    trainable: impl Fn(&ParamInfo) -> bool,
) -> Result<()>
where
    T: Scalar,
    P: Parameterized<T> + ?Sized,
{
    let AdamConfig { beta1, beta2, eps } = state.config;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    if state.m.len() < grads.len() {
        state.m.resize(grads.len(), None);
        state.v.resize(grads.len(), None);
    }
    let (b1, b2) = (T::lit(beta1), T::lit(beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
    let step = T::lit(lr / c1);
    let inv_c2 = T::lit(1.0 / c2);
    let eps = T::lit(eps);

    let mut index = 0;
    let mut failure = None;
    params.visit_params_mut("", &mut |info, p| {
        let i = index;
        index += 1;
        let Some(Some(g)) = grads.get(i) else { return };
        if !trainable(info) {
            return;
        }
        if g.shape() != p.shape() {
            failure.get_or_insert(Error::Shape {
                op: "adam_step",
                left: p.shape(),
                right: g.shape(),
            });
            return;
        }
        let m = state.m[i].get_or_insert_with(|| Mat::zeros(p.rows(), p.cols()));
        let v = state.v[i].get_or_insert_with(|| Mat::zeros(p.rows(), p.cols()));
        for (((w, &gk), mk), vk) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mk = b1 * *mk + one_b1 * gk;
            *vk = b2 * *vk + one_b2 * gk * gk;
            *w -= step * *mk / ((*vk * inv_c2).sqrt() + eps);
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Trainability filter: everything, or everything but base weights.
pub fn trainable_filter(freeze_base: bool) -> impl Fn(&ParamInfo) -> bool {
    move |info| !(freeze_base && info.kind == ParamKind::Base)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_junction() {
        let s = InverseSqrt {
            peak: 1e-3,
            warmup: 400,
        };
        assert_eq!(s.lr(400), 1e-3);
        assert!((s.lr(200) - 5e-4).abs() < 1e-18);
        assert!((s.lr(1600) - 5e-4).abs() < 1e-18);
        assert!(s.lr(401) < s.lr(400));
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Mat::<f64>::from_rows(&[&[1.0, -2.0]])];
        let before = p.clone();
        let mut st = AdamState::new(AdamConfig::default());
        let grads = vec![Some(Mat::zeros(1, 2))];
        adam_step(&mut p, &grads, &mut st, 0.1, |_| true).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn scalar_closed_form() {
        // One step from zero moments: m̂ = g, v̂ = g², so w -= lr·g/(|g| + ε·…).
        let (w0, g, lr) = (0.5, 0.3, 0.01);
        let cfg = AdamConfig::default();
        let mut p = vec![Mat::<f64>::filled(1, 1, w0)];
        let mut st = AdamState::new(cfg);
        adam_step(&mut p, &[Some(Mat::filled(1, 1, g))], &mut st, lr, |_| true).unwrap();
        let m = (1.0 - cfg.beta1) * g;
        let v = (1.0 - cfg.beta2) * g * g;
        let m_hat = m / (1.0 - cfg.beta1);
        let v_hat = v / (1.0 - cfg.beta2);
        let expect = w0 - lr * m_hat / (v_hat.sqrt() + cfg.eps);
        assert!((p[0].get(0, 0) - expect).abs() < 1e-15);
        assert!((p[0].get(0, 0) - (w0 - lr)).abs() < 1e-6);
    }

    #[test]
    fn missing_gradient_skips() {
        let mut p = vec![Mat::<f64>::filled(1, 1, 1.0), Mat::filled(1, 1, 1.0)];
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut p, &[None, Some(Mat::filled(1, 1, 1.0))], &mut st, 0.1, |_| true).unwrap();
        assert_eq!(p[0].get(0, 0), 1.0);
        assert!(p[1].get(0, 0) < 1.0);
        assert!(st.first_moment(0).is_none());
    }

    #[test]
    fn clipping() {
        let mut g = vec![Some(Mat::<f64>::from_rows(&[&[3.0, 4.0]])), None];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        let mut small = vec![Some(Mat::<f64>::from_rows(&[&[0.3, 0.4]]))];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].as_ref().unwrap().data(), &[0.3, 0.4]);
    }
}
