//! Adam with bias correction.
//!
//! The adversarial game runs with beta1 = 0, beta2 = 0.9 (generator lr 1e-4,
//! discriminator lr 4e-4); the segmentor uses the stock (0.9, 0.999)
//! defaults. A non-finite gradient aborts the step before any parameter is
//! touched.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// The adversarial-training variant: beta1 = 0, beta2 = 0.9.
    pub fn gan(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: 0.0,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
pub struct AdamState<T> {
    pub cfg: AdamConfig,
    pub t: u64,
    moments: IndexMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(cfg: AdamConfig) -> AdamState<T> {
        AdamState {
            cfg,
            t: 0,
            moments: IndexMap::new(),
        }
    }

    /// One named-group Adam step. `grads` holds (name, gradient) pairs whose
    /// shapes must match the named parameters. Validates every gradient
    /// before mutating anything, so a non-finite gradient leaves parameters,
    /// moments and the step counter untouched.
    pub fn step(
        &mut self,
        params: &mut IndexMap<String, Tensor<T>>,
        grads: &[(String, Tensor<T>)],
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::domain(format!("adam: unknown parameter `{name}`")))?;
            if g.shape() != p.shape() {
                return Err(Error::dim(format!(
                    "adam: gradient shape {:?} != parameter shape {:?} for `{name}`",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::numeric(format!(
                    "adam: non-finite gradient for `{name}`; no update applied"
                )));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one = T::one();
        let lr = T::from_f64(self.cfg.lr);
        let eps = T::from_f64(self.cfg.eps);
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("validated above");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(p.shape().clone()), Tensor::zeros(p.shape().clone())));
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = b1 * md[i] + (one - b1) * gi;
                vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] = pd[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(v: f64) -> IndexMap<String, Tensor<f64>> {
        let mut m = IndexMap::new();
        m.insert("p".to_string(), Tensor::scalar(v));
        m
    }

    #[test]
    fn zero_gradient_leaves_params_and_increments_t() {
        let mut params = single_param(1.5);
        let mut st = AdamState::new(AdamConfig::gan(1e-4));
        st.step(&mut params, &[("p".to_string(), Tensor::scalar(0.0))])
            .unwrap();
        assert_eq!(st.t, 1);
        assert_eq!(params["p"].data(), &[1.5]);
    }

    #[test]
    fn first_step_closed_form_with_gan_betas() {
        // beta1=0, beta2=0.9, lr=1e-4, eps=1e-8, g=2:
        // m_hat = 2, v_hat = 4, delta = -1e-4 * 2/(2 + 1e-8)
        let mut params = single_param(0.0);
        let mut st = AdamState::new(AdamConfig::gan(1e-4));
        st.step(&mut params, &[("p".to_string(), Tensor::scalar(2.0))])
            .unwrap();
        let want = -1e-4 * 2.0 / (2.0 + 1e-8);
        assert!((params["p"].data()[0] - want).abs() < 1e-18);
    }

    #[test]
    fn ten_step_trace_matches_scalar_oracle() {
        // Independent oracle: plain scalar arithmetic, no tensors.
        let (lr, b1, b2, eps) = (1e-4, 0.0, 0.9, 1e-8);
        let mut p_oracle = 0.7f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut trace = Vec::new();
        for t in 1..=10 {
            let g = 2.0 * p_oracle; // d/dp of p^2
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            p_oracle -= lr * m_hat / (v_hat.sqrt() + eps);
            trace.push(p_oracle);
        }

        let mut params = single_param(0.7);
        let mut st = AdamState::new(AdamConfig::gan(lr));
        for step in 0..10 {
            let g = 2.0 * params["p"].data()[0];
            st.step(&mut params, &[("p".to_string(), Tensor::scalar(g))])
                .unwrap();
            assert!(
                (params["p"].data()[0] - trace[step]).abs() <= 1e-12,
                "step {step}: {} vs {}",
                params["p"].data()[0],
                trace[step]
            );
        }
    }

    #[test]
    fn nonfinite_gradient_applies_nothing() {
        let mut params = single_param(1.0);
        let mut st = AdamState::new(AdamConfig::new(1e-3));
        st.step(&mut params, &[("p".to_string(), Tensor::scalar(1.0))])
            .unwrap();
        let after_one = params["p"].data()[0];
        let err = st.step(&mut params, &[("p".to_string(), Tensor::scalar(f64::NAN))]);
        assert!(matches!(err, Err(Error::Numeric(_))));
        assert_eq!(params["p"].data()[0], after_one);
        assert_eq!(st.t, 1, "step counter must not advance on failure");
    }

    #[test]
    fn moment_shapes_track_parameters() {
        let mut params = IndexMap::new();
        params.insert("w".to_string(), Tensor::<f64>::zeros([2, 3]));
        let mut st = AdamState::new(AdamConfig::new(1e-3));
        let g = Tensor::<f64>::filled([2, 3], 0.5);
        st.step(&mut params, &[("w".to_string(), g)]).unwrap();
        let (m, v) = &st.moments["w"];
        assert_eq!(m.shape().dims(), &[2, 3]);
        assert_eq!(v.shape().dims(), &[2, 3]);
    }
}
