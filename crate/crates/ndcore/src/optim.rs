use crate::array::NdArray;
use crate::element::Element;
use crate::error::{NdError, Result};
use crate::params::ParamSet;

/// Bias-corrected adaptive-moment optimizer state.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: ParamSet<T>,
    second: ParamSet<T>,
}

impl<T: Element> Adam<T> {
    /// Decays 0.9 / 0.999 and eps 1e-8.
    pub fn new(lr: f64) -> Self {
        Self::with_decays(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_decays(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first: ParamSet::new(),
            second: ParamSet::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&NdArray<T>> {
        self.first.get(name).ok()
    }

    pub fn second_moment(&self, name: &str) -> Option<&NdArray<T>> {
        self.second.get(name).ok()
    }

    /// Applies one update to every parameter that has a gradient.
    ///
    /// All gradients are validated before anything is modified, so a
    /// non-finite gradient leaves parameters and moments untouched.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params.get(name)?;
            p.expect_same_shape(g, "adam")?;
            if !g.is_finite() {
                return Err(NdError::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name).expect("validated above");
            if !self.first.contains(name) {
                self.first
                    .insert(name.clone(), NdArray::zeros(p.shape().to_vec()));
                self.second
                    .insert(name.clone(), NdArray::zeros(p.shape().to_vec()));
            }
            let m = self.first.get_mut(name).unwrap();
            let v = self.second.get_mut(name).unwrap();
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gf = gv.as_f64();
                let mf = b1 * mv.as_f64() + (1.0 - b1) * gf;
                let vf = b2 * vv.as_f64() + (1.0 - b2) * gf * gf;
                *mv = T::from_f64(mf);
                *vv = T::from_f64(vf);
                let update = self.lr * (mf / bc1) / ((vf / bc2).sqrt() + self.eps);
                *pv = T::from_f64(pv.as_f64() - update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert(name, NdArray::scalar(v));
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single("w", 0.7);
        let mut opt = Adam::new(0.1);
        opt.update(&mut p, &single("w", 0.0)).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 0.7);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = 1, v_hat = 1 at t = 1, so the step is lr / (1 + eps).
        let mut p = single("w", 0.0);
        let mut opt = Adam::new(0.1);
        opt.update(&mut p, &single("w", 1.0)).unwrap();
        let delta = p.get("w").unwrap().item();
        assert!((delta + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn second_moment_grows_with_repeated_steps() {
        let mut p = single("w", 0.0);
        let mut opt = Adam::new(0.1);
        let g = single("w", 1.0);
        opt.update(&mut p, &g).unwrap();
        let v1 = opt.second_moment("w").unwrap().item();
        opt.update(&mut p, &g).unwrap();
        let v2 = opt.second_moment("w").unwrap().item();
        assert!(v2 > v1);
        assert_eq!(opt.step_count(), 2);
    }

    #[test]
    fn nan_gradient_names_parameter_and_changes_nothing() {
        let mut p = single("layer.w", 1.0);
        let mut opt = Adam::new(0.1);
        let err = opt
            .update(&mut p, &single("layer.w", f64::NAN))
            .unwrap_err();
        assert!(matches!(err, NdError::NonFiniteGradient(ref n) if n == "layer.w"));
        assert_eq!(p.get("layer.w").unwrap().item(), 1.0);
        assert_eq!(opt.step_count(), 0);
    }
}
