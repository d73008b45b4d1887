use crate::admath::{Array2, Gradients};
use crate::{Error, Result};

/// Adam with bias correction. Moment buffers mirror the parameter list they
/// were created for, in the same canonical order.
#[derive(Clone, Debug)]
pub struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Array2>,
    v: Vec<Array2>,
}

impl AdamState {
    pub const DEFAULT_LR: f64 = 1e-3;

    pub fn new(params: &[&Array2], lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| Array2::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.rows(), p.cols())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. Slots without a gradient are treated as zero-gradient.
    pub fn step(&mut self, params: &mut [&mut Array2], grads: &Gradients) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} params vs {} moment buffers", params.len(), self.m.len()),
            ));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (slot, p) in params.iter_mut().enumerate() {
            let zero;
            let g = match grads.get(slot) {
                Some(g) => {
                    if !g.all_finite() {
                        return Err(Error::NonFinite { op: "adam_step" });
                    }
                    if !g.same_shape(p) {
                        return Err(Error::shape(
                            "adam_step",
                            format!(
                                "gradient {}x{} vs parameter {}x{} at slot {}",
                                g.rows(),
                                g.cols(),
                                p.rows(),
                                p.cols(),
                                slot
                            ),
                        ));
                    }
                    g
                }
                None => {
                    zero = Array2::zeros(p.rows(), p.cols());
                    &zero
                }
            };
            let m = self.m[slot].as_mut_slice();
            let v = self.v[slot].as_mut_slice();
            let gsl = g.as_slice();
            for (((pv, mv), vv), &gi) in p
                .as_mut_slice()
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut())
                .zip(gsl)
            {
                let mi = self.beta1 * *mv + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * *vv + (1.0 - self.beta2) * gi * gi;
                *mv = mi;
                *vv = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *pv -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::admath::Tape;

    fn grads_for(value: f64) -> Gradients {
        let mut tape = Tape::new();
        let p = tape.param(0, Array2::row_vector(&[1.0])).unwrap();
        let s = tape.scale(p, value).unwrap();
        let out = tape.mean_all(s).unwrap();
        tape.backward(out).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Array2::row_vector(&[0.7, -0.3]);
        let before = p.clone();
        let mut adam = AdamState::new(&[&p], 1e-2);
        adam.step(&mut [&mut p], &Gradients::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_magnitude_is_the_learning_rate() {
        // bias-corrected first step: lr * g / (|g| + eps) ~ lr * sign(g)
        let mut p = Array2::row_vector(&[2.0]);
        let mut adam = AdamState::new(&[&p], 1e-2);
        let g = grads_for(0.37);
        adam.step(&mut [&mut p], &g).unwrap();
        let moved = (p.as_slice()[0] - 2.0).abs();
        assert!((moved - 1e-2).abs() < 1e-6, "step size {}", moved);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut theta = Array2::row_vector(&[1.0]);
        let mut adam = AdamState::new(&[&theta], 1e-2);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let p = tape.param(0, theta.clone()).unwrap();
            let sq = tape.mul(p, p).unwrap();
            let loss = tape.mean_all(sq).unwrap();
            let g = tape.backward(loss).unwrap();
            adam.step(&mut [&mut theta], &g).unwrap();
        }
        assert!(theta.as_slice()[0].abs() < 1e-3, "theta = {}", theta.as_slice()[0]);
    }

    #[test]
    fn nonfinite_gradient_is_rejected() {
        // logit of a subnormal is finite, but its derivative 1/(x(1-x)) overflows
        let mut p = Array2::row_vector(&[1e-320]);
        let mut adam = AdamState::new(&[&p], 1e-2);
        let mut tape = Tape::new();
        let pid = tape.param(0, p.clone()).unwrap();
        let l = tape.logit(pid).unwrap();
        let out = tape.mean_all(l).unwrap();
        let g = tape.backward(out).unwrap();
        assert!(!g.get(0).unwrap().all_finite());
        assert!(matches!(
            adam.step(&mut [&mut p], &g),
            Err(Error::NonFinite { .. })
        ));
    }
}
