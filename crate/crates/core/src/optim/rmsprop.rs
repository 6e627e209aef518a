//! RMSprop without momentum or centering:
//!
//! ```text
//! s ← ρ s + (1 − ρ) g²
//! θ ← θ − lr · g / (√s + ε)
//! ```

use ndarray::{Array2, Zip};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub decay: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub mean_square: Vec<Array2<f64>>,
    pub iteration: u64,
}

impl OptState {
    pub fn for_params(params: &[&Array2<f64>]) -> Self {
        Self {
            mean_square: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            iteration: 0,
        }
    }
}

impl RmsProp {
    /// Updates each parameter tensor in place with its gradient.
    pub fn step(&self, params: &mut [&mut Array2<f64>], grads: &[&Array2<f64>], state: &mut OptState) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        assert_eq!(
            params.len(),
            state.mean_square.len(),
            "optimizer state matches parameters"
        );
        let (lr, rho, eps) = (self.learning_rate, self.decay, self.eps);
        for ((p, g), s) in params.iter_mut().zip(grads).zip(state.mean_square.iter_mut()) {
            Zip::from(&mut **p).and(*g).and(s).for_each(|p, &g, s| {
                *s = rho * *s + (1.0 - rho) * g * g;
                *p -= lr * g / (s.sqrt() + eps);
            });
        }
        state.iteration += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    const OPT: RmsProp = RmsProp {
        learning_rate: 1e-2,
        decay: 0.99,
        eps: 1e-8,
    };

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = array![[1.0, -2.0]];
        let g = Array2::zeros((1, 2));
        let mut st = OptState::for_params(&[&p]);
        OPT.step(&mut [&mut p], &[&g], &mut st);
        assert_eq!(p, array![[1.0, -2.0]]);
        assert_eq!(st.iteration, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = array![[0.5]];
        let g = array![[3.0]];
        let mut st = OptState::for_params(&[&p]);
        OPT.step(&mut [&mut p], &[&g], &mut st);
        let expected = 0.5 - 1e-2 * 3.0 / ((0.01f64 * 9.0).sqrt() + 1e-8);
        assert!((p[[0, 0]] - expected).abs() < 1e-15);
    }

    #[test]
    fn three_step_recurrence() {
        // Hand-unrolled recurrence, g_t = 1, -2, 0.5:
        // s1 = 0.01,            θ1 = 1 - 0.01·1/(0.1 + ε)
        // s2 = 0.0099 + 0.04,   θ2 = θ1 + 0.01·2/(√0.0499 + ε)
        // s3 = 0.049401+0.0025, θ3 = θ2 - 0.01·0.5/(√0.051901 + ε)
        let eps = 1e-8;
        let t1 = 1.0 - 0.01 / (0.1 + eps);
        let t2 = t1 + 0.02 / (0.0499f64.sqrt() + eps);
        let t3 = t2 - 0.005 / (0.051901f64.sqrt() + eps);
        let mut p = array![[1.0]];
        let mut st = OptState::for_params(&[&p]);
        for g in [1.0, -2.0, 0.5] {
            OPT.step(&mut [&mut p], &[&array![[g]]], &mut st);
        }
        assert!((st.mean_square[0][[0, 0]] - 0.051901).abs() < 1e-15);
        assert!((p[[0, 0]] - t3).abs() < 1e-12, "{} vs {t3}", p[[0, 0]]);
    }
}
