use super::mlp::MlpParams;
use crate::error::Result;

/// Adam optimizer state with moments shaped like the parameters they track.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: MlpParams,
    pub v: MlpParams,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &MlpParams, lr: f64) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// In-place bias-corrected Adam update.
    pub fn update(&mut self, params: &mut MlpParams, grads: &MlpParams) -> Result<()> {
        params.check_same_shape(grads, "adam_step")?;
        params.check_same_shape(&self.m, "adam_step")?;
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (lr, eps) = (self.lr, self.eps);
        for (((p, g), m), v) in params.blocks_mut().zip(grads.blocks()).zip(self.m.blocks_mut()).zip(self.v.blocks_mut()) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Value-semantics form of [`AdamState::update`].
pub fn adam_step(state: &AdamState, params: &MlpParams, grads: &MlpParams) -> Result<(AdamState, MlpParams)> {
    let mut s = state.clone();
    let mut p = params.clone();
    s.update(&mut p, grads)?;
    Ok((s, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Activation, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net() -> MlpParams {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        MlpParams::init(&[3, 5, 2], Activation::Mish, &mut rng).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let p = net();
        let s = AdamState::new(&p, 1e-3);
        let (s2, p2) = adam_step(&s, &p, &p.zeros_like()).unwrap();
        assert_eq!(p2, p);
        assert_eq!(s2.step, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let p = net();
        let mut g = p.zeros_like();
        for (i, b) in g.blocks_mut().enumerate() {
            for (j, v) in b.iter_mut().enumerate() {
                *v = ((i * 7 + j) as f64 * 0.37).sin();
            }
        }
        let s = AdamState::new(&p, 2e-4);
        let (_, p2) = adam_step(&s, &p, &g).unwrap();
        for ((new, old), gb) in p2.blocks().zip(p.blocks()).zip(g.blocks()) {
            for i in 0..new.len() {
                let want = old[i] - 2e-4 * gb[i] / (gb[i].abs() + 1e-8);
                assert!((new[i] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn constant_gradient_moves_opposite() {
        let mut p = net();
        let start = p.weights[0][(0, 0)];
        let mut g = p.zeros_like();
        g.weights[0][(0, 0)] = 0.5;
        g.biases[1][1] = -2.0;
        let bstart = p.biases[1][1];
        let mut s = AdamState::new(&p, 1e-2);
        for _ in 0..50 {
            s.update(&mut p, &g).unwrap();
        }
        assert!(p.weights[0][(0, 0)] < start);
        assert!(p.biases[1][1] > bstart);
        assert_eq!(s.step, 50);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let p = net();
        let mut other = MlpParams::zeros(&[3, 4, 2], Activation::Mish).unwrap();
        let mut s = AdamState::new(&p, 1e-3);
        assert!(s.update(&mut other, &p).is_err());
        let _ = Array2::zeros(1, 1);
    }
}
