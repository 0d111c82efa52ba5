use rand::Rng;

use super::array::{gemm, Array2};
use crate::error::{Error, Result};

/// Smooth hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// `x * tanh(softplus(x))`
    Mish,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Mish => x * mish_gate(x).0,
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Mish => {
                let (t, sig) = mish_gate(x);
                t + x * (1.0 - t * t) * sig
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

/// `(tanh(softplus(x)), sigmoid(x))` from a single exponential.
///
/// With `e = exp(x)`, `tanh(ln(1 + e)) = (e^2 + 2e) / (e^2 + 2e + 2)`.
#[inline]
fn mish_gate(x: f64) -> (f64, f64) {
    if x > 20.0 {
        return (1.0, 1.0);
    }
    let e = x.exp();
    let n = e * (e + 2.0);
    (n / (n + 2.0), e / (1.0 + e))
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fully-connected network parameters. Weights are stored `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    sizes: Vec<usize>,
    pub weights: Vec<Array2>,
    pub biases: Vec<Vec<f64>>,
    pub activation: Activation,
}

/// Intermediate values kept from a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Layer inputs; `inputs[0]` is the network input.
    inputs: Vec<Array2>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2>,
    pub output: Array2,
}

impl MlpParams {
    /// All-zero parameters for the given layer sizes.
    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        let weights = sizes.windows(2).map(|w| Array2::zeros(w[1], w[0])).collect();
        let biases = sizes[1..].iter().map(|&n| vec![0.0; n]).collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            weights,
            biases,
            activation,
        })
    }

    /// Uniform fan-in initialization, `U(-1/sqrt(in), 1/sqrt(in))`.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(sizes, activation)?;
        for (w, b) in p.weights.iter_mut().zip(p.biases.iter_mut()) {
            let bound = 1.0 / (w.cols() as f64).sqrt();
            for v in w.as_mut_slice() {
                *v = rng.random_range(-bound..bound);
            }
            for v in b.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(p)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.sizes, self.activation).expect("sizes already validated")
    }

    /// Parameter blocks in layer order: weights then bias for each layer.
    pub fn blocks(&self) -> impl Iterator<Item = &[f64]> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w.as_mut_slice(), b.as_mut_slice()])
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn same_shape(&self, other: &MlpParams) -> bool {
        self.sizes == other.sizes
    }

    pub(crate) fn check_same_shape(&self, other: &MlpParams, op: &'static str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape(op, format!("{:?}", self.sizes), format!("{:?}", other.sizes)));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Array2) -> Result<Array2> {
        Ok(self.forward_cached(input)?.output)
    }

    pub fn forward_cached(&self, input: &Array2) -> Result<ForwardCache> {
        if input.cols() != self.input_dim() {
            return Err(Error::shape(
                "mlp_forward",
                format!("{} input columns", self.input_dim()),
                format!("{} input columns", input.cols()),
            ));
        }
        let batch = input.rows();
        let last = self.num_layers() - 1;
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut pre = Vec::with_capacity(last);
        let mut x = input.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (out_dim, in_dim) = w.shape();
            let mut z = Array2::zeros(batch, out_dim);
            for r in 0..batch {
                z.row_mut(r).copy_from_slice(b);
            }
            gemm(batch, in_dim, out_dim, 1.0, x.as_slice(), false, w.as_slice(), true, 1.0, z.as_mut_slice());
            inputs.push(x);
            if l == last {
                return Ok(ForwardCache { inputs, pre, output: z });
            }
            let act = self.activation;
            x = z.map(|v| act.apply(v));
            pre.push(z);
        }
        unreachable!("network has at least one layer")
    }

    /// Gradients of `sum(upstream * output)` with respect to the parameters
    /// and the input.
    pub fn backward(&self, input: &Array2, upstream: &Array2) -> Result<(MlpParams, Array2)> {
        let cache = self.forward_cached(input)?;
        self.backward_cached(&cache, upstream)
    }

    pub fn backward_cached(&self, cache: &ForwardCache, upstream: &Array2) -> Result<(MlpParams, Array2)> {
        let batch = cache.output.rows();
        if upstream.shape() != cache.output.shape() {
            return Err(Error::shape(
                "mlp_backward",
                format!("{:?}", cache.output.shape()),
                format!("{:?}", upstream.shape()),
            ));
        }
        let mut grads = self.zeros_like();
        let mut delta = upstream.clone();
        for l in (0..self.num_layers()).rev() {
            let w = &self.weights[l];
            let (out_dim, in_dim) = w.shape();
            let x = &cache.inputs[l];
            gemm(
                out_dim,
                batch,
                in_dim,
                1.0,
                delta.as_slice(),
                true,
                x.as_slice(),
                false,
                0.0,
                grads.weights[l].as_mut_slice(),
            );
            let gb = &mut grads.biases[l];
            for r in 0..batch {
                for (g, d) in gb.iter_mut().zip(delta.row(r)) {
                    *g += d;
                }
            }
            let mut dx = Array2::zeros(batch, in_dim);
            gemm(
                batch,
                out_dim,
                in_dim,
                1.0,
                delta.as_slice(),
                false,
                w.as_slice(),
                false,
                0.0,
                dx.as_mut_slice(),
            );
            if l > 0 {
                let act = self.activation;
                for (d, z) in dx.as_mut_slice().iter_mut().zip(cache.pre[l - 1].as_slice()) {
                    *d *= act.derivative(*z);
                }
            }
            delta = dx;
        }
        Ok((grads, delta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_linear_layer() {
        let mut p = MlpParams::zeros(&[2, 2], Activation::Mish).unwrap();
        p.weights[0][(0, 0)] = 1.0;
        p.weights[0][(1, 1)] = 1.0;
        let x = Array2::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        assert_eq!(p.forward(&x).unwrap().as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn zero_weights_output_bias() {
        let mut p = MlpParams::zeros(&[3, 4, 2], Activation::Mish).unwrap();
        p.biases[1] = vec![0.25, -1.5];
        let x = Array2::from_vec(2, 3, vec![9.0, -3.0, 1.0, 0.0, 4.0, 7.0]).unwrap();
        let y = p.forward(&x).unwrap();
        assert_eq!(y.row(0), &[0.25, -1.5]);
        assert_eq!(y.row(1), &[0.25, -1.5]);
    }

    #[test]
    fn linear_backward_is_transpose() {
        let w = Array2::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        let mut p = MlpParams::zeros(&[3, 2], Activation::Mish).unwrap();
        p.weights[0] = w.clone();
        let x = Array2::from_vec(1, 3, vec![0.3, -0.2, 0.9]).unwrap();
        let g = Array2::from_vec(1, 2, vec![0.7, -1.1]).unwrap();
        let (_, dx) = p.backward(&x, &g).unwrap();
        for j in 0..3 {
            let want = w[(0, j)] * 0.7 + w[(1, j)] * -1.1;
            assert!((dx[(0, j)] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = MlpParams::init(&[4, 8, 4], Activation::Mish, &mut rng).unwrap();
        let x = Array2::filled(3, 4, 0.3);
        let (gp, dx) = p.backward(&x, &Array2::zeros(3, 4)).unwrap();
        assert!(gp.blocks().all(|b| b.iter().all(|&v| v == 0.0)));
        assert!(dx.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mish_derivative_matches_difference() {
        for &x in &[-5.0, -1.0, -0.1, 0.0, 0.4, 2.0, 8.0] {
            let h = 1e-6;
            let fd = (Activation::Mish.apply(x + h) - Activation::Mish.apply(x - h)) / (2.0 * h);
            assert!((fd - Activation::Mish.derivative(x)).abs() < 1e-8, "x = {x}");
        }
    }

    #[test]
    fn mish_matches_textbook_form() {
        for k in -400..=400 {
            let x = k as f64 * 0.1;
            let direct = x * softplus(x).tanh();
            assert!((Activation::Mish.apply(x) - direct).abs() < 1e-12, "x = {x}");
        }
    }

    #[test]
    fn input_dim_mismatch_errors() {
        let p = MlpParams::zeros(&[3, 2], Activation::Mish).unwrap();
        assert!(matches!(p.forward(&Array2::zeros(1, 4)), Err(Error::Shape { .. })));
    }
}
