//! Dense feed-forward networks with exact backpropagation and the Adamax optimizer.
//!
//! Hidden layers use the rectifier, the output layer is linear. Weights are
//! stored row-major as `outputs x inputs`; batched passes go through
//! `matrixmultiply::dgemm`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("input shape mismatch: expected {expected} values, got {got}")]
    InputShape { expected: usize, got: usize },
    #[error("network needs at least two layer sizes, got {0}")]
    TooFewLayers(usize),
    #[error("layer sizes must be positive")]
    ZeroWidth,
}

pub type Result<T> = std::result::Result<T, NnError>;

/// One fully connected layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    inputs: usize,
    outputs: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, weights: Vec<f64>, bias: Vec<f64>) -> Self {
        assert_eq!(weights.len(), inputs * outputs, "weight buffer size");
        assert_eq!(bias.len(), outputs, "bias buffer size");
        Self {
            inputs,
            outputs,
            weights,
            bias,
        }
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self::new(inputs, outputs, weights, vec![0.0; outputs])
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// Weight connecting input `i` to output `o`.
    pub fn weight(&self, o: usize, i: usize) -> f64 {
        self.weights[o * self.inputs + i]
    }

    // rows x inputs -> rows x outputs, bias broadcast
    fn affine(&self, rows: usize, x: &[f64], out: &mut [f64]) {
        for r in 0..rows {
            out[r * self.outputs..(r + 1) * self.outputs].copy_from_slice(&self.bias);
        }
        unsafe {
            matrixmultiply::dgemm(
                rows,
                self.inputs,
                self.outputs,
                1.0,
                x.as_ptr(),
                self.inputs as isize,
                1,
                self.weights.as_ptr(),
                1,
                self.inputs as isize,
                1.0,
                out.as_mut_ptr(),
                self.outputs as isize,
                1,
            );
        }
    }
}

/// Parameter gradients, same layout as the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    /// Flat view in the same order as [`Mlp::params`].
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            v.iter_mut().for_each(|g| *g *= factor);
        }
    }
}

/// Activations recorded by a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    rows: usize,
    // activations[0] is the input; activations[k] is the output of layer k-1
    activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Network outputs, row-major `rows x output_dim`.
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache holds the input at least")
    }
}

/// Multilayer perceptron: rectifier between layers, identity on the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        Self::check_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|w| Dense::glorot(w[0], w[1], rng))
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        Self::check_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|w| Dense::new(w[0], w[1], vec![0.0; w[0] * w[1]], vec![0.0; w[1]]))
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(NnError::TooFewLayers(layers.len()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(NnError::InputShape {
                    expected: pair[0].outputs,
                    got: pair[1].inputs,
                });
            }
        }
        Ok(Self { layers })
    }

    fn check_sizes(sizes: &[usize]) -> Result<()> {
        if sizes.len() < 2 {
            return Err(NnError::TooFewLayers(sizes.len()));
        }
        if sizes.contains(&0) {
            return Err(NnError::ZeroWidth);
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(|l| l.outputs));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// All parameters, layer by layer (weights then bias).
    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    /// SHA-256 over the little-endian bytes of every parameter.
    pub fn params_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for p in self.params() {
            hasher.update(p.to_le_bytes());
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(f64::is_finite)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let cache = self.forward_batch(x, 1)?;
        Ok(cache.output().to_vec())
    }

    /// Forward pass over `rows` inputs laid out row-major in `xs`.
    pub fn forward_batch(&self, xs: &[f64], rows: usize) -> Result<ForwardCache> {
        let expected = rows * self.input_dim();
        if xs.len() != expected {
            return Err(NnError::InputShape {
                expected,
                got: xs.len(),
            });
        }
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(xs.to_vec());
        for (k, layer) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; rows * layer.outputs];
            layer.affine(rows, &activations[k], &mut out);
            if k != last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            activations.push(out);
        }
        Ok(ForwardCache { rows, activations })
    }

    /// Gradients of `sum(upstream * output)` with respect to every parameter,
    /// accumulated over the rows of the cache.
    pub fn backward_batch(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<Gradients> {
        let rows = cache.rows;
        let expected = rows * self.output_dim();
        if upstream.len() != expected {
            return Err(NnError::InputShape {
                expected,
                got: upstream.len(),
            });
        }
        let mut grads = Gradients::zeros_like(self);
        let mut delta = upstream.to_vec();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let input = &cache.activations[k];
            for r in 0..rows {
                let row = &delta[r * layer.outputs..(r + 1) * layer.outputs];
                for (b, d) in grads.biases[k].iter_mut().zip(row) {
                    *b += d;
                }
            }
            unsafe {
                // dW = delta^T * input
                matrixmultiply::dgemm(
                    layer.outputs,
                    rows,
                    layer.inputs,
                    1.0,
                    delta.as_ptr(),
                    1,
                    layer.outputs as isize,
                    input.as_ptr(),
                    layer.inputs as isize,
                    1,
                    0.0,
                    grads.weights[k].as_mut_ptr(),
                    layer.inputs as isize,
                    1,
                );
            }
            if k == 0 {
                break;
            }
            let mut next = vec![0.0; rows * layer.inputs];
            unsafe {
                // d(input) = delta * W
                matrixmultiply::dgemm(
                    rows,
                    layer.outputs,
                    layer.inputs,
                    1.0,
                    delta.as_ptr(),
                    layer.outputs as isize,
                    1,
                    layer.weights.as_ptr(),
                    layer.inputs as isize,
                    1,
                    0.0,
                    next.as_mut_ptr(),
                    layer.inputs as isize,
                    1,
                );
            }
            // rectifier derivative, taken as 0 at the kink
            for (d, a) in next.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *d = 0.0;
                }
            }
            delta = next;
        }
        Ok(grads)
    }

    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<Gradients> {
        let cache = self.forward_batch(x, 1)?;
        self.backward_batch(&cache, upstream)
    }
}

/// Adamax moment estimates (Kingma & Ba's infinity-norm Adam variant).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adamax {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first_moment: Vec<f64>,
    inf_norm: Vec<f64>,
    step_count: u64,
}

impl Adamax {
    pub fn new(param_count: usize) -> Self {
        Self::with_betas(param_count, 0.9, 0.999, 1e-7)
    }

    pub fn with_betas(param_count: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            first_moment: vec![0.0; param_count],
            inf_norm: vec![0.0; param_count],
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first_moment
    }

    pub fn inf_norm(&self) -> &[f64] {
        &self.inf_norm
    }

    /// One descent step on `net` along `grads`.
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients, lr: f64) {
        assert_eq!(
            self.first_moment.len(),
            net.param_count(),
            "optimizer state does not match the network"
        );
        self.step_count += 1;
        let step_size = lr / (1.0 - self.beta1.powi(self.step_count.min(i32::MAX as u64) as i32));
        let (beta1, beta2, eps) = (self.beta1, self.beta2, self.eps);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], u: &mut [f64]| {
            for (((p, &g), m), u) in p.iter_mut().zip(g).zip(m).zip(u) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                // subnormal moments flush to zero
                if m.abs() < f64::MIN_POSITIVE {
                    *m = 0.0;
                }
                *u = (beta2 * *u).max(g.abs());
                // parameters with a zero first moment stay put
                *p -= if *m != 0.0 { step_size * *m / (*u + eps) } else { 0.0 };
            }
        };
        let mut offset = 0;
        for (k, layer) in net.layers.iter_mut().enumerate() {
            for (vals, g) in [
                (&mut layer.weights, &grads.weights[k]),
                (&mut layer.bias, &grads.biases[k]),
            ] {
                let end = offset + vals.len();
                update(
                    vals,
                    g,
                    &mut self.first_moment[offset..end],
                    &mut self.inf_norm[offset..end],
                );
                offset = end;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // naive triple loop, written independently of the dgemm path
    fn oracle_forward(net: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let n = net.layers().len();
        for (k, l) in net.layers().iter().enumerate() {
            let mut z = vec![0.0; l.outputs()];
            for o in 0..l.outputs() {
                let mut s = l.bias()[o];
                for i in 0..l.inputs() {
                    s += l.weight(o, i) * a[i];
                }
                z[o] = if k + 1 < n { s.max(0.0) } else { s };
            }
            a = z;
        }
        a
    }

    #[test]
    fn identity_weights() {
        let hidden = Dense::new(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0; 2]);
        let out = Dense::new(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0; 2]);
        let net = Mlp::from_layers(vec![hidden, out]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0]).unwrap(), vec![1.0, 0.0]);

        let linear = Mlp::from_layers(vec![Dense::new(
            2,
            2,
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.0; 2],
        )])
        .unwrap();
        assert_eq!(linear.forward(&[1.0, -2.0]).unwrap(), vec![1.0, -2.0]);
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = Mlp::zeros(&[3, 5, 2]).unwrap();
        assert_eq!(net.forward(&[0.3, -7.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn forward_matches_matmul_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = Mlp::new(&[4, 8, 8, 8, 3], &mut rng).unwrap();
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let got = net.forward(&x).unwrap();
        let want = oracle_forward(&net, &x);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[5, 16, 16, 2], &mut rng).unwrap();
        let x = [0.1, 0.2, -0.3, 4.0, 0.0];
        let a = net.forward(&x).unwrap();
        let b = net.clone().forward(&x).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn input_shape_is_checked() {
        let net = Mlp::zeros(&[3, 2]).unwrap();
        assert_eq!(
            net.forward(&[1.0]),
            Err(NnError::InputShape {
                expected: 3,
                got: 1
            })
        );
        assert!(net.backward(&[1.0, 2.0, 3.0], &[1.0]).is_err());
        assert!(Mlp::zeros(&[3]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::new(&[3, 6, 2], &mut rng).unwrap();
        let g = net.backward(&[1.0, 2.0, 3.0], &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|v| v == 0.0));
    }

    #[test]
    fn scalar_chain_rule() {
        let net = Mlp::from_layers(vec![Dense::new(1, 1, vec![0.7], vec![0.0])]).unwrap();
        let g = net.backward(&[2.0], &[1.0]).unwrap();
        assert_eq!(g.weights[0], vec![2.0]);
        assert_eq!(g.biases[0], vec![1.0]);
    }

    #[test]
    fn hidden_activations_are_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = Mlp::new(&[4, 10, 10, 3], &mut rng).unwrap();
        let xs: Vec<f64> = (0..40).map(|_| rng.random_range(-3.0..3.0)).collect();
        let cache = net.forward_batch(&xs, 10).unwrap();
        for act in &cache.activations[1..cache.activations.len() - 1] {
            assert!(act.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn adamax_zero_gradient_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Mlp::new(&[2, 3, 1], &mut rng).unwrap();
        let before = net.clone();
        let mut opt = Adamax::new(net.param_count());
        let grads = Gradients::zeros_like(&net);
        opt.step(&mut net, &grads, 0.005);
        assert_eq!(net, before);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adamax_hand_evaluated_step() {
        let mut net = Mlp::from_layers(vec![Dense::new(1, 1, vec![0.0], vec![0.0])]).unwrap();
        let mut opt = Adamax::with_betas(2, 0.9, 0.999, 0.0);
        let grads = Gradients {
            weights: vec![vec![1.0]],
            biases: vec![vec![0.0]],
        };
        opt.step(&mut net, &grads, 0.005);
        assert!((opt.first_moment()[0] - 0.1).abs() < 1e-15);
        assert_eq!(opt.inf_norm()[0], 1.0);
        assert!((net.layers()[0].weights()[0] + 0.005).abs() < 1e-15);
    }

    #[test]
    fn adamax_repeated_gradient_keeps_inf_norm() {
        let mut net = Mlp::from_layers(vec![Dense::new(1, 1, vec![0.0], vec![0.0])]).unwrap();
        let mut opt = Adamax::with_betas(2, 0.9, 1.0, 1e-7);
        let grads = Gradients {
            weights: vec![vec![0.5]],
            biases: vec![vec![0.0]],
        };
        let mut prev = 0.0;
        for _ in 0..5 {
            opt.step(&mut net, &grads, 0.01);
            let w = net.layers()[0].weights()[0];
            assert_eq!(opt.inf_norm()[0], 0.5);
            assert!(w < prev);
            prev = w;
        }
    }
}
