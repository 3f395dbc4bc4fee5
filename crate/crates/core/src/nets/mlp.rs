use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// One affine layer `y = act(W x + b)` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Per-layer inputs and outputs of a batched forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    outputs: Vec<Array2<f64>>,
}

/// Gradients with the same layout as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        MlpGrads {
            weights: mlp.layers.iter().map(|l| Array2::zeros(l.weight.raw_dim())).collect(),
            biases: mlp.layers.iter().map(|l| Array1::zeros(l.bias.raw_dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    /// Flat view in parameter order (per layer: weights row-major, then bias).
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| *v == 0.0))
            && self.biases.iter().all(|b| b.iter().all(|v| *v == 0.0))
    }
}

impl Mlp {
    /// Build from explicit layers; consecutive dimensions must agree.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Validation("mlp needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.nrows() {
                return Err(Error::dimension(format!("mlp layer {i} bias"), l.weight.nrows(), l.bias.len()));
            }
            if i > 0 && layers[i - 1].weight.nrows() != l.weight.ncols() {
                return Err(Error::dimension(
                    format!("mlp layer {i} input"),
                    layers[i - 1].weight.nrows(),
                    l.weight.ncols(),
                ));
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("mlp layer {i} has non-finite parameters")));
            }
        }
        Ok(Mlp { layers })
    }

    /// Randomly initialized network. `widths` lists every layer dimension
    /// including input and output; `activations` has one entry per layer.
    /// With `zero_last` the final layer starts at zero so the network
    /// outputs exactly zero until trained.
    pub fn new<R: Rng>(widths: &[usize], activations: &[Activation], zero_last: bool, rng: &mut R) -> Self {
        assert_eq!(widths.len(), activations.len() + 1, "one activation per layer");
        let n = activations.len();
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (widths[i], widths[i + 1]);
                let bound = match activations[i] {
                    Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                    _ => (6.0 / (fan_in + fan_out) as f64).sqrt(),
                };
                let weight = if zero_last && i == n - 1 {
                    Array2::zeros((fan_out, fan_in))
                } else {
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..bound))
                };
                Layer {
                    weight,
                    bias: Array1::zeros(fan_out),
                    activation: activations[i],
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.nrows())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Mutable parameter slices in the same order as [`MlpGrads::flat`].
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn grad_slices(grads: &MlpGrads) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for (w, b) in grads.weights.iter().zip(&grads.biases) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::dimension("mlp input", self.input_dim(), cols));
        }
        Ok(())
    }

    fn layer_forward(layer: &Layer, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&layer.weight.t());
        z += &layer.bias;
        let act = layer.activation;
        if act != Activation::Identity {
            z.mapv_inplace(|v| act.apply(v));
        }
        z
    }

    /// Batched forward pass; rows are samples.
    pub fn forward(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(input.ncols())?;
        let mut x = Self::layer_forward(&self.layers[0], &input);
        for layer in &self.layers[1..] {
            x = Self::layer_forward(layer, &x.view());
        }
        Ok(x)
    }

    pub fn forward_cached(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        self.check_input(input.ncols())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut x = input.to_owned();
        for layer in &self.layers {
            let y = Self::layer_forward(layer, &x.view());
            inputs.push(x);
            x = y.clone();
            outputs.push(y);
        }
        Ok((x, MlpCache { inputs, outputs }))
    }

    /// Single-sample forward pass.
    pub fn forward_one(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Validation(format!("mlp input: {e}")))?;
        Ok(self.forward(x)?.into_raw_vec_and_offset().0)
    }

    /// Reverse pass: parameter gradients summed over the batch and the
    /// gradient with respect to the input rows.
    pub fn backward(&self, cache: &MlpCache, output_grad: ArrayView2<f64>) -> (MlpGrads, Array2<f64>) {
        let n = self.layers.len();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut grad = output_grad.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let act = layer.activation;
            if act != Activation::Identity {
                grad.zip_mut_with(&cache.outputs[i], |g, &y| *g *= act.derivative_from_output(y));
            }
            weights.push(grad.t().dot(&cache.inputs[i]));
            biases.push(grad.sum_axis(Axis(0)));
            grad = grad.dot(&layer.weight);
        }
        weights.reverse();
        biases.reverse();
        (MlpGrads { weights, biases }, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(acts: &[Activation], widths: &[usize], seed: u64) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Mlp::new(widths, acts, false, &mut rng);
        for l in m.layers_mut() {
            l.bias.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        }
        m
    }

    #[test]
    fn zero_weights_return_bias() {
        let m = Mlp::from_layers(vec![Layer {
            weight: Array2::zeros((2, 3)),
            bias: array![0.5, -1.5],
            activation: Activation::Identity,
        }])
        .unwrap();
        assert_eq!(m.forward_one(&[1.0, 2.0, 3.0]).unwrap(), vec![0.5, -1.5]);
    }

    #[test]
    fn single_linear_layer_is_matrix_product() {
        let w = array![[1.0, 2.0], [3.0, 4.0], [-1.0, 0.5]];
        let m = Mlp::from_layers(vec![Layer {
            weight: w,
            bias: Array1::zeros(3),
            activation: Activation::Identity,
        }])
        .unwrap();
        assert_eq!(m.forward_one(&[2.0, -1.0]).unwrap(), vec![0.0, 2.0, -2.5]);
    }

    #[test]
    fn mismatched_dims_rejected() {
        let bad = Mlp::from_layers(vec![
            Layer {
                weight: Array2::zeros((4, 3)),
                bias: Array1::zeros(4),
                activation: Activation::Relu,
            },
            Layer {
                weight: Array2::zeros((2, 5)),
                bias: Array1::zeros(2),
                activation: Activation::Identity,
            },
        ]);
        assert!(bad.is_err());
        let m = net(&[Activation::Tanh], &[3, 2], 1);
        assert!(m.forward_one(&[1.0]).is_err());
    }

    #[test]
    fn two_layer_matches_naive_loops() {
        let m = net(&[Activation::Tanh, Activation::Identity], &[4, 6, 3], 2);
        let x = [0.3, -0.7, 1.1, 0.05];
        let out = m.forward_one(&x).unwrap();
        let mut h = vec![0.0; 6];
        let l0 = &m.layers()[0];
        for i in 0..6 {
            let mut s = l0.bias[i];
            for j in 0..4 {
                s += l0.weight[[i, j]] * x[j];
            }
            h[i] = s.tanh();
        }
        let l1 = &m.layers()[1];
        for i in 0..3 {
            let mut s = l1.bias[i];
            for j in 0..6 {
                s += l1.weight[[i, j]] * h[j];
            }
            assert!((out[i] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_layer_weight_gradient_is_outer_product() {
        let m = net(&[Activation::Identity], &[3, 2], 3);
        let x = array![[0.5, -1.0, 2.0]];
        let (_, cache) = m.forward_cached(x.view()).unwrap();
        let g = array![[1.5, -0.25]];
        let (grads, _) = m.backward(&cache, g.view());
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(grads.weights[0][[i, j]], g[[0, i]] * x[[0, j]]);
            }
        }
    }

    #[test]
    fn zero_output_grad_gives_zero() {
        let m = net(&[Activation::Relu, Activation::Tanh, Activation::Identity], &[3, 5, 4, 2], 4);
        let x = array![[0.1, 0.2, 0.3], [-0.4, 0.5, -0.6]];
        let (_, cache) = m.forward_cached(x.view()).unwrap();
        let (grads, dx) = m.backward(&cache, Array2::zeros((2, 2)).view());
        assert!(grads.is_zero());
        assert!(dx.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradients_match_central_differences() {
        let acts = [Activation::Tanh, Activation::Relu, Activation::Identity];
        let mut m = net(&acts, &[3, 7, 5, 2], 5);
        let x = array![[0.2, -0.3, 0.9], [1.1, 0.4, -0.8], [-0.5, -0.2, 0.1]];
        let upstream = array![[0.7, -1.2], [0.3, 0.5], [-0.9, 0.2]];
        let loss = |m: &Mlp, x: &Array2<f64>| (m.forward(x.view()).unwrap() * &upstream).sum();
        let (_, cache) = m.forward_cached(x.view()).unwrap();
        let (grads, dx) = m.backward(&cache, upstream.view());
        let analytic = grads.flat();
        let h = 1e-5;
        let mut fd = Vec::new();
        let count = m.num_params();
        for idx in 0..count {
            let bump = |m: &mut Mlp, delta: f64| {
                let mut seen = 0;
                for s in m.param_slices_mut() {
                    if idx < seen + s.len() {
                        s[idx - seen] += delta;
                        return;
                    }
                    seen += s.len();
                }
            };
            bump(&mut m, h);
            let fp = loss(&m, &x);
            bump(&mut m, -2.0 * h);
            let fm = loss(&m, &x);
            bump(&mut m, h);
            fd.push((fp - fm) / (2.0 * h));
        }
        let diff: f64 = analytic.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff / norm < 1e-6, "relative error {}", diff / norm);

        for r in 0..3 {
            for c in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[[r, c]] += h;
                xm[[r, c]] -= h;
                let f = (loss(&m, &xp) - loss(&m, &xm)) / (2.0 * h);
                assert!((dx[[r, c]] - f).abs() < 1e-7 * (1.0 + f.abs()));
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let m = net(&[Activation::Relu, Activation::Identity], &[4, 16, 3], 6);
        let x = Array2::from_shape_fn((8, 4), |(i, j)| (i * 4 + j) as f64 * 0.1 - 1.0);
        assert_eq!(m.forward(x.view()).unwrap(), m.forward(x.view()).unwrap());
    }
}
