use serde::{Deserialize, Serialize};

use super::{gaussian_matrix, Activation, Gradients, Parameterized};
use crate::error::{ensure, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;

/// `y = act(x·W + b)` with `W` of shape `in×out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub w: Matrix,
    pub b: Vec<f64>,
    pub act: Activation,
}

impl DenseLayer {
    pub fn new(input: usize, output: usize, act: Activation, rng: &mut Rng) -> Self {
        Self {
            w: gaussian_matrix(input, output, (1.0 / input as f64).sqrt(), rng),
            b: vec![0.0; output],
            act,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.cols()
    }
}

/// Feature extractor `f(·; θ)`: a stack of dense layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    layers: Vec<DenseLayer>,
}

/// Activations recorded by [`DenseNet::forward_cached`], needed for the backward pass.
#[derive(Clone, Debug)]
pub struct DenseCache {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    outputs: Vec<Matrix>,
}

impl DenseCache {
    pub fn output(&self) -> &Matrix {
        self.outputs.last().expect("non-empty network")
    }
}

impl DenseNet {
    /// Hidden layers use `hidden_act`; the last layer maps to `output_dim` with `output_act`.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        hidden_act: Activation,
        output_act: Activation,
        rng: &mut Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input_dim;
        for &h in hidden {
            layers.push(DenseLayer::new(prev, h, hidden_act, rng));
            prev = h;
        }
        layers.push(DenseLayer::new(prev, output_dim, output_act, rng));
        Self { layers }
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        ensure!(!layers.is_empty(), InvalidArgument, "network needs at least one layer");
        for pair in layers.windows(2) {
            ensure!(
                pair[0].out_dim() == pair[1].in_dim(),
                Shape,
                "layer widths do not chain: {} -> {}",
                pair[0].out_dim(),
                pair[1].in_dim()
            );
        }
        for l in &layers {
            ensure!(l.b.len() == l.out_dim(), Shape, "bias length {} for width {}", l.b.len(), l.out_dim());
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(x)?.outputs.pop().expect("non-empty"))
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<DenseCache> {
        ensure!(
            x.cols() == self.input_dim(),
            Shape,
            "input width {} does not match network input {}",
            x.cols(),
            self.input_dim()
        );
        let mut cache = DenseCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
            outputs: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.clone();
        for layer in &self.layers {
            let mut pre = h.matmul(&layer.w)?;
            pre.add_row_broadcast(&layer.b)?;
            let out = pre.map(|v| layer.act.apply(v));
            cache.inputs.push(h);
            cache.pre.push(pre);
            h = out.clone();
            cache.outputs.push(out);
        }
        Ok(cache)
    }

    /// Given `∂L/∂output`, returns parameter gradients (ordered like
    /// [`Parameterized::params`]) and `∂L/∂input`.
    pub fn backward(&self, cache: &DenseCache, d_out: &Matrix) -> Result<(Gradients, Matrix)> {
        ensure!(
            d_out.shape() == cache.output().shape(),
            Shape,
            "output gradient {:?} vs output {:?}",
            d_out.shape(),
            cache.output().shape()
        );
        let n_layers = self.layers.len();
        let mut grads = vec![Vec::new(); 2 * n_layers];
        let mut delta = d_out.clone();
        for li in (0..n_layers).rev() {
            let layer = &self.layers[li];
            let d_pre = if layer.act == super::Activation::Identity {
                delta
            } else {
                let deriv = cache.pre[li].zip_with(&cache.outputs[li], |x, y| layer.act.derivative(x, y))?;
                delta.zip_with(&deriv, |a, b| a * b)?
            };
            grads[2 * li] = cache.inputs[li].t_matmul(&d_pre)?.into_vec();
            grads[2 * li + 1] = d_pre.column_sums();
            delta = d_pre.matmul_t(&layer.w)?;
        }
        Ok((Gradients(grads), delta))
    }
}

impl Parameterized for DenseNet {
    fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.as_slice(), l.b.as_slice()])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.w.as_mut_slice(), l.b.as_mut_slice()])
            .collect()
    }
}
