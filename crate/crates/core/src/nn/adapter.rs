use serde::{Deserialize, Serialize};

use super::{gaussian_matrix, Activation, Gradients, Parameterized};
use crate::error::{ensure, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;

/// Bias-free residual map `A(z) = z + act(z·V₁)·V₂` on `R^d`.
///
/// `V₂` starts at zero, so a fresh adapter is the identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub v1: Matrix,
    pub v2: Matrix,
    pub act: Activation,
}

#[derive(Clone, Debug)]
pub struct AdapterCache {
    input: Matrix,
    pre: Matrix,
    hidden: Matrix,
    output: Matrix,
}

impl AdapterCache {
    pub fn output(&self) -> &Matrix {
        &self.output
    }
}

impl Adapter {
    pub fn new(d: usize, act: Activation, rng: &mut Rng) -> Self {
        Self {
            v1: gaussian_matrix(d, d, (1.0 / d as f64).sqrt(), rng),
            v2: Matrix::zeros(d, d),
            act,
        }
    }

    pub fn dim(&self) -> usize {
        self.v1.rows()
    }

    pub fn forward(&self, z: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(z)?.output)
    }

    pub fn forward_cached(&self, z: &Matrix) -> Result<AdapterCache> {
        ensure!(
            z.cols() == self.dim(),
            Shape,
            "adapter expects width {}, got {}",
            self.dim(),
            z.cols()
        );
        let pre = z.matmul(&self.v1)?;
        let hidden = pre.map(|x| self.act.apply(x));
        let output = hidden.matmul(&self.v2)?.add(z)?;
        Ok(AdapterCache {
            input: z.clone(),
            pre,
            hidden,
            output,
        })
    }

    /// Returns gradients ordered `[V₁, V₂]` and `∂L/∂z`.
    pub fn backward(&self, cache: &AdapterCache, d_out: &Matrix) -> Result<(Gradients, Matrix)> {
        ensure!(
            d_out.shape() == cache.output.shape(),
            Shape,
            "adapter output gradient {:?} vs {:?}",
            d_out.shape(),
            cache.output.shape()
        );
        let dv2 = cache.hidden.t_matmul(d_out)?;
        let d_hidden = d_out.matmul_t(&self.v2)?;
        let deriv = cache.pre.zip_with(&cache.hidden, |x, y| self.act.derivative(x, y))?;
        let d_pre = d_hidden.zip_with(&deriv, |a, b| a * b)?;
        let dv1 = cache.input.t_matmul(&d_pre)?;
        let dz = d_out.add(&d_pre.matmul_t(&self.v1)?)?;
        Ok((
            Gradients(vec![dv1.into_vec(), dv2.into_vec()]),
            dz,
        ))
    }
}

impl Parameterized for Adapter {
    fn params(&self) -> Vec<&[f64]> {
        vec![self.v1.as_slice(), self.v2.as_slice()]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.v1.as_mut_slice(), self.v2.as_mut_slice()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn fresh_adapter_is_identity() {
        let a = Adapter::new(5, Activation::Tanh, &mut seeded(3));
        let z = Matrix::from_fn(4, 5, |i, j| (i * 5 + j) as f64 * 0.1 - 1.0);
        assert_eq!(a.forward(&z).unwrap(), z);
    }

    #[test]
    fn nonzero_adapter_is_deterministic() {
        let mut a = Adapter::new(3, Activation::Tanh, &mut seeded(3));
        a.v2 = Matrix::from_fn(3, 3, |i, j| (i as f64 - j as f64) * 0.2);
        let z = Matrix::from_fn(2, 3, |i, j| (i + j) as f64 * 0.5);
        let o1 = a.forward(&z).unwrap();
        let o2 = a.forward(&z).unwrap();
        assert_eq!(o1, o2);
        assert_ne!(o1, z);
        assert!(a.forward(&Matrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = seeded(17);
        let mut a = Adapter::new(4, Activation::Tanh, &mut rng);
        a.v2 = gaussian_matrix(4, 4, 0.5, &mut rng);
        let z = gaussian_matrix(3, 4, 1.0, &mut rng);
        let target = gaussian_matrix(3, 4, 1.0, &mut rng);
        // L = ½‖A(z) − target‖²
        let loss = |a: &Adapter, z: &Matrix| -> f64 {
            let o = a.forward(z).unwrap();
            0.5 * o.sub(&target).unwrap().as_slice().iter().map(|x| x * x).sum::<f64>()
        };
        let cache = a.forward_cached(&z).unwrap();
        let d_out = cache.output().sub(&target).unwrap();
        let (g, dz) = a.backward(&cache, &d_out).unwrap();

        let h = 1e-5;
        for t in 0..2 {
            for idx in 0..a.params()[t].len() {
                let mut plus = a.clone();
                plus.params_mut()[t][idx] += h;
                let mut minus = a.clone();
                minus.params_mut()[t][idx] -= h;
                let fd = (loss(&plus, &z) - loss(&minus, &z)) / (2.0 * h);
                let an = g.0[t][idx];
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3), "tensor {t}[{idx}]: {an} vs {fd}");
            }
        }
        for idx in 0..z.as_slice().len() {
            let mut zp = z.clone();
            zp.as_mut_slice()[idx] += h;
            let mut zm = z.clone();
            zm.as_mut_slice()[idx] -= h;
            let fd = (loss(&a, &zp) - loss(&a, &zm)) / (2.0 * h);
            let an = dz.as_slice()[idx];
            assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3));
        }
    }
}
