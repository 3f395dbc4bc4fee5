//! Pose prior decoders mapping a low-dimensional embedding to body-joint
//! rotations.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Differentiable map from an embedding `eta` to stacked axis-angle
/// rotations of the decoded joints. `decode(0)` must be a plausible pose.
pub trait PriorDecoder {
    fn embedding_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn decode(&self, eta: &[f64]) -> Vec<f64>;
    /// Vector-Jacobian product: `d_out -> d_eta`.
    fn backward(&self, eta: &[f64], d_out: &[f64]) -> Vec<f64>;
    /// An embedding whose decode is close to `rotations`, used to start a fit.
    fn encode(&self, rotations: &[f64]) -> Vec<f64>;
}

/// `decode(eta) = M eta` with orthonormal rows, so `decode(0)` is the rest
/// pose and `encode` is the exact pseudo-inverse `M^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDecoder {
    /// `output_dim x embedding_dim`.
    matrix: DMatrix<f64>,
}

impl LinearDecoder {
    pub fn random_orthogonal(embedding_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        if output_dim > embedding_dim {
            return Err(Error::Validation(format!(
                "prior embedding ({embedding_dim}) smaller than decoded pose ({output_dim})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(embedding_dim, output_dim, |_, _| StandardNormal.sample(&mut rng));
        let q = g.qr().q();
        Ok(LinearDecoder { matrix: q.transpose() })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

impl PriorDecoder for LinearDecoder {
    fn embedding_dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn output_dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn decode(&self, eta: &[f64]) -> Vec<f64> {
        (0..self.matrix.nrows())
            .map(|r| self.matrix.row(r).iter().zip(eta).map(|(m, e)| m * e).sum())
            .collect()
    }

    fn backward(&self, _eta: &[f64], d_out: &[f64]) -> Vec<f64> {
        (0..self.matrix.ncols())
            .map(|c| self.matrix.column(c).iter().zip(d_out).map(|(m, g)| m * g).sum())
            .collect()
    }

    fn encode(&self, rotations: &[f64]) -> Vec<f64> {
        self.backward(&[], rotations)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_orthonormal_and_deterministic() {
        let d = LinearDecoder::random_orthogonal(32, 6, 4).unwrap();
        let mmt = d.matrix() * d.matrix().transpose();
        assert!((mmt - DMatrix::identity(6, 6)).abs().max() < 1e-12);
        assert_eq!(d, LinearDecoder::random_orthogonal(32, 6, 4).unwrap());
        assert!(d.decode(&[0.0; 32]).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn encode_inverts_decode() {
        let d = LinearDecoder::random_orthogonal(12, 6, 1).unwrap();
        let theta = [0.1, -0.2, 0.3, 0.05, 0.0, -0.4];
        let back = d.decode(&d.encode(&theta));
        for (a, b) in back.iter().zip(theta) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn too_small_embedding_rejected() {
        assert!(LinearDecoder::random_orthogonal(3, 6, 0).is_err());
    }
}
