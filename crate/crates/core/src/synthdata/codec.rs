use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, DcaError, Result};

/// Affine whitening map `z = E (x − m)` with inverse `x = D z + m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineCodec {
    pub mean: Vec<f64>,
    /// Row-major `d×d` encoder matrix.
    pub encoder: Vec<f64>,
    /// Row-major `d×d` decoder matrix.
    pub decoder: Vec<f64>,
    /// Max-norm roundtrip error bound recorded at fit time.
    pub tolerance: f64,
}

/// Maps between data space `x` and the latent space the SDE runs in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Codec {
    Identity { dim: usize },
    Affine(AffineCodec),
}

fn matvec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..d).map(|i| (0..d).map(|j| m[i * d + j] * v[j]).sum()).collect()
}

fn matvec_t(m: &[f64], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..d).map(|j| (0..d).map(|i| m[i * d + j] * v[i]).sum()).collect()
}

impl Codec {
    pub fn identity(dim: usize) -> Self {
        Codec::Identity { dim }
    }

    /// Fits a PCA-whitening codec to `points`.
    pub fn fit_affine(points: &[Vec<f64>]) -> Result<Self> {
        let first = points.first().ok_or(DcaError::EmptySet)?;
        let d = first.len();
        let n = points.len() as f64;
        let mut mean = vec![0.0; d];
        for p in points {
            check_dim(d, p.len())?;
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v / n;
            }
        }
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for p in points {
            let c = DVector::from_iterator(d, p.iter().zip(&mean).map(|(v, m)| v - m));
            cov += &c * c.transpose() / n;
        }
        // Ridge keeps degenerate inputs invertible.
        let ridge = 1e-9 * (cov.trace() / d as f64).max(1e-12);
        for i in 0..d {
            cov[(i, i)] += ridge;
        }
        let eig = SymmetricEigen::new(cov);
        let mut encoder = vec![0.0; d * d];
        let mut decoder = vec![0.0; d * d];
        for k in 0..d {
            let lam = eig.eigenvalues[k].max(ridge);
            let s = lam.sqrt();
            for i in 0..d {
                let u = eig.eigenvectors[(i, k)];
                encoder[k * d + i] = u / s;
                decoder[i * d + k] = u * s;
            }
        }
        let mut codec = AffineCodec { mean, encoder, decoder, tolerance: 0.0 };
        let mut max_err: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for p in points {
            let z = codec_encode(&codec, p);
            let back = codec_decode(&codec, &z);
            for (a, b) in back.iter().zip(p) {
                max_err = max_err.max((a - b).abs());
                scale = scale.max(b.abs());
            }
        }
        codec.tolerance = 4.0 * max_err.max(f64::EPSILON * scale.max(1.0));
        Ok(Codec::Affine(codec))
    }

    pub fn dim(&self) -> usize {
        match self {
            Codec::Identity { dim } => *dim,
            Codec::Affine(a) => a.mean.len(),
        }
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        Ok(match self {
            Codec::Identity { .. } => x.to_vec(),
            Codec::Affine(a) => codec_encode(a, x),
        })
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), z.len())?;
        Ok(match self {
            Codec::Identity { .. } => z.to_vec(),
            Codec::Affine(a) => codec_decode(a, z),
        })
    }

    pub fn roundtrip(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.decode(&self.encode(x)?)
    }

    /// Chain rule through the decoder: `∇_z = Dᵀ ∇_x`.
    pub fn pullback(&self, grad_x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), grad_x.len())?;
        Ok(match self {
            Codec::Identity { .. } => grad_x.to_vec(),
            Codec::Affine(a) => matvec_t(&a.decoder, grad_x),
        })
    }

    /// Roundtrip tolerance: zero for the identity codec.
    pub fn tolerance(&self) -> f64 {
        match self {
            Codec::Identity { .. } => 0.0,
            Codec::Affine(a) => a.tolerance,
        }
    }
}

fn codec_encode(a: &AffineCodec, x: &[f64]) -> Vec<f64> {
    let c: Vec<f64> = x.iter().zip(&a.mean).map(|(v, m)| v - m).collect();
    matvec(&a.encoder, &c)
}

fn codec_decode(a: &AffineCodec, z: &[f64]) -> Vec<f64> {
    let mut x = matvec(&a.decoder, z);
    for (v, m) in x.iter_mut().zip(&a.mean) {
        *v += m;
    }
    x
}
