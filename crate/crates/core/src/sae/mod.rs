// SPDX-License-Identifier: MIT OR Apache-2.0

//! JumpReLU sparse autoencoders attached to the residual stream.
//!
//! `W_enc` is `m × n` and `W_dec` is `n × m`, where `n` is the model width
//! and `m` the number of features. Transposed copies are kept so that
//! encoding and decoding a batch of rows are plain row-times-matrix
//! products.

mod container;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{rows_times, Matrix};

pub use container::{load_sae, save_sae, SAE_BLOB, SAE_MANIFEST};
pub use synthetic::{build_synthetic_sae, PlantedFeature, SaeSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    layer: usize,
    w_enc: Matrix,
    b_enc: Vec<f32>,
    theta: Vec<f32>,
    w_dec: Matrix,
    b_dec: Vec<f32>,
    enc_t: Matrix,
    dec_t: Matrix,
}

/// Encoded activations of one residual vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Activations {
    pub values: Vec<f32>,
    pub layer: usize,
    pub position: usize,
}

impl Activations {
    /// Largest activation, 0 for an all-zero vector.
    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }
}

impl SaeParams {
    pub fn new(
        layer: usize,
        w_enc: Matrix,
        b_enc: Vec<f32>,
        theta: Vec<f32>,
        w_dec: Matrix,
        b_dec: Vec<f32>,
    ) -> Result<Self> {
        let (m, n) = w_enc.shape();
        if m == 0 || n == 0 {
            return Err(Error::Shape(
                "SAE needs at least one feature and one input dimension".into(),
            ));
        }
        if w_dec.shape() != (n, m) {
            return Err(Error::Shape(format!(
                "W_dec is {:?}, expected {n}x{m} to match W_enc {m}x{n}",
                w_dec.shape()
            )));
        }
        for (name, v, len) in [("b_enc", &b_enc, m), ("theta", &theta, m), ("b_dec", &b_dec, n)] {
            if v.len() != len {
                return Err(Error::Shape(format!("{name} has length {}, expected {len}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("SAE parameters"));
            }
        }
        if theta.iter().any(|&t| t < 0.0) {
            return Err(Error::Range("JumpReLU thresholds must be non-negative".into()));
        }
        let enc_t = w_enc.transpose();
        let dec_t = w_dec.transpose();
        Ok(Self {
            layer,
            w_enc,
            b_enc,
            theta,
            w_dec,
            b_dec,
            enc_t,
            dec_t,
        })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn n_features(&self) -> usize {
        self.w_enc.rows()
    }

    pub fn d_model(&self) -> usize {
        self.w_enc.cols()
    }

    pub fn w_enc(&self) -> &Matrix {
        &self.w_enc
    }

    pub fn b_enc(&self) -> &[f32] {
        &self.b_enc
    }

    pub fn theta(&self) -> &[f32] {
        &self.theta
    }

    pub fn w_dec(&self) -> &Matrix {
        &self.w_dec
    }

    pub fn b_dec(&self) -> &[f32] {
        &self.b_dec
    }

    fn check_width(&self, len: usize, what: &str) -> Result<()> {
        if len != self.d_model() {
            return Err(Error::Shape(format!(
                "{what} has width {len}, SAE expects {}",
                self.d_model()
            )));
        }
        Ok(())
    }

    /// Pre-activations `W_enc x + b_enc` for every row of `x`.
    pub fn pre_activations(&self, x: &Matrix) -> Result<Matrix> {
        self.check_width(x.cols(), "input")?;
        let m = self.n_features();
        let mut z = vec![0.0; x.rows() * m];
        rows_times(x.data(), x.rows(), &self.enc_t, &mut z);
        for row in z.chunks_exact_mut(m) {
            row.iter_mut().zip(&self.b_enc).for_each(|(v, b)| *v += b);
        }
        Matrix::new(x.rows(), m, z)
    }

    /// JumpReLU activations for every row of `x`.
    pub fn encode_rows(&self, x: &Matrix) -> Result<Matrix> {
        let mut z = self.pre_activations(x)?;
        let m = self.n_features();
        for row in z.data_mut().chunks_exact_mut(m) {
            for (v, &t) in row.iter_mut().zip(&self.theta) {
                if *v <= t {
                    *v = 0.0;
                }
            }
        }
        Ok(z)
    }

    /// `W_dec a + b_dec` for every row of activations `a`.
    pub fn decode_rows(&self, a: &Matrix) -> Result<Matrix> {
        if a.cols() != self.n_features() {
            return Err(Error::Shape(format!(
                "activations have {} features, SAE has {}",
                a.cols(),
                self.n_features()
            )));
        }
        let n = self.d_model();
        let mut out = vec![0.0; a.rows() * n];
        rows_times(a.data(), a.rows(), &self.dec_t, &mut out);
        for row in out.chunks_exact_mut(n) {
            row.iter_mut().zip(&self.b_dec).for_each(|(v, b)| *v += b);
        }
        let out = Matrix::new(a.rows(), n, out)?;
        out.ensure_finite("SAE decode")?;
        Ok(out)
    }

    pub fn encode(&self, x: &[f32]) -> Result<Activations> {
        self.check_width(x.len(), "input")?;
        let a = self.encode_rows(&Matrix::new(1, x.len(), x.to_vec())?)?;
        Ok(Activations {
            values: a.into_data(),
            layer: self.layer,
            position: 0,
        })
    }

    pub fn decode(&self, a: &Activations) -> Result<Vec<f32>> {
        let m = a.values.len();
        Ok(self.decode_rows(&Matrix::new(1, m, a.values.clone())?)?.into_data())
    }

    /// Decoder column `i`.
    pub fn feature_direction(&self, i: usize) -> Result<Vec<f32>> {
        self.check_feature(i)?;
        Ok(self.dec_t.row(i).to_vec())
    }

    pub(crate) fn direction_ref(&self, i: usize) -> &[f32] {
        self.dec_t.row(i)
    }

    pub fn check_feature(&self, i: usize) -> Result<()> {
        if i >= self.n_features() {
            return Err(Error::Range(format!("feature {i} >= {} features", self.n_features())));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    fn random_sae(m: usize, n: usize, seed: u64, theta: f32) -> SaeParams {
        let mut rng = RngState::new(seed);
        let mut g = |len: usize| (0..len).map(|_| rng.next_normal() as f32).collect::<Vec<_>>();
        let w_enc = Matrix::new(m, n, g(m * n)).unwrap();
        let b_enc = g(m);
        let w_dec = Matrix::new(n, m, g(n * m)).unwrap();
        let b_dec = g(n);
        SaeParams::new(2, w_enc, b_enc, vec![theta; m], w_dec, b_dec).unwrap()
    }

    #[test]
    fn below_threshold_is_zero() {
        let sae = random_sae(6, 4, 0, 1e6);
        let a = sae.encode(&[1.0, -2.0, 0.5, 3.0]).unwrap();
        assert!(a.values.iter().all(|&v| v == 0.0));
        assert_eq!(a.max(), 0.0);
    }

    #[test]
    fn relu_case() {
        let w_enc = Matrix::new(2, 1, vec![-1.0, 2.0]).unwrap();
        let w_dec = Matrix::new(1, 2, vec![1.0, 1.0]).unwrap();
        let sae = SaeParams::new(0, w_enc, vec![0.0; 2], vec![0.0; 2], w_dec, vec![0.0]).unwrap();
        assert_eq!(sae.encode(&[1.0]).unwrap().values, vec![0.0, 2.0]);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn encode_matches_scalar_loop() {
        let sae = random_sae(12, 5, 0, 0.3);
        let mut rng = RngState::new(1);
        let x: Vec<f32> = (0..5).map(|_| rng.next_normal() as f32).collect();
        let got = sae.encode(&x).unwrap().values;
        for j in 0..12 {
            let mut z = f64::from(sae.b_enc()[j]);
            for k in 0..5 {
                z += f64::from(sae.w_enc().get(j, k)) * f64::from(x[k]);
            }
            let want = if z > 0.3 { z as f32 } else { 0.0 };
            assert!(
                (got[j] - want).abs() <= 1e-6 * want.abs().max(1.0),
                "{j}: {} vs {want}",
                got[j]
            );
        }
    }

    #[test]
    fn decode_zero_and_units() {
        let sae = random_sae(7, 3, 4, 0.0);
        let zero = Activations {
            values: vec![0.0; 7],
            layer: 2,
            position: 0,
        };
        assert_eq!(sae.decode(&zero).unwrap(), sae.b_dec().to_vec());
        for j in 0..7 {
            let mut unit = zero.clone();
            unit.values[j] = 1.0;
            let got = sae.decode(&unit).unwrap();
            let dir = sae.feature_direction(j).unwrap();
            for k in 0..3 {
                assert!((got[k] - (sae.w_dec().get(k, j) + sae.b_dec()[k])).abs() < 1e-6);
                assert!((got[k] - sae.b_dec()[k] - dir[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn decode_is_affine() {
        let sae = random_sae(9, 4, 5, 0.0);
        let mut rng = RngState::new(6);
        for _ in 0..50 {
            let mut draw = || Activations {
                values: (0..9).map(|_| rng.next_f64() as f32 * 3.0).collect(),
                layer: 2,
                position: 0,
            };
            let (a, b) = (draw(), draw());
            let sum = Activations {
                values: a.values.iter().zip(&b.values).map(|(x, y)| x + y).collect(),
                ..a.clone()
            };
            let (da, db, ds) = (
                sae.decode(&a).unwrap(),
                sae.decode(&b).unwrap(),
                sae.decode(&sum).unwrap(),
            );
            for k in 0..4 {
                assert!((ds[k] - (da[k] + db[k] - sae.b_dec()[k])).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn feature_range_and_shapes() {
        let sae = random_sae(4, 3, 0, 0.0);
        assert_eq!(sae.feature_direction(0).unwrap(), sae.w_dec().column(0));
        assert!(matches!(sae.feature_direction(4), Err(Error::Range(_))));
        assert!(matches!(sae.encode(&[1.0, 2.0]), Err(Error::Shape(_))));
        let bad = SaeParams::new(
            0,
            Matrix::zeros(2, 3),
            vec![0.0; 2],
            vec![-1.0; 2],
            Matrix::zeros(3, 2),
            vec![0.0; 3],
        );
        assert!(matches!(bad, Err(Error::Range(_))));
        let bad = SaeParams::new(
            0,
            Matrix::zeros(2, 3),
            vec![0.0; 2],
            vec![0.0; 2],
            Matrix::zeros(2, 3),
            vec![0.0; 3],
        );
        assert!(matches!(bad, Err(Error::Shape(_))));
    }

    #[test]
    fn activations_nonnegative_with_zero_theta() {
        let sae = random_sae(30, 6, 9, 0.0);
        let mut rng = RngState::new(10);
        for _ in 0..100 {
            let x: Vec<f32> = (0..6).map(|_| rng.next_normal() as f32).collect();
            assert!(sae.encode(&x).unwrap().values.iter().all(|&v| v >= 0.0));
        }
    }
}
