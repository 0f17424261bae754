// SPDX-License-Identifier: MIT OR Apache-2.0

//! SAE container: `manifest.json` + `sae.bin`, same tensor table as the
//! model container.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SaeParams;
use crate::error::{ContainerError, Result};
use crate::io::{pack_tensors, read_file, take_tensor, unpack_tensors, write_atomic, TensorEntry};
use crate::numerics::Matrix;

pub const SAE_MANIFEST: &str = "manifest.json";
pub const SAE_BLOB: &str = "sae.bin";
const FORMAT: &str = "saesteer-sae/1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    layer: usize,
    d_model: usize,
    n_features: usize,
    tensors: Vec<TensorEntry>,
}

pub fn save_sae(dir: &Path, sae: &SaeParams) -> Result<()> {
    let (m, n) = (sae.n_features(), sae.d_model());
    let (table, blob) = pack_tensors(&[
        ("W_enc", vec![m, n], sae.w_enc.data()),
        ("b_enc", vec![m], &sae.b_enc),
        ("theta", vec![m], &sae.theta),
        ("W_dec", vec![n, m], sae.w_dec.data()),
        ("b_dec", vec![n], &sae.b_dec),
    ]);
    let manifest = Manifest {
        format: FORMAT.into(),
        layer: sae.layer,
        d_model: n,
        n_features: m,
        tensors: table,
    };
    write_atomic(&dir.join(SAE_BLOB), &blob)?;
    write_atomic(&dir.join(SAE_MANIFEST), &serde_json::to_vec_pretty(&manifest)?)
}

/// Loads an SAE container. A missing `theta` tensor means plain ReLU.
pub fn load_sae(dir: &Path) -> Result<SaeParams> {
    let manifest_path = dir.join(SAE_MANIFEST);
    let raw = read_file(&manifest_path, || {
        ContainerError::ManifestMissing(manifest_path.clone())
    })?;
    let manifest: Manifest = serde_json::from_slice(&raw).map_err(|e| ContainerError::Manifest(e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(ContainerError::Manifest(format!("unknown format `{}`", manifest.format)).into());
    }
    let blob_path = dir.join(SAE_BLOB);
    let blob = read_file(&blob_path, || ContainerError::BlobMissing(blob_path.clone()))?;
    let mut t = unpack_tensors(&manifest.tensors, &blob)?;
    let (m, n) = (manifest.n_features, manifest.d_model);
    let w_enc = Matrix::new(m, n, take_tensor(&mut t, "W_enc", &[m, n])?)?;
    let b_enc = take_tensor(&mut t, "b_enc", &[m])?;
    let theta = if t.contains_key("theta") {
        take_tensor(&mut t, "theta", &[m])?
    } else {
        vec![0.0; m]
    };
    let w_dec = Matrix::new(n, m, take_tensor(&mut t, "W_dec", &[n, m])?)?;
    let b_dec = take_tensor(&mut t, "b_dec", &[n])?;
    if let Some(extra) = t.keys().next() {
        return Err(ContainerError::Manifest(format!("unexpected tensor `{extra}`")).into());
    }
    SaeParams::new(manifest.layer, w_enc, b_enc, theta, w_dec, b_dec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    fn sample() -> SaeParams {
        let mut rng = RngState::new(3);
        let mut g = |len: usize| (0..len).map(|_| rng.next_normal() as f32).collect::<Vec<_>>();
        let theta = g(5).into_iter().map(f32::abs).collect();
        SaeParams::new(
            1,
            Matrix::new(5, 3, g(15)).unwrap(),
            g(5),
            theta,
            Matrix::new(3, 5, g(15)).unwrap(),
            g(3),
        )
        .unwrap()
    }

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let sae = sample();
        save_sae(dir.path(), &sae).unwrap();
        assert_eq!(load_sae(dir.path()).unwrap(), sae);
    }

    #[test]
    fn theta_defaults_to_zero() {
        let dir = tempfile::tempdir().unwrap();
        let sae = sample();
        let (table, blob) = pack_tensors(&[
            ("W_enc", vec![5, 3], sae.w_enc().data()),
            ("b_enc", vec![5], sae.b_enc()),
            ("W_dec", vec![3, 5], sae.w_dec().data()),
            ("b_dec", vec![3], sae.b_dec()),
        ]);
        let manifest = Manifest {
            format: FORMAT.into(),
            layer: 1,
            d_model: 3,
            n_features: 5,
            tensors: table,
        };
        std::fs::write(dir.path().join(SAE_BLOB), blob).unwrap();
        std::fs::write(dir.path().join(SAE_MANIFEST), serde_json::to_vec(&manifest).unwrap()).unwrap();
        let loaded = load_sae(dir.path()).unwrap();
        assert_eq!(loaded.theta(), &[0.0; 5]);
    }

    #[test]
    fn corrupted_blob_and_missing_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(load_sae(dir.path()).unwrap_err().code(), "container.manifest_missing");
        save_sae(dir.path(), &sample()).unwrap();
        let p = dir.path().join(SAE_BLOB);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] ^= 1;
        std::fs::write(&p, bytes).unwrap();
        assert_eq!(load_sae(dir.path()).unwrap_err().code(), "container.checksum");
    }
}
