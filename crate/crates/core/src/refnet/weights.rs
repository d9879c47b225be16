//! Flat little-endian f32 weight blob plus a JSON manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build, NetConfig, Network};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub config: NetConfig,
    pub total_params: usize,
    pub tensors: Vec<TensorEntry>,
}

impl Network {
    pub fn export_weights(&self) -> (Vec<u8>, WeightManifest) {
        let mut blob = Vec::with_capacity(self.count_params() * 4);
        let mut tensors = Vec::new();
        for conv in self.convs() {
            for (suffix, shape, values) in [
                ("weight", conv.weight_shape(), &conv.weight),
                ("bias", vec![conv.out_channels], &conv.bias),
            ] {
                tensors.push(TensorEntry {
                    name: format!("{}.{suffix}", conv.name),
                    shape,
                    offset: blob.len(),
                });
                for v in values {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let manifest = WeightManifest {
            config: self.config.clone(),
            total_params: self.count_params(),
            tensors,
        };
        (blob, manifest)
    }

    /// Rebuilds a network from an exported blob; every tensor named by the
    /// architecture must be present with the expected shape.
    pub fn import_weights(manifest: &WeightManifest, blob: &[u8]) -> Result<Network> {
        let mut net = build(&manifest.config)?;
        for conv in net.convs_mut() {
            let wshape = conv.weight_shape();
            let bshape = vec![conv.out_channels];
            let name = conv.name.clone();
            for (suffix, shape, values) in [
                ("weight", wshape, &mut conv.weight),
                ("bias", bshape, &mut conv.bias),
            ] {
                let full = format!("{name}.{suffix}");
                let entry = manifest
                    .tensors
                    .iter()
                    .find(|t| t.name == full)
                    .ok_or_else(|| Error::InvalidConfig(format!("weight manifest lacks {full}")))?;
                if entry.shape != shape {
                    return Err(Error::ShapeMismatch(format!(
                        "{full}: manifest shape {:?}, expected {shape:?}",
                        entry.shape
                    )));
                }
                let end = entry.offset + values.len() * 4;
                let bytes = blob.get(entry.offset..end).ok_or(Error::TruncatedData {
                    expected: end,
                    found: blob.len(),
                })?;
                for (v, b) in values.iter_mut().zip(bytes.chunks_exact(4)) {
                    *v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
                }
            }
        }
        Ok(net)
    }

    /// Writes `<prefix>.bin` and `<prefix>.json`.
    pub fn save_weights(&self, prefix: &Path) -> Result<()> {
        let (blob, manifest) = self.export_weights();
        let bin = prefix.with_extension("bin");
        let json = prefix.with_extension("json");
        fs::write(&bin, blob).map_err(|e| Error::io(&bin, e))?;
        fs::write(&json, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&json, e))?;
        Ok(())
    }

    pub fn load_weights(prefix: &Path) -> Result<Network> {
        let bin = prefix.with_extension("bin");
        let json = prefix.with_extension("json");
        let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let manifest: WeightManifest = serde_json::from_slice(&fs::read(&json).map_err(|e| Error::io(&json, e))?)?;
        Network::import_weights(&manifest, &blob)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn export_import_roundtrip() {
        let net = build(&NetConfig::new(2, 11).with_base_filters(1)).unwrap();
        let (blob, manifest) = net.export_weights();
        assert_eq!(blob.len(), 4 * net.count_params());
        assert_eq!(manifest.total_params, net.count_params());
        assert_eq!(Network::import_weights(&manifest, &blob).unwrap(), net);
        assert!(matches!(
            Network::import_weights(&manifest, &blob[..blob.len() - 4]),
            Err(Error::TruncatedData { .. })
        ));
    }

    #[test]
    fn save_and_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let net = build(&NetConfig::new(3, 2).with_base_filters(1)).unwrap();
        let prefix = dir.path().join("w");
        net.save_weights(&prefix).unwrap();
        assert_eq!(Network::load_weights(&prefix).unwrap(), net);
    }
}
