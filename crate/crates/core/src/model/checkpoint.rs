//! Checkpoint blob: `DCCK` magic, little-endian u64 header length, JSON
//! header, then every parameter block as little-endian f64 in declaration
//! order (encoder, projection, segmentation head).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{Encoder, ModelConfig, Network, Projection, SegHead};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DCCK";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub step: u64,
    /// Free-form echo of the configuration that produced the weights.
    pub config: serde_json::Value,
    pub encoder_len: usize,
    pub projection_len: usize,
    pub seg_head_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub network: Network,
}

impl Checkpoint {
    pub fn new(network: Network, step: u64, config: serde_json::Value) -> Self {
        let header = CheckpointHeader {
            model: network.config().clone(),
            step,
            config,
            encoder_len: network.encoder.params.len(),
            projection_len: network.projection.as_ref().map_or(0, |p| p.params.len()),
            seg_head_len: network.seg_head.as_ref().map_or(0, |h| h.params.len()),
        };
        Checkpoint { header, network }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let n = &self.network;
        let total = self.header.encoder_len + self.header.projection_len + self.header.seg_head_len;
        let mut out = Vec::with_capacity(12 + header.len() + 8 * total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let blocks = [
            Some(&n.encoder.params),
            n.projection.as_ref().map(|p| &p.params),
            n.seg_head.as_ref().map(|h| &h.params),
        ];
        for block in blocks.into_iter().flatten() {
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("missing magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        let payload = &bytes[12 + hlen..];
        let total = header.encoder_len + header.projection_len + header.seg_head_len;
        if payload.len() != total * 8 {
            return Err(Error::Checkpoint(format!(
                "payload has {} bytes, header declares {} parameters",
                payload.len(),
                total
            )));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let (enc, rest) = values.split_at(header.encoder_len);
        let (proj, head) = rest.split_at(header.projection_len);
        let encoder = Encoder::from_params(header.model.clone(), enc.to_vec())?;
        let projection = (header.projection_len > 0)
            .then(|| Projection::from_params(&header.model, proj.to_vec()))
            .transpose()?;
        let seg_head = (header.seg_head_len > 0)
            .then(|| SegHead::from_params(&header.model, head.to_vec()))
            .transpose()?;
        Ok(Checkpoint {
            header,
            network: Network {
                encoder,
                projection,
                seg_head,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Network::pretraining(ModelConfig::default(), &mut rng).unwrap();
        let ck = Checkpoint::new(net.clone(), 17, serde_json::json!({"lr": 3e-4}));
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);

        let seg = net.into_segmentation(&mut rng);
        let ck = Checkpoint::new(seg, 3, serde_json::Value::Null);
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(Checkpoint::from_bytes(b"nope").is_err());
    }
}
