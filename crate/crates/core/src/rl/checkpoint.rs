//! Policy checkpoints: a JSON document holding the format tag and version,
//! the architecture, training metadata, and the flat parameter vector.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterConfig;
use crate::encoding::FeatureScales;
use crate::error::{Error, Result};
use crate::rl::net::{Architecture, PolicyNet};
use crate::rl::reward::RewardWeights;

pub const FORMAT: &str = "netsched-policy";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub weights: RewardWeights,
    pub trace_id: String,
    pub episodes: usize,
    pub cluster: ClusterConfig,
    pub scales: FeatureScales,
    /// Resolved settings of the run that produced the checkpoint.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub provenance: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    pub meta: CheckpointMeta,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(net: &PolicyNet, meta: CheckpointMeta) -> Checkpoint {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            architecture: *net.architecture(),
            meta,
            params: net.params().to_vec(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(self).expect("checkpoint serializes");
        out.push(b'\n');
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
        let ck: Checkpoint = serde_json::from_slice(bytes)
            .map_err(|e| Error::parse(origin, e.line(), e.to_string()))?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(Error::CheckpointMismatch {
                found: format!("{} v{}", ck.format, ck.version),
                expected: format!("{FORMAT} v{VERSION}"),
            });
        }
        Ok(ck)
    }

    /// Rebuilds the network, failing if the stored architecture differs from
    /// `expected`.
    pub fn into_net(self, expected: &Architecture) -> Result<PolicyNet> {
        if self.architecture != *expected {
            return Err(Error::CheckpointMismatch {
                found: self.architecture.to_string(),
                expected: expected.to_string(),
            });
        }
        PolicyNet::from_params(self.architecture, self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (PolicyNet, Checkpoint) {
        let arch = Architecture {
            input_dim: 8,
            hidden: 4,
            heads: 3,
            head_size: 12,
        };
        let net = PolicyNet::new(arch, 9).unwrap();
        let meta = CheckpointMeta {
            seed: 9,
            weights: RewardWeights::new(0.4).unwrap(),
            trace_id: "normal-64-s1".into(),
            episodes: 2,
            cluster: ClusterConfig::default(),
            scales: FeatureScales::default(),
            provenance: serde_json::json!({"seed": 9}),
        };
        let ck = Checkpoint::new(&net, meta);
        (net, ck)
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let (net, ck) = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.into_net(net.architecture()).unwrap(), net);
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let (_, ck) = sample();
        let bytes = ck.to_bytes();
        let cut = &bytes[..bytes.len() / 2];
        assert!(matches!(
            Checkpoint::from_bytes(cut, Path::new("c")),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn head_count_mismatch_names_both() {
        let (net, ck) = sample();
        let wanted = Architecture {
            heads: 4,
            ..*net.architecture()
        };
        let err = ck.into_net(&wanted).unwrap_err().to_string();
        assert!(
            err.contains("heads=3x12") && err.contains("heads=4x12"),
            "{err}"
        );
    }
}
