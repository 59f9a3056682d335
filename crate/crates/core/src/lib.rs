//! Round-based GPU cluster simulation with network contention, baseline
//! schedulers, and policy-gradient training of placement policies.

pub mod cluster;
pub mod contention;
pub mod encoding;
pub mod error;
pub mod policy;
pub mod report;
pub mod rl;
pub mod sim;
pub mod workload;

use std::io::Write;
use std::path::Path;

pub use cluster::{ClusterConfig, ClusterState, JobId, NodeId, Placement, Shape};
pub use contention::{ContentionMode, ContentionParams, CsTable, ModelClass, ModelProfile};
pub use encoding::{FeatureScales, StateTensor};
pub use error::{Error, Result};
pub use policy::{Decision, PolicyKind, Scheduler};
pub use report::{EpisodeReport, Summary};
pub use rl::{Architecture, Checkpoint, PolicyNet, RewardWeights, TrainConfig};
pub use sim::{run_episode, EpisodeConfig};
pub use workload::{Job, JobSpec, JobState, Mix, Phase, Trace, TraceSpec};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
