//! Single-file checkpoints.
//!
//! Layout, one field per line:
//!
//! ```text
//! ghp-checkpoint v1
//! config-sha256 <hex>
//! payload-sha256 <hex>
//! <JSON payload>
//! ```
//!
//! The payload holds the config text, every network parameter and
//! normalizer statistic, and the task posteriors. Floats are written in
//! shortest round-trip form so loading restores them bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::latent::{PosteriorState, TaskPosterior};
use crate::objective::{WorldModel, WorldModelState};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "ghp-checkpoint";

/// One shared model, or one model per task id.
#[derive(Clone, Debug)]
pub enum ModelSet {
    Shared(WorldModel<f64>),
    PerTask(BTreeMap<usize, WorldModel<f64>>),
}

impl ModelSet {
    /// The model used for `task`, if there is one.
    pub fn for_task(&self, task: usize) -> Option<&WorldModel<f64>> {
        match self {
            ModelSet::Shared(m) => Some(m),
            ModelSet::PerTask(ms) => ms.get(&task),
        }
    }

    /// Digest of every network parameter.
    pub fn checksum(&self) -> String {
        match self {
            ModelSet::Shared(m) => m.checksum(),
            ModelSet::PerTask(ms) => ms.iter().map(|(t, m)| format!("{t}={}", m.checksum())).collect::<Vec<_>>().join(";"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    /// Training rounds completed.
    pub round: usize,
    pub models: ModelSet,
    pub posteriors: BTreeMap<usize, TaskPosterior<f64>>,
}

#[derive(Serialize, Deserialize)]
enum ModelSetState {
    Shared(WorldModelState),
    PerTask(BTreeMap<usize, WorldModelState>),
}

#[derive(Serialize, Deserialize)]
struct Payload {
    config: String,
    round: usize,
    models: ModelSetState,
    posteriors: Vec<PosteriorState>,
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let models = match &self.models {
            ModelSet::Shared(m) => ModelSetState::Shared(m.to_state()),
            ModelSet::PerTask(ms) => ModelSetState::PerTask(ms.iter().map(|(&t, m)| (t, m.to_state())).collect()),
        };
        let payload = Payload {
            config: self.config.to_text(),
            round: self.round,
            models,
            posteriors: self.posteriors.values().map(TaskPosterior::to_state).collect(),
        };
        let json = serde_json::to_string(&payload)?;
        let head = format!(
            "{MAGIC} v{CHECKPOINT_VERSION}\nconfig-sha256 {}\npayload-sha256 {}\n",
            self.config.hash(),
            sha_hex(json.as_bytes())
        );
        Ok([head.into_bytes(), json.into_bytes()].concat())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        let text = std::str::from_utf8(bytes).map_err(|_| bad("not UTF-8"))?;
        let mut parts = text.splitn(4, '\n');
        let header = parts.next().unwrap_or_default();
        let version = header
            .strip_prefix(MAGIC)
            .and_then(|v| v.trim().strip_prefix('v'))
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| bad("missing header"))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("version {version}, this build reads {CHECKPOINT_VERSION}")));
        }
        let field = |line: Option<&str>, key: &str| {
            line.and_then(|l| l.strip_prefix(key)).map(|v| v.trim().to_string()).ok_or_else(|| bad(&format!("missing {key}")))
        };
        let config_hash = field(parts.next(), "config-sha256")?;
        let payload_hash = field(parts.next(), "payload-sha256")?;
        let json = parts.next().ok_or_else(|| bad("missing payload"))?;
        if sha_hex(json.as_bytes()) != payload_hash {
            return Err(bad("payload digest mismatch (truncated or corrupt file)"));
        }
        let payload: Payload = serde_json::from_str(json)?;
        let config = ExperimentConfig::from_text(&payload.config)?;
        if config.hash() != config_hash {
            return Err(bad("config digest mismatch"));
        }
        let models = match &payload.models {
            ModelSetState::Shared(s) => ModelSet::Shared(WorldModel::from_state(s)?),
            ModelSetState::PerTask(ms) => {
                ModelSet::PerTask(ms.iter().map(|(&t, s)| Ok((t, WorldModel::from_state(s)?))).collect::<Result<_>>()?)
            }
        };
        let posteriors = payload
            .posteriors
            .iter()
            .map(|s| {
                let p = TaskPosterior::from_state(s)?;
                Ok((p.task(), p))
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, round: payload.round, models, posteriors })
    }

    /// Writes to a temporary sibling and renames, so a crash never leaves
    /// a half-written checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Invalid(format!("no checkpoint at {}", path.display())),
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&bytes)
    }
}
