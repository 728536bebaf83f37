use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dirforge::volume::PhantomSpec;
use serde::{Deserialize, Serialize};

pub const PHANTOM_FORMAT: &str = "dirforge-phantom-1";

/// One output file. Containers are listed by header and checksummed by
/// payload; other files are checksummed whole.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub role: String,
    pub path: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub payload: Option<String>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub moving: String,
    pub target: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub landmarks_moving: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub landmarks_target: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomManifest {
    pub format: String,
    pub seed: u64,
    pub spec: PhantomSpec,
    pub files: Vec<FileEntry>,
    pub pairs: Vec<PairEntry>,
}

/// The part of any manifest `train` needs.
#[derive(Debug, Deserialize)]
pub struct PairsManifest {
    pub pairs: Vec<PairEntry>,
}

impl PairsManifest {
    /// Pairs with paths resolved against the manifest's directory.
    pub fn load(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading pairs manifest {}", path.display()))?;
        let m: PairsManifest = serde_json::from_str(&text)
            .map_err(dirforge::Error::from)
            .with_context(|| format!("parsing pairs manifest {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Ok(m.pairs
            .into_iter()
            .map(|p| (base.join(p.moving), base.join(p.target)))
            .collect())
    }
}
