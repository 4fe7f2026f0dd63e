use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Utterance {
    pub id: String,
    /// Relative paths are resolved against the manifest's directory.
    pub wav: PathBuf,
    pub speaker: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src: Option<Vec<usize>>,
    pub tgt: Vec<usize>,
}

pub fn write_manifest(path: impl AsRef<Path>, utts: &[Utterance]) -> Result<()> {
    let mut out = Vec::new();
    for u in utts {
        serde_json::to_writer(&mut out, u)?;
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Parses a JSON-lines manifest, skipping blank lines.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<Utterance>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let err = |line: usize, msg: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut utts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let u: Utterance = serde_json::from_str(line).map_err(|e| err(i + 1, e.to_string()))?;
        if u.tgt.is_empty() {
            return Err(err(i + 1, "empty tgt".into()));
        }
        utts.push(u);
    }
    Ok(utts)
}
