//! Versioned binary checkpoints: all six networks, optimizer state, step
//! counters, the trainer's stage state and the hash of the producing config.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::networks::ModelBundle;
use crate::training::{TrainState, TrainingSchedule};

const MAGIC: &[u8; 8] = b"BANISCK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub schedule: TrainingSchedule,
    pub state: TrainState,
    pub bundle: ModelBundle<f32>,
    /// Every metrics row logged up to this checkpoint.
    pub reports: Vec<LossReport>,
}

impl Checkpoint {
    /// Writes atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("partial");
        {
            let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = BufWriter::new(file);
            w.write_all(MAGIC).map_err(|e| Error::io(&tmp, e))?;
            w.write_all(&FORMAT_VERSION.to_le_bytes())
                .map_err(|e| Error::io(&tmp, e))?;
            bincode::serialize_into(&mut w, self)
                .map_err(|e| Error::Checkpoint(format!("encoding {}: {e}", path.display())))?;
            w.flush().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut head = [0u8; 12];
        r.read_exact(&mut head).map_err(|_| {
            Error::Checkpoint(format!(
                "{} is truncated or not a checkpoint",
                path.display()
            ))
        })?;
        if &head[..8] != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{} is not a checkpoint file",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(head[8..].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{} has format version {version}, expected {FORMAT_VERSION}",
                path.display()
            )));
        }
        bincode::deserialize_from(r)
            .map_err(|e| Error::Checkpoint(format!("decoding {}: {e}", path.display())))
    }

    /// Refuses a checkpoint produced under a different configuration.
    pub fn ensure_hash(&self, expected: &str) -> Result<()> {
        if self.config_hash != expected {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint was written by config {} but the current config hashes to {}",
                self.config_hash, expected
            )));
        }
        Ok(())
    }
}
