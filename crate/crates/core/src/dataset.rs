//! Paired-image datasets: the line-oriented manifest, train/test splitting and
//! the in-memory [`ImagePair`] used for training and evaluation.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmi::BinaryMask;
use crate::imaging::Grid;
use crate::networks::Domain;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

/// Which imaging modality plays domain A; the other one is domain B.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    #[default]
    Membrane,
    Nuclei,
}

/// One manifest row. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub pair_id: String,
    pub split: Split,
    pub membrane: PathBuf,
    pub nuclei: PathBuf,
    pub membrane_mask: Option<PathBuf>,
    pub nuclei_mask: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// `<pair_id>,<split>,<membrane>,<nuclei>,<membrane_mask>,<nuclei_mask>,<seed>`
/// per line, no header; the mask and seed fields may be empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

fn path_field(p: &Path) -> Result<String> {
    let s = p.to_str().ok_or_else(|| {
        Error::validation("manifest path", format!("{} is not UTF-8", p.display()))
    })?;
    if s.contains(',') || s.contains('\n') {
        return Err(Error::validation(
            "manifest path",
            format!("'{s}' contains a separator"),
        ));
    }
    Ok(s.to_string())
}

impl Manifest {
    pub fn to_text(&self) -> Result<String> {
        let mut out = Vec::new();
        for e in &self.entries {
            let opt = |p: &Option<PathBuf>| {
                p.as_deref()
                    .map(path_field)
                    .transpose()
                    .map(Option::unwrap_or_default)
            };
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                e.pair_id,
                e.split,
                path_field(&e.membrane)?,
                path_field(&e.nuclei)?,
                opt(&e.membrane_mask)?,
                opt(&e.nuclei_mask)?,
                e.seed.map(|s| s.to_string()).unwrap_or_default()
            )
            .expect("vec write");
        }
        Ok(String::from_utf8(out).expect("utf-8"))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root, path)
    }

    pub fn parse(text: &str, root: PathBuf, source: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let err = |message: String| Error::Parse {
                path: source.to_path_buf(),
                line: i as u64 + 1,
                message,
            };
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 7 {
                return Err(err(format!("expected 7 fields, found {}", f.len())));
            }
            if f[0].is_empty() || f[2].is_empty() || f[3].is_empty() {
                return Err(err("pair id and both image paths are required".into()));
            }
            let opt = |s: &str| (!s.is_empty()).then(|| PathBuf::from(s));
            entries.push(ManifestEntry {
                pair_id: f[0].to_string(),
                split: f[1].parse().map_err(err)?,
                membrane: PathBuf::from(f[2]),
                nuclei: PathBuf::from(f[3]),
                membrane_mask: opt(f[4]),
                nuclei_mask: opt(f[5]),
                seed: if f[6].is_empty() {
                    None
                } else {
                    Some(
                        f[6].parse()
                            .map_err(|e| err(format!("seed '{}': {e}", f[6])))?,
                    )
                },
            });
        }
        let mut ids: Vec<&str> = entries.iter().map(|e| e.pair_id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::validation(
                "manifest",
                format!("duplicate pair id '{}'", w[0]),
            ));
        }
        Ok(Manifest { root, entries })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

/// Number of test items under the floor rule: `floor(n · fraction)`.
pub fn test_count(n: usize, fraction: f64) -> usize {
    // The small nudge keeps exact products such as 50 · 0.1 from landing just below an integer.
    ((n as f64 * fraction) + 1e-9).floor() as usize
}

/// Seeded assignment of `n` items to train/test; a pure function of its arguments.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Split::Train; n];
    for &i in &order[..test_count(n, test_fraction)] {
        out[i] = Split::Test;
    }
    out
}

/// A co-registered two-domain image pair in the network representation.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub split: Split,
    pub a: Grid,
    pub b: Grid,
    pub mask_a: Option<BinaryMask>,
    pub mask_b: Option<BinaryMask>,
}

impl ImagePair {
    pub fn image(&self, d: Domain) -> &Grid {
        match d {
            Domain::A => &self.a,
            Domain::B => &self.b,
        }
    }

    pub fn mask(&self, d: Domain) -> Option<&BinaryMask> {
        match d {
            Domain::A => self.mask_a.as_ref(),
            Domain::B => self.mask_b.as_ref(),
        }
    }
}
