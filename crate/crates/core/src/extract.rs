//! Whole-day representation extraction with observed timestamps.
//!
//! Binary table layout (little-endian):
//! ```text
//! magic "TGREPS\0\0" | version u32 | d u32 | n u32 | { player_id u32 | day u16 | f32 * d }*
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DownstreamTrajectory;
use crate::error::{Error, Result};
use crate::geo::{ByteReader, Vocabulary};
use crate::model::Encoder;

const MAGIC: &[u8; 8] = b"TGREPS\0\0";
const VERSION: u32 = 1;

pub type Key = (u32, u16);

#[derive(Debug, Clone, PartialEq)]
pub struct Representation {
    pub player_id: u32,
    pub day: u16,
    pub vector: Vec<f32>,
}

impl Representation {
    pub fn key(&self) -> Key {
        (self.player_id, self.day)
    }
}

/// Representations sorted by `(player_id, day)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RepTable {
    pub dim: usize,
    pub rows: Vec<Representation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub player_id: u32,
    pub day: u16,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub table: RepTable,
    pub skipped: Vec<SkipRecord>,
}

/// Representation of one trajectory; no masking.
pub fn extract(traj: &DownstreamTrajectory, enc: &Encoder) -> Result<Vec<f32>> {
    if traj.is_empty() {
        return Err(Error::EmptyTrajectory {
            player_id: traj.player_id,
            day: traj.day,
        });
    }
    enc.representation(&traj.tokens, &traj.minutes)
}

/// Extracts every trajectory. Empty trajectories become skip records; any
/// other error aborts. `parallel` only changes scheduling, not results.
pub fn extract_all(
    trajs: &[DownstreamTrajectory],
    enc: &Encoder,
    vocab: &Vocabulary,
    parallel: bool,
) -> Result<Extraction> {
    let hash = vocab.hash();
    if enc.vocab_hash != hash {
        return Err(Error::VocabMismatch {
            expected: enc.vocab_hash.clone(),
            found: hash,
        });
    }
    let mut order: Vec<&DownstreamTrajectory> = trajs.iter().collect();
    order.sort_by_key(|t| t.key());
    if let Some(w) = order.windows(2).find(|w| w[0].key() == w[1].key()) {
        return Err(Error::invalid(
            "trajectories",
            format!("duplicate player-day {:?}", w[0].key()),
        ));
    }
    let results: Vec<Result<Vec<f32>>> = if parallel {
        order.par_iter().map(|t| extract(t, enc)).collect()
    } else {
        order.iter().map(|t| extract(t, enc)).collect()
    };
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (t, r) in order.iter().zip(results) {
        match r {
            Ok(vector) => rows.push(Representation {
                player_id: t.player_id,
                day: t.day,
                vector,
            }),
            Err(e @ Error::EmptyTrajectory { .. }) => skipped.push(SkipRecord {
                player_id: t.player_id,
                day: t.day,
                code: e.code().to_string(),
                message: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(Extraction {
        table: RepTable {
            dim: enc.config.d_model,
            rows,
        },
        skipped,
    })
}

impl RepTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn keys(&self) -> Vec<Key> {
        self.rows.iter().map(|r| r.key()).collect()
    }

    pub fn get(&self, key: Key) -> Option<&[f32]> {
        self.rows
            .binary_search_by_key(&key, |r| r.key())
            .ok()
            .map(|i| &self.rows[i].vector[..])
    }

    /// Checks shape, ordering and finiteness.
    pub fn validate(&self) -> Result<()> {
        for r in &self.rows {
            if r.vector.len() != self.dim {
                return Err(Error::format("representations", "row width differs from dim"));
            }
            if !r.vector.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    location: format!("representation of player {} day {}", r.player_id, r.day),
                });
            }
        }
        if self.rows.windows(2).any(|w| w[0].key() >= w[1].key()) {
            return Err(Error::format("representations", "rows not strictly sorted by key"));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.rows.len() * (6 + 4 * self.dim));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.rows.len() as u32).to_le_bytes());
        for r in &self.rows {
            out.extend_from_slice(&r.player_id.to_le_bytes());
            out.extend_from_slice(&r.day.to_le_bytes());
            for v in &r.vector {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "representations");
        if r.take(8)? != MAGIC {
            return Err(Error::format("representations", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format("representations", format!("unsupported version {version}")));
        }
        let dim = r.u32()? as usize;
        let n = r.u32()? as usize;
        let mut rows = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let player_id = r.u32()?;
            let day = r.u16()?;
            let vector = (0..dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            rows.push(Representation {
                player_id,
                day,
                vector,
            });
        }
        r.finish()?;
        let table = Self { dim, rows };
        table.validate()?;
        Ok(table)
    }

    /// `player_id,day,v0,...` with a header row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("player_id,day");
        for i in 0..self.dim {
            let _ = write!(s, ",v{i}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{}", r.player_id, r.day);
            for v in &r.vector {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
