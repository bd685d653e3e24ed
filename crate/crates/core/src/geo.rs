//! World geometry: continents, zone/cell binning and the token vocabularies.
//!
//! A location is an `(x, y)` pair in the local coordinate system of one
//! continent. Zones and cells are square bins of that system; both carry the
//! continent id so equal coordinates on different continents never collide.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One per-minute position sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridLocation {
    pub x: u32,
    pub y: u32,
    pub continent_id: u32,
}

impl GridLocation {
    pub const fn new(x: u32, y: u32, continent_id: u32) -> Self {
        Self { x, y, continent_id }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Continent {
    pub id: u32,
    pub width: u32,
    pub height: u32,
    pub avg_level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    #[serde(default = "default_zone_size")]
    pub zone_size: u32,
    #[serde(default = "default_cell_size")]
    pub cell_size: u32,
    pub continents: Vec<Continent>,
}

fn default_zone_size() -> u32 {
    256
}

fn default_cell_size() -> u32 {
    8
}

impl Default for WorldConfig {
    /// A mainland of 2048x2048 plus four islands/dungeons between 256 and 512
    /// on a side, each with its own typical player level.
    fn default() -> Self {
        let c = |id, width, height, avg_level| Continent {
            id,
            width,
            height,
            avg_level,
        };
        Self {
            zone_size: default_zone_size(),
            cell_size: default_cell_size(),
            continents: vec![
                c(0, 2048, 2048, 40.0),
                c(1, 512, 512, 20.0),
                c(2, 512, 512, 55.0),
                c(3, 512, 256, 65.0),
                c(4, 256, 256, 70.0),
            ],
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cell_size == 0 || self.zone_size == 0 {
            return Err(Error::Config("zone_size and cell_size must be > 0".into()));
        }
        if self.zone_size % self.cell_size != 0 {
            return Err(Error::Config(format!(
                "zone_size {} is not a multiple of cell_size {}",
                self.zone_size, self.cell_size
            )));
        }
        if self.continents.is_empty() {
            return Err(Error::Config("world declares no continents".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.continents {
            if !seen.insert(c.id) {
                return Err(Error::Config(format!("duplicate continent id {}", c.id)));
            }
            if c.width == 0 || c.height == 0 {
                return Err(Error::Config(format!("continent {} has zero extent", c.id)));
            }
            if !(c.avg_level.is_finite() && c.avg_level >= 0.0) {
                return Err(Error::Config(format!(
                    "continent {} avg_level must be finite and >= 0",
                    c.id
                )));
            }
        }
        Ok(())
    }

    pub fn continent(&self, id: u32) -> Option<&Continent> {
        self.continents.iter().find(|c| c.id == id)
    }

    pub fn max_level(&self) -> f64 {
        self.continents
            .iter()
            .map(|c| c.avg_level)
            .fold(0.0, f64::max)
    }

    /// Checks `loc` against the half-open ranges `[0, width) x [0, height)`.
    pub fn check(&self, loc: GridLocation) -> Result<&Continent> {
        let c = self.continent(loc.continent_id).ok_or_else(|| {
            Error::invalid(
                "continent_id",
                format!("continent {} is not declared", loc.continent_id),
            )
        })?;
        if loc.x >= c.width {
            return Err(Error::invalid(
                "x",
                format!("{} outside [0, {}) on continent {}", loc.x, c.width, c.id),
            ));
        }
        if loc.y >= c.height {
            return Err(Error::invalid(
                "y",
                format!("{} outside [0, {}) on continent {}", loc.y, c.height, c.id),
            ));
        }
        Ok(c)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: WorldConfig =
            toml::from_str(s).map_err(|e| Error::Config(format!("world config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("world config is always serializable")
    }
}

/// A binned location: `(floor(x / size), floor(y / size), continent)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BinId {
    pub bx: u32,
    pub by: u32,
    pub continent_id: u32,
}

pub type ZoneId = BinId;
pub type CellId = BinId;

fn bin(loc: GridLocation, size: u32) -> BinId {
    BinId {
        bx: loc.x / size,
        by: loc.y / size,
        continent_id: loc.continent_id,
    }
}

pub fn bin_zone(loc: GridLocation, cfg: &WorldConfig) -> Result<ZoneId> {
    cfg.check(loc)?;
    Ok(bin(loc, cfg.zone_size))
}

pub fn bin_cell(loc: GridLocation, cfg: &WorldConfig) -> Result<CellId> {
    cfg.check(loc)?;
    Ok(bin(loc, cfg.cell_size))
}

/// Reserved token ids, shared by the zone and the cell vocabulary.
pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const MASK: u32 = 2;
pub const N_RESERVED: u32 = 3;

/// Dense token tables for zones and cells.
///
/// Ids `0..N_RESERVED` are the reserved tokens; real bins follow in order of
/// first appearance. Lookups of unknown bins return [`UNK`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    zones: Vec<ZoneId>,
    cells: Vec<CellId>,
    zone_index: HashMap<ZoneId, u32>,
    cell_index: HashMap<CellId, u32>,
}

const VOCAB_MAGIC: &[u8; 8] = b"TGVOCAB\0";
const VOCAB_VERSION: u32 = 1;

impl Vocabulary {
    fn from_entries(zones: Vec<ZoneId>, cells: Vec<CellId>) -> Self {
        let index = |v: &[BinId]| {
            v.iter()
                .enumerate()
                .map(|(i, b)| (*b, i as u32 + N_RESERVED))
                .collect::<HashMap<_, _>>()
        };
        Self {
            zone_index: index(&zones),
            cell_index: index(&cells),
            zones,
            cells,
        }
    }

    pub fn zone_token(&self, zone: &ZoneId) -> u32 {
        self.zone_index.get(zone).copied().unwrap_or(UNK)
    }

    pub fn cell_token(&self, cell: &CellId) -> u32 {
        self.cell_index.get(cell).copied().unwrap_or(UNK)
    }

    /// Vocabulary size including reserved tokens.
    pub fn zone_vocab_size(&self) -> usize {
        self.zones.len() + N_RESERVED as usize
    }

    pub fn cell_vocab_size(&self) -> usize {
        self.cells.len() + N_RESERVED as usize
    }

    pub fn zone_of_token(&self, token: u32) -> Option<ZoneId> {
        token
            .checked_sub(N_RESERVED)
            .and_then(|i| self.zones.get(i as usize).copied())
    }

    pub fn cell_of_token(&self, token: u32) -> Option<CellId> {
        token
            .checked_sub(N_RESERVED)
            .and_then(|i| self.cells.get(i as usize).copied())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 12 * (self.zones.len() + self.cells.len()));
        out.extend_from_slice(VOCAB_MAGIC);
        out.extend_from_slice(&VOCAB_VERSION.to_le_bytes());
        for table in [&self.zones, &self.cells] {
            out.extend_from_slice(&(table.len() as u32).to_le_bytes());
            for b in table.iter() {
                out.extend_from_slice(&b.bx.to_le_bytes());
                out.extend_from_slice(&b.by.to_le_bytes());
                out.extend_from_slice(&b.continent_id.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "vocabulary");
        if r.take(8)? != VOCAB_MAGIC {
            return Err(Error::format("vocabulary", "bad magic"));
        }
        let version = r.u32()?;
        if version != VOCAB_VERSION {
            return Err(Error::format("vocabulary", format!("unsupported version {version}")));
        }
        let mut tables = Vec::with_capacity(2);
        for _ in 0..2 {
            let n = r.u32()? as usize;
            let mut table = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                table.push(BinId {
                    bx: r.u32()?,
                    by: r.u32()?,
                    continent_id: r.u32()?,
                });
            }
            tables.push(table);
        }
        r.finish()?;
        let cells = tables.pop().unwrap();
        let zones = tables.pop().unwrap();
        Ok(Self::from_entries(zones, cells))
    }

    /// Hex SHA-256 of the serialized form; checkpoints pin the vocabulary by it.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Builds the zone and cell vocabularies from the training trajectories.
///
/// Ids are assigned by first appearance in iteration order, so identical input
/// always yields identical ids.
pub fn build_vocabulary<'a, I, T>(trajectories: I, cfg: &WorldConfig) -> Result<Vocabulary>
where
    I: IntoIterator<Item = T>,
    T: IntoIterator<Item = &'a GridLocation>,
{
    let mut zones = Vec::new();
    let mut cells = Vec::new();
    let mut zone_seen = std::collections::HashSet::new();
    let mut cell_seen = std::collections::HashSet::new();
    let mut any = false;
    for traj in trajectories {
        for loc in traj {
            any = true;
            let z = bin_zone(*loc, cfg)?;
            let c = bin(*loc, cfg.cell_size);
            if zone_seen.insert(z) {
                zones.push(z);
            }
            if cell_seen.insert(c) {
                cells.push(c);
            }
        }
    }
    if !any {
        return Err(Error::invalid(
            "training_trajectories",
            "no locations to build a vocabulary from",
        ));
    }
    Ok(Vocabulary::from_entries(zones, cells))
}

/// Little-endian cursor shared by the binary formats of this crate.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.what, "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.what, "trailing bytes"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> WorldConfig {
        WorldConfig::default()
    }

    #[test]
    fn zone_binning_examples() {
        let w = world();
        let z = bin_zone(GridLocation::new(0, 0, 3), &w).unwrap();
        assert_eq!((z.bx, z.by, z.continent_id), (0, 0, 3));
        let z = bin_zone(GridLocation::new(300, 700, 0), &w).unwrap();
        assert_eq!((z.bx, z.by), (1, 2));
        let z = bin_zone(GridLocation::new(255, 256, 0), &w).unwrap();
        assert_eq!((z.bx, z.by, z.continent_id), (0, 1, 0));
    }

    #[test]
    fn cell_binning_examples() {
        let w = world();
        let c = bin_cell(GridLocation::new(0, 0, 1), &w).unwrap();
        assert_eq!((c.bx, c.by, c.continent_id), (0, 0, 1));
        let c = bin_cell(GridLocation::new(300, 700, 0), &w).unwrap();
        assert_eq!((c.bx, c.by), (37, 87));
        let c = bin_cell(GridLocation::new(7, 8, 2), &w).unwrap();
        assert_eq!((c.bx, c.by, c.continent_id), (0, 1, 2));
    }

    #[test]
    fn out_of_range_names_field() {
        let w = world();
        match bin_zone(GridLocation::new(2048, 0, 0), &w) {
            Err(Error::InvalidInput { field, .. }) => assert_eq!(field, "x"),
            other => panic!("unexpected {other:?}"),
        }
        match bin_cell(GridLocation::new(0, 300, 4), &w) {
            Err(Error::InvalidInput { field, .. }) => assert_eq!(field, "y"),
            other => panic!("unexpected {other:?}"),
        }
        match bin_cell(GridLocation::new(0, 0, 99), &w) {
            Err(Error::InvalidInput { field, .. }) => assert_eq!(field, "continent_id"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn continents_never_share_bins() {
        let w = world();
        let a = GridLocation::new(10, 10, 1);
        let b = GridLocation::new(10, 10, 2);
        assert_ne!(bin_cell(a, &w).unwrap(), bin_cell(b, &w).unwrap());
        assert_ne!(bin_zone(a, &w).unwrap(), bin_zone(b, &w).unwrap());
    }

    #[test]
    fn world_validation() {
        let mut w = world();
        w.cell_size = 7;
        assert!(w.validate().is_err());
        let mut w = world();
        w.continents[1].width = 0;
        assert!(w.validate().is_err());
        let toml = world().to_toml_string();
        assert_eq!(WorldConfig::from_toml_str(&toml).unwrap(), world());
    }

    #[test]
    fn vocabulary_counts() {
        let w = world();
        // three cells, two zones
        let traj = vec![
            GridLocation::new(0, 0, 0),
            GridLocation::new(9, 0, 0),
            GridLocation::new(300, 0, 0),
            GridLocation::new(1, 1, 0),
        ];
        let v = build_vocabulary([&traj], &w).unwrap();
        assert_eq!(v.cell_vocab_size(), N_RESERVED as usize + 3);
        assert_eq!(v.zone_vocab_size(), N_RESERVED as usize + 2);
        // first appearance order
        assert_eq!(v.cell_token(&bin_cell(traj[0], &w).unwrap()), N_RESERVED);
        assert_eq!(v.cell_token(&bin_cell(traj[2], &w).unwrap()), N_RESERVED + 2);
        let unseen = bin_cell(GridLocation::new(2000, 2000, 0), &w).unwrap();
        assert_eq!(v.cell_token(&unseen), UNK);
    }

    #[test]
    fn empty_vocabulary_input_fails() {
        let empty: Vec<Vec<GridLocation>> = vec![];
        assert!(build_vocabulary(empty.iter(), &world()).is_err());
        let only_empty: Vec<Vec<GridLocation>> = vec![vec![]];
        assert!(build_vocabulary(only_empty.iter(), &world()).is_err());
    }

    #[test]
    fn duplicate_trajectories_match_set_oracle() {
        let w = world();
        let traj: Vec<_> = (0..50)
            .map(|i| GridLocation::new((i * 37) % 2048, (i * 91) % 2048, i % 2))
            .map(|l| GridLocation::new(l.x % 256, l.y % 256, l.continent_id))
            .collect();
        let once = build_vocabulary([&traj], &w).unwrap();
        let twice = build_vocabulary([&traj, &traj], &w).unwrap();
        assert_eq!(once, twice);
        let distinct: std::collections::BTreeSet<_> =
            traj.iter().map(|l| bin_cell(*l, &w).unwrap()).collect();
        assert_eq!(once.cell_vocab_size(), distinct.len() + N_RESERVED as usize);
    }

    #[test]
    fn vocabulary_bytes_are_stable() {
        let w = world();
        let traj: Vec<_> = (0..40).map(|i| GridLocation::new(i * 13, i * 7, 0)).collect();
        let v = build_vocabulary([&traj], &w).unwrap();
        let bytes = v.to_bytes();
        let back = Vocabulary::from_bytes(&bytes).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.hash(), v.hash());
        assert!(Vocabulary::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Vocabulary::from_bytes(&bad).is_err());
    }
}
