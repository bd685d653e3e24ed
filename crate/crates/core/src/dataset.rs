//! Training and downstream datasets.
//!
//! Training data: per player-day, keep only the minutes where the cell changes,
//! cut the token stream into windows of 32, then split each window into an
//! (anchor, positive, negative) triplet of length-16 sequences and mask the
//! anchor. Downstream data: every online minute, no filtering.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{bin_cell, bin_zone, ByteReader, CellId, Vocabulary, WorldConfig, MASK};
use crate::synth::{DayLog, MINUTES_PER_DAY};

pub const CHUNK_LEN: usize = 32;
pub const SEQ_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenPair {
    pub zone: u32,
    pub cell: u32,
}

impl TokenPair {
    pub const MASKED: TokenPair = TokenPair {
        zone: MASK,
        cell: MASK,
    };

    pub const fn new(zone: u32, cell: u32) -> Self {
        Self { zone, cell }
    }
}

/// A window of exactly [`CHUNK_LEN`] filtered tokens from one player-day.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrepSequence {
    pub player_id: u32,
    pub day: u16,
    pub tokens: [TokenPair; CHUNK_LEN],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    OddEven,
    Half,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletSample {
    pub anchor: [TokenPair; SEQ_LEN],
    /// The anchor before masking; the trainer draws extra mask variants from it.
    pub clean_anchor: [TokenPair; SEQ_LEN],
    pub positive: [TokenPair; SEQ_LEN],
    pub negative: [TokenPair; SEQ_LEN],
    /// Masked anchor positions, 1-based and ascending.
    pub mask_indices: Vec<u8>,
    /// Original cell token of each masked position, aligned with `mask_indices`.
    pub masked_truth: Vec<u32>,
    pub split_mode: SplitMode,
    /// Index of the source chunk and of the chunk the negative came from.
    pub source: u32,
    pub negative_source: u32,
}

impl TripletSample {
    pub fn masked_truth_of(&self, index: u8) -> Option<u32> {
        self.mask_indices
            .iter()
            .position(|&i| i == index)
            .map(|p| self.masked_truth[p])
    }
}

/// Full-day token trajectory of one player-day for representation extraction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DownstreamTrajectory {
    pub player_id: u32,
    pub day: u16,
    pub tokens: Vec<TokenPair>,
    /// 1-based minute of each token, strictly increasing.
    pub minutes: Vec<u16>,
    /// Cell per minute (index 0 = minute 1); `None` when offline.
    pub cells_by_minute: Vec<Option<CellId>>,
}

impl DownstreamTrajectory {
    pub fn key(&self) -> (u32, u16) {
        (self.player_id, self.day)
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn token_of(
    loc: crate::geo::GridLocation,
    cfg: &WorldConfig,
    vocab: &Vocabulary,
) -> Result<(TokenPair, CellId)> {
    let z = bin_zone(loc, cfg)?;
    let c = bin_cell(loc, cfg)?;
    Ok((TokenPair::new(vocab.zone_token(&z), vocab.cell_token(&c)), c))
}

/// Keeps the first online minute and every minute whose cell differs from the
/// previous online minute. Offline minutes emit nothing.
pub fn dedup_filter(log: &DayLog, cfg: &WorldConfig, vocab: &Vocabulary) -> Result<Vec<TokenPair>> {
    let mut out = Vec::new();
    let mut prev: Option<CellId> = None;
    for loc in log.samples.iter().flatten() {
        let (tok, cell) = token_of(*loc, cfg, vocab)?;
        if prev != Some(cell) {
            out.push(tok);
            prev = Some(cell);
        }
    }
    Ok(out)
}

/// Non-overlapping windows of 32; a trailing remainder shorter than 32 is dropped.
pub fn chunk32(tokens: &[TokenPair]) -> Vec<[TokenPair; CHUNK_LEN]> {
    tokens
        .chunks_exact(CHUNK_LEN)
        .map(|c| c.try_into().expect("exact chunk"))
        .collect()
}

/// Filter and chunk one player-day.
pub fn prep_sequences(
    log: &DayLog,
    cfg: &WorldConfig,
    vocab: &Vocabulary,
) -> Result<Vec<PrepSequence>> {
    let tokens = dedup_filter(log, cfg, vocab)?;
    Ok(chunk32(&tokens)
        .into_iter()
        .map(|tokens| PrepSequence {
            player_id: log.player_id,
            day: log.day,
            tokens,
        })
        .collect())
}

/// Replaces each anchor token by `MASK` with probability `rate`.
/// Returns the masked sequence, the 1-based masked positions and their cell truths.
pub fn mask_anchor<R: Rng + ?Sized>(
    clean: &[TokenPair; SEQ_LEN],
    rate: f64,
    rng: &mut R,
) -> ([TokenPair; SEQ_LEN], Vec<u8>, Vec<u32>) {
    let mut masked = *clean;
    let mut idx = Vec::new();
    let mut truth = Vec::new();
    for (i, tok) in masked.iter_mut().enumerate() {
        if rng.gen_bool(rate) {
            idx.push(i as u8 + 1);
            truth.push(tok.cell);
            *tok = TokenPair::MASKED;
        }
    }
    (masked, idx, truth)
}

fn split(chunk: &[TokenPair; CHUNK_LEN], mode: SplitMode) -> ([TokenPair; SEQ_LEN], [TokenPair; SEQ_LEN]) {
    let mut a = [TokenPair::new(0, 0); SEQ_LEN];
    let mut p = [TokenPair::new(0, 0); SEQ_LEN];
    match mode {
        SplitMode::OddEven => {
            for i in 0..SEQ_LEN {
                a[i] = chunk[2 * i];
                p[i] = chunk[2 * i + 1];
            }
        }
        SplitMode::Half => {
            a.copy_from_slice(&chunk[..SEQ_LEN]);
            p.copy_from_slice(&chunk[SEQ_LEN..]);
        }
    }
    (a, p)
}

/// Builds one triplet per chunk.
///
/// The first `M / 2` chunks use the odd-even split (anchor = odd positions,
/// positive = even positions), the rest the half split (anchor = first 16,
/// positive = last 16). The negative is the positive, under the same split,
/// of a uniformly drawn other chunk. Only the anchor is masked.
pub fn make_triplets<R: Rng + ?Sized>(
    chunks: &[PrepSequence],
    mask_rate: f64,
    rng: &mut R,
) -> Result<Vec<TripletSample>> {
    let m = chunks.len();
    if m < 2 {
        return Err(Error::invalid(
            "chunks",
            format!("need at least 2 chunks to draw negatives, got {m}"),
        ));
    }
    if !(0.0..=1.0).contains(&mask_rate) {
        return Err(Error::invalid("mask_rate", format!("{mask_rate} outside [0, 1]")));
    }
    let mut out = Vec::with_capacity(m);
    for (k, chunk) in chunks.iter().enumerate() {
        let mode = if k < m / 2 {
            SplitMode::OddEven
        } else {
            SplitMode::Half
        };
        let (clean, positive) = split(&chunk.tokens, mode);
        let (anchor, mask_indices, masked_truth) = mask_anchor(&clean, mask_rate, rng);
        // uniform over the M - 1 other chunks
        let mut other = rng.gen_range(0..m - 1);
        if other >= k {
            other += 1;
        }
        let (_, negative) = split(&chunks[other].tokens, mode);
        out.push(TripletSample {
            anchor,
            clean_anchor: clean,
            positive,
            negative,
            mask_indices,
            masked_truth,
            split_mode: mode,
            source: k as u32,
            negative_source: other as u32,
        });
    }
    Ok(out)
}

/// Every online minute as a token, in minute order, without filtering.
pub fn build_downstream(
    log: &DayLog,
    cfg: &WorldConfig,
    vocab: &Vocabulary,
) -> Result<DownstreamTrajectory> {
    let mut tokens = Vec::new();
    let mut minutes = Vec::new();
    let mut cells = vec![None; MINUTES_PER_DAY];
    for (i, s) in log.samples.iter().enumerate().take(MINUTES_PER_DAY) {
        if let Some(loc) = s {
            let (tok, cell) = token_of(*loc, cfg, vocab)?;
            tokens.push(tok);
            minutes.push(i as u16 + 1);
            cells[i] = Some(cell);
        }
    }
    Ok(DownstreamTrajectory {
        player_id: log.player_id,
        day: log.day,
        tokens,
        minutes,
        cells_by_minute: cells,
    })
}

const TRIPLET_MAGIC: &[u8; 8] = b"TGTRIPL\0";
const TRAJ_MAGIC: &[u8; 8] = b"TGTRAJS\0";
const FORMAT_VERSION: u32 = 1;

fn put_seq(out: &mut Vec<u8>, seq: &[TokenPair]) {
    for t in seq {
        out.extend_from_slice(&t.zone.to_le_bytes());
        out.extend_from_slice(&t.cell.to_le_bytes());
    }
}

fn get_seq(r: &mut ByteReader<'_>) -> Result<[TokenPair; SEQ_LEN]> {
    let mut s = [TokenPair::new(0, 0); SEQ_LEN];
    for t in s.iter_mut() {
        *t = TokenPair::new(r.u32()?, r.u32()?);
    }
    Ok(s)
}

/// Binary triplet corpus.
///
/// Layout (little endian): magic `TGTRIPL\0`, version `u32`, count `u32`, then
/// per sample: mode `u8` (0 odd-even, 1 half), source `u32`, negative source
/// `u32`, four sequences of 16 `(zone u32, cell u32)` pairs (anchor, clean
/// anchor, positive, negative), mask count `u8`, the 1-based mask indices as
/// `u8`, and the masked cell truths as `u32`.
pub fn encode_triplets(samples: &[TripletSample]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + samples.len() * (9 + 4 * SEQ_LEN * 8 + 1 + 5 * SEQ_LEN));
    out.extend_from_slice(TRIPLET_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        out.push(match s.split_mode {
            SplitMode::OddEven => 0,
            SplitMode::Half => 1,
        });
        out.extend_from_slice(&s.source.to_le_bytes());
        out.extend_from_slice(&s.negative_source.to_le_bytes());
        put_seq(&mut out, &s.anchor);
        put_seq(&mut out, &s.clean_anchor);
        put_seq(&mut out, &s.positive);
        put_seq(&mut out, &s.negative);
        out.push(s.mask_indices.len() as u8);
        out.extend_from_slice(&s.mask_indices);
        for t in &s.masked_truth {
            out.extend_from_slice(&t.to_le_bytes());
        }
    }
    out
}

pub fn decode_triplets(bytes: &[u8]) -> Result<Vec<TripletSample>> {
    let mut r = ByteReader::new(bytes, "triplet corpus");
    if r.take(8)? != TRIPLET_MAGIC {
        return Err(Error::format("triplet corpus", "bad magic"));
    }
    let v = r.u32()?;
    if v != FORMAT_VERSION {
        return Err(Error::format("triplet corpus", format!("unsupported version {v}")));
    }
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 22));
    for _ in 0..n {
        let split_mode = match r.u8()? {
            0 => SplitMode::OddEven,
            1 => SplitMode::Half,
            x => return Err(Error::format("triplet corpus", format!("bad mode {x}"))),
        };
        let source = r.u32()?;
        let negative_source = r.u32()?;
        let anchor = get_seq(&mut r)?;
        let clean_anchor = get_seq(&mut r)?;
        let positive = get_seq(&mut r)?;
        let negative = get_seq(&mut r)?;
        let k = r.u8()? as usize;
        if k > SEQ_LEN {
            return Err(Error::format("triplet corpus", "mask count > 16"));
        }
        let mask_indices = r.take(k)?.to_vec();
        if mask_indices.iter().any(|&i| i == 0 || i as usize > SEQ_LEN) {
            return Err(Error::format("triplet corpus", "mask index outside [1, 16]"));
        }
        let masked_truth = (0..k).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        out.push(TripletSample {
            anchor,
            clean_anchor,
            positive,
            negative,
            mask_indices,
            masked_truth,
            split_mode,
            source,
            negative_source,
        });
    }
    r.finish()?;
    Ok(out)
}

pub fn save_triplets(samples: &[TripletSample], path: &Path) -> Result<()> {
    std::fs::write(path, encode_triplets(samples)).map_err(|e| Error::io(path, e))
}

pub fn load_triplets(path: &Path) -> Result<Vec<TripletSample>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_triplets(&bytes)
}

/// Binary downstream trajectory table.
///
/// Layout: magic `TGTRAJS\0`, version `u32`, count `u32`, then per trajectory:
/// player `u32`, day `u16`, token count `u32`, and per token: minute `u16`,
/// zone token `u32`, cell token `u32`, cell `(bx u32, by u32, continent u32)`.
pub fn encode_trajectories(trajs: &[DownstreamTrajectory]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(TRAJ_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(trajs.len() as u32).to_le_bytes());
    for t in trajs {
        out.extend_from_slice(&t.player_id.to_le_bytes());
        out.extend_from_slice(&t.day.to_le_bytes());
        out.extend_from_slice(&(t.tokens.len() as u32).to_le_bytes());
        for (tok, &minute) in t.tokens.iter().zip(&t.minutes) {
            let cell = t.cells_by_minute[minute as usize - 1].expect("online minute has a cell");
            out.extend_from_slice(&minute.to_le_bytes());
            out.extend_from_slice(&tok.zone.to_le_bytes());
            out.extend_from_slice(&tok.cell.to_le_bytes());
            out.extend_from_slice(&cell.bx.to_le_bytes());
            out.extend_from_slice(&cell.by.to_le_bytes());
            out.extend_from_slice(&cell.continent_id.to_le_bytes());
        }
    }
    out
}

pub fn decode_trajectories(bytes: &[u8]) -> Result<Vec<DownstreamTrajectory>> {
    let mut r = ByteReader::new(bytes, "trajectory table");
    if r.take(8)? != TRAJ_MAGIC {
        return Err(Error::format("trajectory table", "bad magic"));
    }
    let v = r.u32()?;
    if v != FORMAT_VERSION {
        return Err(Error::format("trajectory table", format!("unsupported version {v}")));
    }
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let player_id = r.u32()?;
        let day = r.u16()?;
        let len = r.u32()? as usize;
        if len > MINUTES_PER_DAY {
            return Err(Error::format("trajectory table", "more than 1440 tokens"));
        }
        let mut t = DownstreamTrajectory {
            player_id,
            day,
            tokens: Vec::with_capacity(len),
            minutes: Vec::with_capacity(len),
            cells_by_minute: vec![None; MINUTES_PER_DAY],
        };
        for _ in 0..len {
            let minute = r.u16()?;
            if minute == 0
                || minute as usize > MINUTES_PER_DAY
                || t.minutes.last().is_some_and(|&p| p >= minute)
            {
                return Err(Error::format("trajectory table", "minutes not strictly increasing in [1, 1440]"));
            }
            t.tokens.push(TokenPair::new(r.u32()?, r.u32()?));
            t.minutes.push(minute);
            t.cells_by_minute[minute as usize - 1] = Some(CellId {
                bx: r.u32()?,
                by: r.u32()?,
                continent_id: r.u32()?,
            });
        }
        out.push(t);
    }
    r.finish()?;
    Ok(out)
}

pub fn save_trajectories(trajs: &[DownstreamTrajectory], path: &Path) -> Result<()> {
    std::fs::write(path, encode_trajectories(trajs)).map_err(|e| Error::io(path, e))
}

pub fn load_trajectories(path: &Path) -> Result<Vec<DownstreamTrajectory>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_trajectories(&bytes)
}
