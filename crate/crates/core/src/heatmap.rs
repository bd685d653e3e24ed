//! Trajectory heatmaps: one row per player-day, one column per minute,
//! RGB = (continent level, x, y), white when offline. Rows are grouped by
//! cluster id ascending, then player id, with 2-row red separators between
//! clusters. Noise goes to a separate image.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterAssignment, NOISE};
use crate::dataset::DownstreamTrajectory;
use crate::error::{Error, Result};
use crate::extract::Key;
use crate::geo::{CellId, GridLocation, WorldConfig};
use crate::store::write_atomic;
use crate::synth::{write_json, MINUTES_PER_DAY};

pub const WHITE: [u8; 3] = [255, 255, 255];
pub const RED: [u8; 3] = [255, 0, 0];
pub const SEPARATOR_ROWS: u32 = 2;

/// Color of a location. The red channel is the continent's average level
/// min-max normalized over the world's continents; green and blue are the
/// position normalized by the continent's width and height.
pub fn color_of(loc: Option<GridLocation>, world: &WorldConfig) -> Result<[u8; 3]> {
    let Some(loc) = loc else {
        return Ok(WHITE);
    };
    let c = world.check(loc)?;
    let (lo, hi) = world
        .continents
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| (lo.min(c.avg_level), hi.max(c.avg_level)));
    let lv = if hi > lo { (c.avg_level - lo) / (hi - lo) } else { 0.0 };
    let channel = |v: f64| (255.0 * v).round().clamp(0.0, 255.0) as u8;
    Ok([
        channel(lv),
        channel(loc.x as f64 / c.width as f64),
        channel(loc.y as f64 / c.height as f64),
    ])
}

/// Center of a cell, clamped into its continent.
pub fn cell_center(cell: CellId, world: &WorldConfig) -> Result<GridLocation> {
    let c = world
        .continent(cell.continent_id)
        .ok_or_else(|| Error::invalid("continent_id", format!("unknown continent {}", cell.continent_id)))?;
    let half = world.cell_size / 2;
    Ok(GridLocation::new(
        (cell.bx * world.cell_size + half).min(c.width - 1),
        (cell.by * world.cell_size + half).min(c.height - 1),
        cell.continent_id,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeatmapSpec {
    /// Pixels per minute.
    pub x_scale: u32,
    /// Pixels per player row.
    pub y_scale: u32,
    pub noise_separate: bool,
}

impl Default for HeatmapSpec {
    fn default() -> Self {
        Self {
            x_scale: 1,
            y_scale: 1,
            noise_separate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidecarRow {
    /// Logical row (player rows and separator rows counted at scale 1).
    pub row: u32,
    /// First pixel row.
    pub y: u32,
    pub player_id: u32,
    pub day: u16,
    pub cluster: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: u32,
    pub height: u32,
    /// RGB, row-major.
    pub pixels: Vec<u8>,
    pub rows: Vec<SidecarRow>,
    pub spec: HeatmapSpec,
}

impl Heatmap {
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Mean over minutes of the per-minute L∞ channel distance between two
    /// logical player rows, in 0..=255 units.
    pub fn row_distance(&self, a: &SidecarRow, b: &SidecarRow) -> f64 {
        let mut s = 0.0;
        for m in 0..MINUTES_PER_DAY as u32 {
            let x = m * self.spec.x_scale;
            let (pa, pb) = (self.pixel(x, a.y), self.pixel(x, b.y));
            s += (0..3).map(|c| pa[c].abs_diff(pb[c])).max().unwrap_or(0) as f64;
        }
        s / MINUTES_PER_DAY as f64
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width, self.height);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            enc.set_compression(png::Compression::Balanced);
            enc.set_filter(png::Filter::Sub);
            let mut w = enc
                .write_header()
                .map_err(|e| Error::format("png", e.to_string()))?;
            w.write_image_data(&self.pixels)
                .map_err(|e| Error::format("png", e.to_string()))?;
        }
        Ok(out)
    }

    /// Writes the PNG and a `.json` sidecar next to it.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_png()?)?;
        self.write_sidecar(path)
    }

    /// Writes only the sidecar for an image at `path`.
    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        write_json(&sidecar_path(path), &self.rows)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// `<stem>_noise.<ext>` next to `path`.
pub fn noise_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("heatmap");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("png");
    path.with_file_name(format!("{stem}_noise.{ext}"))
}

/// Renders the given groups in order, each group's rows sorted by key.
pub fn render_groups(
    groups: &[(i64, Vec<&DownstreamTrajectory>)],
    world: &WorldConfig,
    spec: HeatmapSpec,
) -> Result<Heatmap> {
    if spec.x_scale == 0 || spec.y_scale == 0 {
        return Err(Error::invalid("spec", "scale factors must be >= 1"));
    }
    let n_players: usize = groups.iter().map(|(_, g)| g.len()).sum();
    if n_players == 0 {
        return Err(Error::invalid("heatmap", "no player rows to render"));
    }
    let logical = n_players as u32 + SEPARATOR_ROWS * (groups.len() as u32 - 1);
    let width = MINUTES_PER_DAY as u32 * spec.x_scale;
    let height = logical * spec.y_scale;
    let row_bytes = width as usize * 3;
    let mut pixels = Vec::with_capacity(row_bytes * height as usize);
    let mut rows = Vec::with_capacity(n_players);
    let mut logical_row = 0u32;

    let push_line = |line: &[u8], pixels: &mut Vec<u8>| {
        for _ in 0..spec.y_scale {
            pixels.extend_from_slice(line);
        }
    };
    let red_line: Vec<u8> = RED.iter().copied().cycle().take(row_bytes).collect();

    for (gi, (cluster, members)) in groups.iter().enumerate() {
        if gi > 0 {
            for _ in 0..SEPARATOR_ROWS {
                push_line(&red_line, &mut pixels);
                logical_row += 1;
            }
        }
        let mut members = members.clone();
        members.sort_by_key(|t| t.key());
        for t in members {
            if t.cells_by_minute.len() != MINUTES_PER_DAY {
                return Err(Error::invalid("cells_by_minute", "expected one entry per minute"));
            }
            let mut line = Vec::with_capacity(row_bytes);
            for cell in &t.cells_by_minute {
                let loc = cell.map(|c| cell_center(c, world)).transpose()?;
                let rgb = color_of(loc, world)?;
                for _ in 0..spec.x_scale {
                    line.extend_from_slice(&rgb);
                }
            }
            rows.push(SidecarRow {
                row: logical_row,
                y: logical_row * spec.y_scale,
                player_id: t.player_id,
                day: t.day,
                cluster: *cluster,
            });
            push_line(&line, &mut pixels);
            logical_row += 1;
        }
    }
    Ok(Heatmap {
        width,
        height,
        pixels,
        rows,
        spec,
    })
}

fn lookup<'a>(
    keys: &[Key],
    trajs: &'a [DownstreamTrajectory],
) -> Result<Vec<&'a DownstreamTrajectory>> {
    keys.iter()
        .map(|k| {
            trajs
                .iter()
                .find(|t| t.key() == *k)
                .ok_or_else(|| Error::invalid("trajectories", format!("no trajectory for {k:?}")))
        })
        .collect()
}

/// Cluster image (all non-noise clusters) and noise image; either is `None`
/// when it would have no rows. With `noise_separate` off, noise is appended
/// to the cluster image as a last group.
pub fn render_assignment(
    a: &ClusterAssignment,
    trajs: &[DownstreamTrajectory],
    world: &WorldConfig,
    spec: HeatmapSpec,
) -> Result<(Option<Heatmap>, Option<Heatmap>)> {
    let mut groups = Vec::new();
    for (id, members) in a.clusters().iter().enumerate() {
        groups.push((id as i64, lookup(members, trajs)?));
    }
    let noise = lookup(&a.noise(), trajs)?;
    let mut noise_img = None;
    if spec.noise_separate {
        if !noise.is_empty() {
            noise_img = Some(render_groups(&[(NOISE, noise)], world, spec)?);
        }
    } else if !noise.is_empty() {
        groups.push((NOISE, noise));
    }
    let main = if groups.is_empty() {
        None
    } else {
        Some(render_groups(&groups, world, spec)?)
    };
    Ok((main, noise_img))
}

/// Image of a single cluster; [`NOISE`] selects the noise players.
pub fn render_cluster(
    a: &ClusterAssignment,
    cluster: i64,
    trajs: &[DownstreamTrajectory],
    world: &WorldConfig,
    spec: HeatmapSpec,
) -> Result<Heatmap> {
    let keys: Vec<Key> = a.labels.iter().filter(|(_, &l)| l == cluster).map(|(&k, _)| k).collect();
    if keys.is_empty() {
        return Err(Error::NotFound(format!("cluster {cluster}")));
    }
    render_groups(&[(cluster, lookup(&keys, trajs)?)], world, spec)
}

/// Writes the cluster image to `path` and the noise image to
/// [`noise_path`], each with a sidecar. Returns the image paths written.
pub fn render(
    a: &ClusterAssignment,
    trajs: &[DownstreamTrajectory],
    world: &WorldConfig,
    spec: HeatmapSpec,
    path: &Path,
) -> Result<Vec<PathBuf>> {
    let (main, noise) = render_assignment(a, trajs, world, spec)?;
    if main.is_none() && noise.is_none() {
        return Err(Error::invalid("assignment", "no players to render"));
    }
    let mut written = Vec::new();
    if let Some(img) = main {
        img.write(path)?;
        written.push(path.to_path_buf());
    }
    if let Some(img) = noise {
        let p = noise_path(path);
        img.write(&p)?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn traj(player_id: u32, cells: Vec<Option<CellId>>) -> DownstreamTrajectory {
        DownstreamTrajectory {
            player_id,
            day: 1,
            tokens: vec![],
            minutes: vec![],
            cells_by_minute: cells,
        }
    }

    fn cell(bx: u32, by: u32, c: u32) -> Option<CellId> {
        Some(CellId { bx, by, continent_id: c })
    }

    #[test]
    fn color_examples() {
        let w = WorldConfig::default();
        assert_eq!(color_of(None, &w).unwrap(), WHITE);
        // continent 1 has the lowest level
        assert_eq!(color_of(Some(GridLocation::new(0, 0, 1)), &w).unwrap(), [0, 0, 0]);
        let top = color_of(Some(GridLocation::new(0, 0, 4)), &w).unwrap();
        assert_eq!(top[0], 255);
        assert!(color_of(Some(GridLocation::new(0, 0, 9)), &w).is_err());
        // same cell, small continent: channels differ by < 8
        let a = color_of(Some(GridLocation::new(248, 248, 4)), &w).unwrap();
        let b = color_of(Some(GridLocation::new(255, 255, 4)), &w).unwrap();
        assert!((0..3).all(|i| a[i].abs_diff(b[i]) < 8));
    }

    #[test]
    fn single_offline_player_is_white_strip() {
        let w = WorldConfig::default();
        let t = traj(1, vec![None; 1440]);
        let h = render_groups(&[(0, vec![&t])], &w, HeatmapSpec::default()).unwrap();
        assert_eq!((h.width, h.height), (1440, 1));
        assert!(h.pixels.iter().all(|&p| p == 255));
    }

    #[test]
    fn layout_with_separator() {
        let w = WorldConfig::default();
        let trajs: Vec<_> = (0..8).map(|p| traj(p, vec![cell(p, 1, 0); 1440])).collect();
        let labels: BTreeMap<Key, i64> = (0..8).map(|p| ((p, 1), (p / 4) as i64)).collect();
        let a = ClusterAssignment { q: Some(0.05), epsilon: 1.0, min_samples: 4, labels };
        let (main, noise) = render_assignment(&a, &trajs, &w, HeatmapSpec::default()).unwrap();
        let main = main.unwrap();
        assert!(noise.is_none());
        assert_eq!(main.height, 8 + 2);
        assert_eq!(main.pixel(0, 4), RED);
        assert_eq!(main.pixel(1439, 5), RED);
        assert_eq!(main.rows[4].row, 6);
        assert_eq!(main.rows[4].player_id, 4);

        let spec = HeatmapSpec { x_scale: 2, y_scale: 3, noise_separate: true };
        let scaled = render_assignment(&a, &trajs, &w, spec).unwrap().0.unwrap();
        assert_eq!((scaled.width, scaled.height), (2880, 30));
        assert_eq!(scaled.rows[4].y, 18);
    }

    #[test]
    fn noise_goes_to_separate_image_and_output_is_deterministic() {
        let w = WorldConfig::default();
        let trajs: Vec<_> = (0..6).map(|p| traj(p, vec![cell(p, p, 0); 1440])).collect();
        let mut labels: BTreeMap<Key, i64> = (0..4).map(|p| ((p, 1), 0)).collect();
        labels.insert((4, 1), NOISE);
        labels.insert((5, 1), NOISE);
        let a = ClusterAssignment { q: None, epsilon: 1.0, min_samples: 4, labels };
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.png");
        let p2 = dir.path().join("b.png");
        let w1 = render(&a, &trajs, &w, HeatmapSpec::default(), &p1).unwrap();
        render(&a, &trajs, &w, HeatmapSpec::default(), &p2).unwrap();
        assert_eq!(w1.len(), 2);
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert!(dir.path().join("a_noise.png").exists());
        assert!(dir.path().join("a.json").exists());
        let noise = render_cluster(&a, NOISE, &trajs, &w, HeatmapSpec::default()).unwrap();
        assert_eq!(noise.height, 2);
        assert!(render_cluster(&a, 7, &trajs, &w, HeatmapSpec::default()).is_err());
    }

    #[test]
    fn identical_rows_have_zero_distance() {
        let w = WorldConfig::default();
        let t1 = traj(1, vec![cell(3, 3, 0); 1440]);
        let t2 = traj(2, vec![cell(3, 3, 0); 1440]);
        let h = render_groups(&[(0, vec![&t1, &t2])], &w, HeatmapSpec::default()).unwrap();
        assert_eq!(h.row_distance(&h.rows[0], &h.rows[1]), 0.0);
    }
}
