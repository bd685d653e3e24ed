//! Ground-truthed synthetic game logs.
//!
//! Benign players wander independently (random waypoints with idling, the odd
//! dungeon trip or village visit). Bot groups follow one shared script per
//! day: synchronized login/logout, co-located hunting around a leader path
//! with at most one cell of jitter, a mid-session switch of hunting ground,
//! and sporadic solo potion runs and deaths that teleport one member to the
//! village and back.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{GridLocation, WorldConfig};

pub const MINUTES_PER_DAY: usize = 1440;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Archetype {
    Benign,
    Bot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlayerProfile {
    pub player_id: u32,
    pub archetype: Archetype,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_id: Option<u32>,
    pub access_node: u32,
    pub level: f64,
}

/// One player's day, one slot per minute (`None` = offline).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DayLog {
    pub player_id: u32,
    pub day: u16,
    pub samples: Vec<Option<GridLocation>>,
}

impl DayLog {
    pub fn offline(player_id: u32, day: u16) -> Self {
        Self {
            player_id,
            day,
            samples: vec![None; MINUTES_PER_DAY],
        }
    }

    pub fn online_minutes(&self) -> usize {
        self.samples.iter().filter(|s| s.is_some()).count()
    }
}

/// Undirected "same IP or device network" graph over access nodes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessInfoGraph {
    pub n_nodes: u32,
    /// Sorted `(a, b)` pairs with `a < b`.
    pub edges: Vec<(u32, u32)>,
    /// Player id to access node.
    pub player_nodes: BTreeMap<u32, u32>,
}

impl AccessInfoGraph {
    pub fn new(n_nodes: u32, edges: impl IntoIterator<Item = (u32, u32)>) -> Result<Self> {
        let mut out: Vec<(u32, u32)> = Vec::new();
        for (a, b) in edges {
            if a == b {
                return Err(Error::invalid("edges", format!("self-loop on node {a}")));
            }
            if a >= n_nodes || b >= n_nodes {
                return Err(Error::invalid("edges", format!("edge ({a}, {b}) out of range")));
            }
            out.push((a.min(b), a.max(b)));
        }
        out.sort_unstable();
        out.dedup();
        Ok(Self {
            n_nodes,
            edges: out,
            player_nodes: BTreeMap::new(),
        })
    }

    /// Number of connected components of the subgraph induced by `nodes`.
    pub fn components_among(&self, nodes: &[u32]) -> usize {
        let mut uniq: Vec<u32> = nodes.to_vec();
        uniq.sort_unstable();
        uniq.dedup();
        let pos = |n: u32| uniq.binary_search(&n).ok();
        let mut parent: Vec<usize> = (0..uniq.len()).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        let mut comps = uniq.len();
        for &(a, b) in &self.edges {
            if let (Some(i), Some(j)) = (pos(a), pos(b)) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri] = rj;
                    comps -= 1;
                }
            }
        }
        comps
    }

    /// Component label of every node (smallest node id in the component).
    pub fn component_labels(&self) -> Vec<u32> {
        let mut parent: Vec<u32> = (0..self.n_nodes).collect();
        fn find(p: &mut [u32], mut i: u32) -> u32 {
            while p[i as usize] != i {
                p[i as usize] = p[p[i as usize] as usize];
                i = p[i as usize];
            }
            i
        }
        for &(a, b) in &self.edges {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb) as usize] = ra.min(rb);
            }
        }
        (0..self.n_nodes).map(|i| find(&mut parent, i)).collect()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        read_json(path, "access graph")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeleportKind {
    Death,
    PotionRun,
    ReturnToGroup,
    GroundSwitch,
    DungeonEntry,
    DungeonExit,
    VillageVisit,
    VillageReturn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeleportEvent {
    pub player_id: u32,
    pub day: u16,
    /// 1-based minute at which the player appears at the destination.
    pub minute: u16,
    pub kind: TeleportKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Village {
    pub continent_id: u32,
    pub x: u32,
    pub y: u32,
    pub radius: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub n_benign: usize,
    pub n_groups: usize,
    pub group_size_min: usize,
    pub group_size_max: usize,
    pub n_days: u16,
    /// Probability that a bot stands one cell off the leader in a given minute.
    pub jitter_prob: f64,
    pub potion_runs_per_hour: f64,
    pub deaths_per_hour: f64,
    /// Probability that a benign player shares a device network with another.
    pub household_share_prob: f64,
    /// Per-minute coordinate budget outside teleports.
    pub max_speed: u32,
    /// Group members must agree on their cell in more than this fraction of
    /// co-online minutes.
    pub min_cell_agreement: f64,
    /// Floor on time-aware Jaccard between members of a planted group.
    pub group_jaccard_floor: f64,
    /// Expected time-aware Jaccard ceiling for random benign pairs.
    pub benign_jaccard_ceiling: f64,
    pub village: Village,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_benign: 140,
            n_groups: 10,
            group_size_min: 4,
            group_size_max: 8,
            n_days: 2,
            jitter_prob: 0.2,
            potion_runs_per_hour: 0.12,
            deaths_per_hour: 0.04,
            household_share_prob: 0.02,
            max_speed: 256,
            min_cell_agreement: 0.5,
            group_jaccard_floor: 0.25,
            benign_jaccard_ceiling: 0.05,
            village: Village {
                continent_id: 0,
                x: 1024,
                y: 1024,
                radius: 40,
            },
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self, world: &WorldConfig) -> Result<()> {
        if self.group_size_min < 4 {
            return Err(Error::Config(format!(
                "group_size_min {} < 4: a collectively-behaving group has at least 4 members",
                self.group_size_min
            )));
        }
        if self.group_size_max < self.group_size_min {
            return Err(Error::Config("group_size_max < group_size_min".into()));
        }
        if self.n_days == 0 {
            return Err(Error::Config("n_days must be >= 1".into()));
        }
        for (name, p) in [
            ("jitter_prob", self.jitter_prob),
            ("household_share_prob", self.household_share_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1]")));
            }
        }
        if self.potion_runs_per_hour < 0.0 || self.deaths_per_hour < 0.0 {
            return Err(Error::Config("event rates must be >= 0".into()));
        }
        if self.max_speed < 32 {
            return Err(Error::Config("max_speed must be >= 32".into()));
        }
        let v = &self.village;
        let c = world
            .continent(v.continent_id)
            .ok_or_else(|| Error::Config(format!("village continent {} unknown", v.continent_id)))?;
        if v.x < v.radius || v.y < v.radius || v.x + v.radius >= c.width || v.y + v.radius >= c.height
        {
            return Err(Error::Config("village does not fit in its continent".into()));
        }
        if self.n_groups * 2 > hunting_grounds(world, self).len() {
            return Err(Error::Config(format!(
                "world has too few free zones for {} groups",
                self.n_groups
            )));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(format!("scenario config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario config is always serializable")
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub profiles: Vec<PlayerProfile>,
    /// Sorted by `(day, player_id)`.
    pub logs: Vec<DayLog>,
    pub graph: AccessInfoGraph,
    pub teleports: Vec<TeleportEvent>,
}

/// Square region of side `2 * half` centred in a zone; groups roam inside.
#[derive(Debug, Clone, Copy)]
struct Ground {
    continent_id: u32,
    cx: u32,
    cy: u32,
    half: u32,
}

impl Ground {
    fn clamp(&self, x: i64, y: i64) -> (u32, u32) {
        let lo_x = (self.cx - self.half) as i64;
        let lo_y = (self.cy - self.half) as i64;
        let hi_x = (self.cx + self.half - 1) as i64;
        let hi_y = (self.cy + self.half - 1) as i64;
        (x.clamp(lo_x, hi_x) as u32, y.clamp(lo_y, hi_y) as u32)
    }
}

/// Every zone that fits a hunting ground and does not touch the village.
fn hunting_grounds(world: &WorldConfig, scenario: &ScenarioConfig) -> Vec<Ground> {
    let zs = world.zone_size;
    let half = (zs / 4).max(world.cell_size);
    let v = &scenario.village;
    let mut out = Vec::new();
    for c in &world.continents {
        for zy in 0..c.height / zs {
            for zx in 0..c.width / zs {
                if c.id == v.continent_id && v.x / zs == zx && v.y / zs == zy {
                    continue;
                }
                out.push(Ground {
                    continent_id: c.id,
                    cx: zx * zs + zs / 2,
                    cy: zy * zs + zs / 2,
                    half,
                });
            }
        }
    }
    out
}

fn substream(seed: u64, domain: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(domain.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (a << 20) ^ b);
    rng
}

const DOMAIN_ROSTER: u64 = 1;
const DOMAIN_GROUP: u64 = 2;
const DOMAIN_MEMBER: u64 = 3;
const DOMAIN_BENIGN: u64 = 4;

/// Runs the scenario. Output is a pure function of `(world, scenario, seed)`.
pub fn simulate(world: &WorldConfig, scenario: &ScenarioConfig, seed: u64) -> Result<Simulation> {
    world.validate()?;
    scenario.validate(world)?;
    let mut roster_rng = substream(seed, DOMAIN_ROSTER, 0, 0);

    let sizes: Vec<usize> = (0..scenario.n_groups)
        .map(|_| roster_rng.gen_range(scenario.group_size_min..=scenario.group_size_max))
        .collect();
    let n_bots: usize = sizes.iter().sum();
    let n_players = scenario.n_benign + n_bots;

    // Player ids are shuffled so they do not leak the archetype.
    let mut ids: Vec<u32> = (0..n_players as u32).collect();
    ids.shuffle(&mut roster_rng);
    let mut grounds = hunting_grounds(world, scenario);
    grounds.shuffle(&mut roster_rng);

    let mut groups: Vec<Vec<u32>> = Vec::with_capacity(scenario.n_groups);
    let mut next = 0;
    for &s in &sizes {
        let mut members = ids[next..next + s].to_vec();
        members.sort_unstable();
        groups.push(members);
        next += s;
    }
    let mut benign: Vec<u32> = ids[next..].to_vec();
    benign.sort_unstable();

    let mut profiles: Vec<PlayerProfile> = Vec::with_capacity(n_players);
    let mut edges = Vec::new();
    for (g, members) in groups.iter().enumerate() {
        let level = world
            .continent(grounds[2 * g].continent_id)
            .map(|c| c.avg_level)
            .unwrap_or(0.0);
        for (i, &a) in members.iter().enumerate() {
            for &b in &members[i + 1..] {
                edges.push((a, b));
            }
            profiles.push(PlayerProfile {
                player_id: a,
                archetype: Archetype::Bot,
                group_id: Some(g as u32),
                access_node: a,
                level,
            });
        }
    }
    for &p in &benign {
        if benign.len() > 1 && roster_rng.gen_bool(scenario.household_share_prob) {
            let other = loop {
                let o = benign[roster_rng.gen_range(0..benign.len())];
                if o != p {
                    break o;
                }
            };
            edges.push((p, other));
        }
        profiles.push(PlayerProfile {
            player_id: p,
            archetype: Archetype::Benign,
            group_id: None,
            access_node: p,
            level: roster_rng.gen_range(1.0..80.0f64).round(),
        });
    }
    profiles.sort_by_key(|p| p.player_id);
    let mut graph = AccessInfoGraph::new(n_players as u32, edges)?;
    graph.player_nodes = profiles.iter().map(|p| (p.player_id, p.access_node)).collect();

    let mut logs = Vec::with_capacity(n_players * scenario.n_days as usize);
    let mut teleports = Vec::new();
    for day in 1..=scenario.n_days {
        for (g, members) in groups.iter().enumerate() {
            let (l, t) = simulate_group(
                world,
                scenario,
                seed,
                g,
                day,
                members,
                grounds[2 * g],
                grounds[2 * g + 1],
            );
            logs.extend(l);
            teleports.extend(t);
        }
        for &p in &benign {
            let (l, t) = simulate_benign(world, scenario, seed, p, day);
            logs.push(l);
            teleports.extend(t);
        }
    }
    logs.sort_by_key(|l| (l.day, l.player_id));
    teleports.sort_by_key(|t| (t.day, t.player_id, t.minute));
    Ok(Simulation {
        profiles,
        logs,
        graph,
        teleports,
    })
}

fn village_point(v: &Village, rng: &mut ChaCha8Rng) -> GridLocation {
    let r = v.radius as i64;
    GridLocation::new(
        (v.x as i64 + rng.gen_range(-r..=r)) as u32,
        (v.y as i64 + rng.gen_range(-r..=r)) as u32,
        v.continent_id,
    )
}

#[allow(clippy::too_many_arguments)]
fn simulate_group(
    world: &WorldConfig,
    scenario: &ScenarioConfig,
    seed: u64,
    group: usize,
    day: u16,
    members: &[u32],
    primary: Ground,
    secondary: Ground,
) -> (Vec<DayLog>, Vec<TeleportEvent>) {
    let mut rng = substream(seed, DOMAIN_GROUP, group as u64, day as u64);
    let login = rng.gen_range(0..360usize);
    let len = rng.gen_range(720..=1200usize).min(MINUTES_PER_DAY - login);
    let logout = login + len;
    let switch = login + rng.gen_range(len / 3..=2 * len / 3);

    // Leader path, one position per online minute.
    let step = (world.cell_size * 3) as i64;
    let mut leader: Vec<(Ground, u32, u32)> = Vec::with_capacity(len);
    let mut ground = primary;
    let (mut x, mut y) = ground.clamp(
        ground.cx as i64 + rng.gen_range(-(ground.half as i64)..ground.half as i64),
        ground.cy as i64 + rng.gen_range(-(ground.half as i64)..ground.half as i64),
    );
    for m in login..logout {
        if m == switch {
            ground = secondary;
            (x, y) = (ground.cx, ground.cy);
        } else if rng.gen_bool(0.75) {
            (x, y) = ground.clamp(
                x as i64 + rng.gen_range(-step..=step),
                y as i64 + rng.gen_range(-step..=step),
            );
        }
        leader.push((ground, x, y));
    }

    let mut logs = Vec::with_capacity(members.len());
    let mut events = Vec::new();
    let cs = world.cell_size as i64;
    let p_potion = scenario.potion_runs_per_hour / 60.0;
    let p_death = scenario.deaths_per_hour / 60.0;
    for &pid in members {
        let mut mrng = substream(seed, DOMAIN_MEMBER, pid as u64, day as u64);
        let mut log = DayLog::offline(pid, day);
        let mut away_until = 0usize;
        for (i, m) in (login..logout).enumerate() {
            let (g, lx, ly) = leader[i];
            let minute = (m + 1) as u16;
            if m < away_until {
                let prev = log.samples[m - 1].expect("online during excursion");
                let r = scenario.village.radius as i64;
                let vx = (prev.x as i64 + mrng.gen_range(-8..=8))
                    .clamp(scenario.village.x as i64 - r, scenario.village.x as i64 + r);
                let vy = (prev.y as i64 + mrng.gen_range(-8..=8))
                    .clamp(scenario.village.y as i64 - r, scenario.village.y as i64 + r);
                log.samples[m] = Some(GridLocation::new(vx as u32, vy as u32, prev.continent_id));
                continue;
            }
            if m == away_until && away_until > 0 && m > login {
                events.push(TeleportEvent {
                    player_id: pid,
                    day,
                    minute,
                    kind: TeleportKind::ReturnToGroup,
                });
                away_until = 0;
            } else if m == switch && m > login {
                events.push(TeleportEvent {
                    player_id: pid,
                    day,
                    minute,
                    kind: TeleportKind::GroundSwitch,
                });
            }
            // Excursions start only well inside the session so the member
            // always comes back before logout and never across the switch.
            let can_leave = m > login + 10 && m + 12 < logout && (m + 12 < switch || m > switch + 1);
            if can_leave {
                let u: f64 = mrng.gen();
                let kind = if u < p_potion {
                    Some((TeleportKind::PotionRun, mrng.gen_range(2..=5usize)))
                } else if u < p_potion + p_death {
                    Some((TeleportKind::Death, mrng.gen_range(3..=8usize)))
                } else {
                    None
                };
                if let Some((kind, dur)) = kind {
                    log.samples[m] = Some(village_point(&scenario.village, &mut mrng));
                    events.push(TeleportEvent {
                        player_id: pid,
                        day,
                        minute,
                        kind,
                    });
                    away_until = m + dur;
                    continue;
                }
            }
            let (ox, oy) = if mrng.gen_bool(scenario.jitter_prob) {
                loop {
                    let o = (mrng.gen_range(-1..=1i64), mrng.gen_range(-1..=1i64));
                    if o != (0, 0) {
                        break o;
                    }
                }
            } else {
                (0, 0)
            };
            let (px, py) = g.clamp(lx as i64 + ox * cs, ly as i64 + oy * cs);
            log.samples[m] = Some(GridLocation::new(px, py, g.continent_id));
        }
        logs.push(log);
    }
    (logs, events)
}

fn simulate_benign(
    world: &WorldConfig,
    scenario: &ScenarioConfig,
    seed: u64,
    pid: u32,
    day: u16,
) -> (DayLog, Vec<TeleportEvent>) {
    // Home continent and pace are persistent across days.
    let mut prng = substream(seed, DOMAIN_BENIGN, pid as u64, 0);
    let home = if prng.gen_bool(0.7) || world.continents.len() == 1 {
        scenario.village.continent_id
    } else {
        world.continents[prng.gen_range(0..world.continents.len())].id
    };
    let speed = prng.gen_range(16..=64i64).min(scenario.max_speed as i64);

    let mut rng = substream(seed, DOMAIN_BENIGN, pid as u64, day as u64);
    let mut log = DayLog::offline(pid, day);
    let mut events = Vec::new();
    let n_sessions = if rng.gen_bool(0.35) { 2 } else { 1 };
    let mut cursor = rng.gen_range(0..900usize);
    for _ in 0..n_sessions {
        if cursor >= MINUTES_PER_DAY - 30 {
            break;
        }
        let len = rng.gen_range(60..=480usize).min(MINUTES_PER_DAY - cursor);
        run_benign_session(
            world,
            scenario,
            &mut rng,
            &mut log,
            &mut events,
            home,
            speed,
            cursor,
            cursor + len,
        );
        cursor += len + rng.gen_range(60..=300usize);
    }
    (log, events)
}

#[allow(clippy::too_many_arguments)]
fn run_benign_session(
    world: &WorldConfig,
    scenario: &ScenarioConfig,
    rng: &mut ChaCha8Rng,
    log: &mut DayLog,
    events: &mut Vec<TeleportEvent>,
    home: u32,
    speed: i64,
    start: usize,
    end: usize,
) {
    let pid = log.player_id;
    let day = log.day;
    let random_point = |rng: &mut ChaCha8Rng, cid: u32| {
        let c = world.continent(cid).expect("declared continent");
        GridLocation::new(rng.gen_range(0..c.width), rng.gen_range(0..c.height), cid)
    };
    let dungeon = if world.continents.len() > 1 && rng.gen_bool(0.3) && end - start > 120 {
        let others: Vec<u32> = world
            .continents
            .iter()
            .map(|c| c.id)
            .filter(|&c| c != home)
            .collect();
        let enter = rng.gen_range(start + 20..end - 60);
        let stay = rng.gen_range(20..=90usize).min(end - enter - 10);
        Some((others[rng.gen_range(0..others.len())], enter, enter + stay))
    } else {
        None
    };
    let village_trip = if rng.gen_bool(0.25) && end - start > 60 {
        let at = rng.gen_range(start + 10..end - 30);
        Some((at, at + rng.gen_range(5..=15usize)))
    } else {
        None
    };

    let mut pos = random_point(rng, home);
    let mut waypoint = random_point(rng, home);
    let mut idle = 0usize;
    let mut saved: Option<(GridLocation, GridLocation)> = None;
    for m in start..end {
        let minute = (m + 1) as u16;
        let teleport = |kind, events: &mut Vec<TeleportEvent>| {
            events.push(TeleportEvent {
                player_id: pid,
                day,
                minute,
                kind,
            })
        };
        if let Some((cid, enter, exit)) = dungeon {
            if m == enter {
                saved = Some((pos, waypoint));
                pos = random_point(rng, cid);
                waypoint = random_point(rng, cid);
                teleport(TeleportKind::DungeonEntry, events);
            } else if m == exit {
                (pos, waypoint) = saved.take().expect("entered before exit");
                teleport(TeleportKind::DungeonExit, events);
            }
        }
        if let Some((at, back)) = village_trip {
            let overlaps_dungeon = dungeon.is_some_and(|(_, a, b)| at <= b && back >= a);
            if !overlaps_dungeon {
                if m == at {
                    saved = Some((pos, waypoint));
                    pos = village_point(&scenario.village, rng);
                    waypoint = pos;
                    idle = back - at;
                    teleport(TeleportKind::VillageVisit, events);
                } else if m == back {
                    (pos, waypoint) = saved.take().expect("visited before return");
                    idle = 0;
                    teleport(TeleportKind::VillageReturn, events);
                }
            }
        }
        if idle > 0 {
            idle -= 1;
        } else if pos == waypoint {
            idle = rng.gen_range(5..=90usize);
            waypoint = random_point(rng, pos.continent_id);
        } else {
            let dx = (waypoint.x as i64 - pos.x as i64).clamp(-speed, speed);
            let dy = (waypoint.y as i64 - pos.y as i64).clamp(-speed, speed);
            pos = GridLocation::new(
                (pos.x as i64 + dx) as u32,
                (pos.y as i64 + dy) as u32,
                pos.continent_id,
            );
        }
        log.samples[m] = Some(pos);
    }
}

fn day_file(dir: &Path, day: u16) -> PathBuf {
    dir.join(format!("day_{day:02}.csv"))
}

/// Writes `day_DD.csv` files with lines `player_id,minute_index,x,y,continent_id`.
/// Offline minutes are omitted; minute indices are 1-based.
pub fn export_logs(logs: &[DayLog], dir: &Path) -> Result<Vec<PathBuf>> {
    if logs.is_empty() {
        return Err(Error::invalid("logs", "nothing to export"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut by_day: BTreeMap<u16, Vec<&DayLog>> = BTreeMap::new();
    for l in logs {
        by_day.entry(l.day).or_default().push(l);
    }
    let mut written = Vec::new();
    for (day, mut day_logs) in by_day {
        day_logs.sort_by_key(|l| l.player_id);
        let mut out = String::new();
        for l in day_logs {
            for (i, s) in l.samples.iter().enumerate() {
                if let Some(loc) = s {
                    writeln!(
                        out,
                        "{},{},{},{},{}",
                        l.player_id,
                        i + 1,
                        loc.x,
                        loc.y,
                        loc.continent_id
                    )
                    .unwrap();
                }
            }
        }
        let path = day_file(dir, day);
        std::fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Reads every `day_DD.csv` in `dir`. Players appear once per day they were
/// online; result is sorted by `(day, player_id)`.
pub fn import_logs(dir: &Path) -> Result<Vec<DayLog>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(dir, e))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(day) = name
            .strip_prefix("day_")
            .and_then(|s| s.strip_suffix(".csv"))
            .and_then(|s| s.parse::<u16>().ok())
        {
            files.push((day, e.path()));
        }
    }
    if files.is_empty() {
        return Err(Error::NotFound(format!("no day_*.csv files in {}", dir.display())));
    }
    files.sort();
    let mut logs = Vec::new();
    for (day, path) in files {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut by_player: BTreeMap<u32, DayLog> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: &str| {
                Error::format("log file", format!("{}:{}: {msg}", path.display(), lineno + 1))
            };
            let fields: Vec<u32> = line
                .split(',')
                .map(|f| f.trim().parse::<u32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("expected 5 unsigned integers"))?;
            let [pid, minute, x, y, c] = fields[..] else {
                return Err(bad("expected 5 fields"));
            };
            if !(1..=MINUTES_PER_DAY as u32).contains(&minute) {
                return Err(bad("minute_index outside [1, 1440]"));
            }
            let log = by_player
                .entry(pid)
                .or_insert_with(|| DayLog::offline(pid, day));
            log.samples[minute as usize - 1] = Some(GridLocation::new(x, y, c));
        }
        logs.extend(by_player.into_values());
    }
    Ok(logs)
}

pub fn save_profiles(profiles: &[PlayerProfile], path: &Path) -> Result<()> {
    write_json(path, &profiles)
}

pub fn load_profiles(path: &Path) -> Result<Vec<PlayerProfile>> {
    read_json(path, "profiles")
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format("json", e.to_string()))?;
    s.push('\n');
    crate::store::write_atomic(path, s.as_bytes())
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &'static str) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::format(what, format!("{}: {e}", path.display())))
}
