//! Cluster quality metrics: time-aware Jaccard contextual similarity over
//! representation-selected pairs, and access-information homogeneity.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{detecting_count, ClusterAssignment, NOISE};
use crate::dataset::DownstreamTrajectory;
use crate::error::{Error, Result};
use crate::extract::{Key, RepTable};
use crate::geo::CellId;
use crate::synth::{AccessInfoGraph, MINUTES_PER_DAY};

pub const WINDOW: usize = 30;
pub const STRIDE: usize = 15;
/// Window starts 1, 16, ..., 1411.
pub const N_WINDOWS: usize = (MINUTES_PER_DAY - WINDOW) / STRIDE + 1;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PairSet {
    pub pos: Vec<(Key, Key)>,
    pub neg: Vec<(Key, Key)>,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum()
}

/// For each non-noise point: the nearest other member of its cluster
/// (ties to the smallest key) and a uniformly drawn non-noise point from a
/// different cluster. With a single cluster no negatives are drawn.
pub fn select_pairs(a: &ClusterAssignment, reps: &RepTable, seed: u64) -> Result<PairSet> {
    let clusters = a.clusters();
    if clusters.is_empty() {
        return Err(Error::invalid("assignment", "no non-noise clusters"));
    }
    let vec_of = |k: Key| {
        reps.get(k)
            .ok_or_else(|| Error::invalid("representations", format!("no representation for {k:?}")))
    };
    let mut pairs = PairSet::default();
    for members in &clusters {
        for &k in members {
            let v = vec_of(k)?;
            let mut best: Option<(f64, Key)> = None;
            for &o in members.iter().filter(|&&o| o != k) {
                let d = sq_dist(v, vec_of(o)?);
                if best.map_or(true, |(bd, _)| d < bd) {
                    best = Some((d, o));
                }
            }
            if let Some((_, o)) = best {
                pairs.pos.push((k, o));
            }
        }
    }
    if clusters.len() < 2 {
        log::warn!("single cluster: no negative pairs drawn");
        return Ok(pairs);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<(Key, i64)> = a.labels.iter().filter(|(_, &l)| l != NOISE).map(|(&k, &l)| (k, l)).collect();
    for (cid, members) in clusters.iter().enumerate() {
        let others: Vec<Key> = all.iter().filter(|(_, l)| *l != cid as i64).map(|(k, _)| *k).collect();
        for &k in members {
            pairs.neg.push((k, others[rng.gen_range(0..others.len())]));
        }
    }
    Ok(pairs)
}

/// Mean over the 95 half-overlapping 30-minute windows of the Jaccard index
/// between the sets of distinct cells visited in each window. A window where
/// both players are offline scores 0.
pub fn time_jaccard(a: &[Option<CellId>], b: &[Option<CellId>]) -> Result<f64> {
    if a.len() != MINUTES_PER_DAY || b.len() != MINUTES_PER_DAY {
        return Err(Error::invalid(
            "cells_by_minute",
            format!("expected {MINUTES_PER_DAY} minutes, got {} and {}", a.len(), b.len()),
        ));
    }
    let mut total = 0.0;
    let mut sa: Vec<CellId> = Vec::with_capacity(WINDOW);
    let mut sb: Vec<CellId> = Vec::with_capacity(WINDOW);
    for w in 0..N_WINDOWS {
        let r = w * STRIDE..w * STRIDE + WINDOW;
        sa.clear();
        sb.clear();
        sa.extend(a[r.clone()].iter().flatten().copied());
        sb.extend(b[r].iter().flatten().copied());
        sa.sort_unstable();
        sa.dedup();
        sb.sort_unstable();
        sb.dedup();
        let inter = sa.iter().filter(|c| sb.binary_search(c).is_ok()).count();
        let union = sa.len() + sb.len() - inter;
        if union > 0 {
            total += inter as f64 / union as f64;
        }
    }
    Ok(total / N_WINDOWS as f64)
}

fn mean_jaccard(
    pairs: &[(Key, Key)],
    trajs: &BTreeMap<Key, &DownstreamTrajectory>,
) -> Result<Option<f64>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let get = |k: &Key| {
        trajs
            .get(k)
            .ok_or_else(|| Error::invalid("trajectories", format!("no trajectory for {k:?}")))
    };
    let mut s = 0.0;
    for (a, b) in pairs {
        s += time_jaccard(&get(a)?.cells_by_minute, &get(b)?.cells_by_minute)?;
    }
    Ok(Some(s / pairs.len() as f64))
}

/// Mean time-aware Jaccard over the positive and negative pairs.
pub fn contextual_similarity(
    pairs: &PairSet,
    trajs: &BTreeMap<Key, &DownstreamTrajectory>,
) -> Result<(f64, Option<f64>)> {
    let pos = mean_jaccard(&pairs.pos, trajs)?
        .ok_or_else(|| Error::invalid("pairs", "no positive pairs"))?;
    Ok((pos, mean_jaccard(&pairs.neg, trajs)?))
}

/// Connected components of the access graph induced by each cluster's
/// members' access nodes, in cluster id order.
pub fn access_components(a: &ClusterAssignment, graph: &AccessInfoGraph) -> Result<Vec<usize>> {
    a.clusters()
        .iter()
        .map(|members| {
            let nodes = members
                .iter()
                .map(|&(p, _)| {
                    graph.player_nodes.get(&p).copied().ok_or_else(|| {
                        Error::invalid("access_graph", format!("player {p} has no access node"))
                    })
                })
                .collect::<Result<Vec<u32>>>()?;
            Ok(graph.components_among(&nodes))
        })
        .collect()
}

/// Mean over clusters of the access-graph component count.
pub fn access_homogeneity(a: &ClusterAssignment, graph: &AccessInfoGraph) -> Result<f64> {
    let comps = access_components(a, graph)?;
    if comps.is_empty() {
        return Err(Error::invalid("assignment", "no non-noise clusters"));
    }
    Ok(comps.iter().sum::<usize>() as f64 / comps.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetrics {
    pub id: i64,
    pub size: usize,
    pub access_components: usize,
    /// Mean time-aware Jaccard of the cluster's positive pairs.
    pub pos_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub q: Option<f64>,
    pub epsilon: f64,
    pub detecting_count: usize,
    pub n_clusters: usize,
    pub pos_mean: Option<f64>,
    pub neg_mean: Option<f64>,
    pub access_homogeneity: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
    pub per_cluster: Vec<ClusterMetrics>,
}

/// Full metrics report. With no clusters the similarity and homogeneity
/// fields are `None`.
pub fn evaluate(
    a: &ClusterAssignment,
    reps: &RepTable,
    trajs: &[DownstreamTrajectory],
    graph: &AccessInfoGraph,
    seed: u64,
) -> Result<MetricsReport> {
    let by_key: BTreeMap<Key, &DownstreamTrajectory> = trajs.iter().map(|t| (t.key(), t)).collect();
    let mut report = MetricsReport {
        q: a.q,
        epsilon: a.epsilon,
        detecting_count: detecting_count(a),
        n_clusters: a.n_clusters(),
        pos_mean: None,
        neg_mean: None,
        access_homogeneity: None,
        n_pos: 0,
        n_neg: 0,
        per_cluster: Vec::new(),
    };
    if report.n_clusters == 0 {
        return Ok(report);
    }
    let pairs = select_pairs(a, reps, seed)?;
    let (pos, neg) = contextual_similarity(&pairs, &by_key)?;
    let comps = access_components(a, graph)?;
    report.pos_mean = Some(pos);
    report.neg_mean = neg;
    report.access_homogeneity = Some(comps.iter().sum::<usize>() as f64 / comps.len() as f64);
    report.n_pos = pairs.pos.len();
    report.n_neg = pairs.neg.len();
    for (id, (members, c)) in a.clusters().iter().zip(&comps).enumerate() {
        let own: Vec<(Key, Key)> = pairs
            .pos
            .iter()
            .filter(|(k, _)| a.labels[k] == id as i64)
            .copied()
            .collect();
        report.per_cluster.push(ClusterMetrics {
            id: id as i64,
            size: members.len(),
            access_components: *c,
            pos_mean: mean_jaccard(&own, &by_key)?.unwrap_or(0.0),
        });
    }
    Ok(report)
}

/// How one planted group landed in an assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecovery {
    pub group_id: u32,
    /// Player-days of the group.
    pub size: usize,
    /// Cluster holding most of the group's player-days (lowest id on ties);
    /// `None` when all of them are noise.
    pub cluster: Option<i64>,
    /// Fraction of that cluster's members belonging to the group.
    pub purity: f64,
    /// Fraction of the group's player-days inside that cluster.
    pub coverage: f64,
}

/// Recovery of planted groups on a synthetic run, where ground truth is known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedRecovery {
    pub groups: Vec<GroupRecovery>,
    /// Fraction of groups whose cluster has purity at or above the threshold.
    pub recovered_fraction: f64,
    /// Clusters where more than half the members come from one planted group.
    pub dominated_clusters: Vec<i64>,
    /// Mean access-graph component count over the dominated clusters.
    pub dominated_homogeneity: Option<f64>,
    /// Fraction of benign player-days labeled noise.
    pub benign_noise_fraction: f64,
}

pub fn planted_recovery(
    a: &ClusterAssignment,
    profiles: &[crate::synth::PlayerProfile],
    graph: &AccessInfoGraph,
    purity_threshold: f64,
) -> Result<PlantedRecovery> {
    let group_of: BTreeMap<u32, Option<u32>> = profiles.iter().map(|p| (p.player_id, p.group_id)).collect();
    let lookup = |k: &Key| {
        group_of
            .get(&k.0)
            .copied()
            .ok_or_else(|| Error::invalid("profiles", format!("no profile for player {}", k.0)))
    };
    let clusters = a.clusters();
    // per cluster: group id -> member count
    let mut composition: Vec<BTreeMap<Option<u32>, usize>> = vec![BTreeMap::new(); clusters.len()];
    for (c, members) in clusters.iter().enumerate() {
        for k in members {
            *composition[c].entry(lookup(k)?).or_default() += 1;
        }
    }
    let mut by_group: BTreeMap<u32, Vec<Key>> = BTreeMap::new();
    let (mut benign, mut benign_noise) = (0usize, 0usize);
    for (k, &label) in &a.labels {
        match lookup(k)? {
            Some(g) => by_group.entry(g).or_default().push(*k),
            None => {
                benign += 1;
                benign_noise += usize::from(label == NOISE);
            }
        }
    }
    let mut groups = Vec::new();
    for (&g, keys) in &by_group {
        let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
        for k in keys {
            let l = a.labels[k];
            if l != NOISE {
                *counts.entry(l).or_default() += 1;
            }
        }
        // max count, lowest id on ties
        let best = counts.iter().fold(None, |b: Option<(i64, usize)>, (&c, &n)| match b {
            Some((_, bn)) if bn >= n => b,
            _ => Some((c, n)),
        });
        let (cluster, purity, coverage) = match best {
            Some((c, n)) => {
                let total = clusters[c as usize].len();
                (Some(c), n as f64 / total as f64, n as f64 / keys.len() as f64)
            }
            None => (None, 0.0, 0.0),
        };
        groups.push(GroupRecovery {
            group_id: g,
            size: keys.len(),
            cluster,
            purity,
            coverage,
        });
    }
    let recovered = groups.iter().filter(|g| g.cluster.is_some() && g.purity >= purity_threshold).count();
    let comps = access_components(a, graph)?;
    let mut dominated_clusters = Vec::new();
    let mut dom_comps = Vec::new();
    for (c, comp) in composition.iter().enumerate() {
        let total: usize = comp.values().sum();
        if comp.iter().any(|(g, &n)| g.is_some() && 2 * n > total) {
            dominated_clusters.push(c as i64);
            dom_comps.push(comps[c]);
        }
    }
    Ok(PlantedRecovery {
        recovered_fraction: if groups.is_empty() { 0.0 } else { recovered as f64 / groups.len() as f64 },
        groups,
        dominated_clusters,
        dominated_homogeneity: (!dom_comps.is_empty())
            .then(|| dom_comps.iter().sum::<usize>() as f64 / dom_comps.len() as f64),
        benign_noise_fraction: if benign == 0 { 1.0 } else { benign_noise as f64 / benign as f64 },
    })
}
