//! Quantile-ε selection from k-NN distances and DBSCAN over representations.
//!
//! Points are processed in `(player_id, day)` order so the result does not
//! depend on input order. Core points count themselves as a neighbor.
//! Cluster ids: core components are first ordered by their smallest core key,
//! border points join the adjacent cluster that comes first in that order,
//! then ids are renumbered by smallest member key.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::{Key, RepTable};
use crate::synth::{read_json, write_json};

pub const NOISE: i64 = -1;
pub const MIN_SAMPLES: usize = 4;
pub const KNN_K: usize = 4;

/// Which k-NN distances feed the ε quantile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnnMode {
    /// All k distances of every point (N·k values).
    #[default]
    All,
    /// Only the k-th distance of every point (N values).
    Kth,
}

impl std::str::FromStr for KnnMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "kth" => Ok(Self::Kth),
            other => Err(Error::invalid("knn_mode", format!("unknown mode {other:?}"))),
        }
    }
}

fn dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Distances from each point to its `k` nearest other points, ascending per
/// point, concatenated in input order.
pub fn knn_distances(points: &[&[f32]], k: usize, mode: KnnMode) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::invalid("k", "k must be >= 1"));
    }
    if points.len() <= k {
        return Err(Error::invalid(
            "representations",
            format!("need more than {k} points, got {}", points.len()),
        ));
    }
    let per_point: Vec<Vec<f64>> = points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut ds: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| dist(p, q))
                .collect();
            ds.select_nth_unstable_by(k - 1, f64::total_cmp);
            ds.truncate(k);
            ds.sort_by(f64::total_cmp);
            ds
        })
        .collect();
    Ok(match mode {
        KnnMode::All => per_point.into_iter().flatten().collect(),
        KnnMode::Kth => per_point.into_iter().map(|d| d[k - 1]).collect(),
    })
}

/// `q`-quantile with linear interpolation between order statistics
/// (position `q·(n−1)` in the sorted list).
pub fn select_epsilon(distances: &[f64], q: f64) -> Result<f64> {
    if distances.is_empty() {
        return Err(Error::invalid("distances", "empty distance list"));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::invalid("q", format!("{q} outside (0, 1)")));
    }
    let mut s = distances.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(s[lo] + (s[hi] - s[lo]) * (pos - lo as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub q: Option<f64>,
    pub epsilon: f64,
    pub min_samples: usize,
    pub labels: BTreeMap<Key, i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterJson {
    pub id: i64,
    pub members: Vec<Key>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentJson {
    pub q: Option<f64>,
    pub epsilon: f64,
    pub min_samples: usize,
    pub clusters: Vec<ClusterJson>,
    pub noise: Vec<Key>,
}

impl ClusterAssignment {
    pub fn n_clusters(&self) -> usize {
        self.labels.values().filter(|&&l| l != NOISE).max().map_or(0, |&m| m as usize + 1)
    }

    /// Members of each cluster, in key order, indexed by cluster id.
    pub fn clusters(&self) -> Vec<Vec<Key>> {
        let mut out = vec![Vec::new(); self.n_clusters()];
        for (&k, &l) in &self.labels {
            if l != NOISE {
                out[l as usize].push(k);
            }
        }
        out
    }

    pub fn noise(&self) -> Vec<Key> {
        self.labels.iter().filter(|(_, &l)| l == NOISE).map(|(&k, _)| k).collect()
    }

    pub fn to_json(&self) -> AssignmentJson {
        AssignmentJson {
            q: self.q,
            epsilon: self.epsilon,
            min_samples: self.min_samples,
            clusters: self
                .clusters()
                .into_iter()
                .enumerate()
                .map(|(id, members)| ClusterJson {
                    id: id as i64,
                    members,
                })
                .collect(),
            noise: self.noise(),
        }
    }

    pub fn from_json(j: &AssignmentJson) -> Result<Self> {
        let mut labels = BTreeMap::new();
        for (i, c) in j.clusters.iter().enumerate() {
            if c.id != i as i64 {
                return Err(Error::format("assignment", "cluster ids must be 0..n in order"));
            }
            for &k in &c.members {
                if labels.insert(k, c.id).is_some() {
                    return Err(Error::format("assignment", format!("{k:?} listed twice")));
                }
            }
        }
        for &k in &j.noise {
            if labels.insert(k, NOISE).is_some() {
                return Err(Error::format("assignment", format!("{k:?} listed twice")));
            }
        }
        Ok(Self {
            q: j.q,
            epsilon: j.epsilon,
            min_samples: j.min_samples,
            labels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_json(path, "assignment")?)
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// DBSCAN with Euclidean distance; neighbors are points within `epsilon`
/// inclusive, self included.
pub fn dbscan(points: &[(Key, &[f32])], epsilon: f64, min_samples: usize) -> Result<ClusterAssignment> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid("epsilon", format!("{epsilon} must be > 0")));
    }
    if min_samples == 0 {
        return Err(Error::invalid("min_samples", "must be >= 1"));
    }
    let mut sorted: Vec<(Key, &[f32])> = points.to_vec();
    sorted.sort_by_key(|p| p.0);
    if let Some(w) = sorted.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::invalid("representations", format!("duplicate key {:?}", w[0].0)));
    }
    let n = sorted.len();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .filter(|&j| dist(sorted[i].1, sorted[j].1) <= epsilon)
                .collect()
        })
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_samples).collect();

    let mut parent: Vec<usize> = (0..n).collect();
    for i in (0..n).filter(|&i| core[i]) {
        for &j in neighbors[i].iter().filter(|&&j| core[j]) {
            let (a, b) = (find(&mut parent, i), find(&mut parent, j));
            if a != b {
                // the root is always the smallest index of the component
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    // provisional ids in order of smallest core index
    let mut provisional = vec![NOISE; n];
    let mut next = 0i64;
    let mut root_id: BTreeMap<usize, i64> = BTreeMap::new();
    for i in (0..n).filter(|&i| core[i]) {
        let r = find(&mut parent, i);
        let id = *root_id.entry(r).or_insert_with(|| {
            next += 1;
            next - 1
        });
        provisional[i] = id;
    }
    for i in (0..n).filter(|&i| !core[i]) {
        provisional[i] = neighbors[i]
            .iter()
            .filter(|&&j| core[j])
            .map(|&j| provisional[j])
            .min()
            .unwrap_or(NOISE);
    }
    demote_small(&mut provisional, min_samples);
    Ok(ClusterAssignment {
        q: None,
        epsilon,
        min_samples,
        labels: renumber(sorted.iter().map(|p| p.0).zip(provisional)),
    })
}

/// A core whose neighbors were all claimed as borders by a lower cluster can
/// be left with fewer than `min_samples` members; such clusters become noise.
pub(crate) fn demote_small(labels: &mut [i64], min_samples: usize) {
    let mut sizes: BTreeMap<i64, usize> = BTreeMap::new();
    for &l in labels.iter().filter(|&&l| l != NOISE) {
        *sizes.entry(l).or_default() += 1;
    }
    for l in labels.iter_mut() {
        if *l != NOISE && sizes[l] < min_samples {
            *l = NOISE;
        }
    }
}

/// Relabels clusters by their smallest member key.
pub fn renumber(labels: impl IntoIterator<Item = (Key, i64)>) -> BTreeMap<Key, i64> {
    let labels: BTreeMap<Key, i64> = labels.into_iter().collect();
    let mut map: BTreeMap<i64, i64> = BTreeMap::new();
    for &l in labels.values() {
        if l != NOISE && !map.contains_key(&l) {
            let id = map.len() as i64;
            map.insert(l, id);
        }
    }
    labels
        .into_iter()
        .map(|(k, l)| (k, if l == NOISE { NOISE } else { map[&l] }))
        .collect()
}

pub fn detecting_count(a: &ClusterAssignment) -> usize {
    a.labels.values().filter(|&&l| l != NOISE).count()
}

/// ε from the `q`-quantile of 4-NN distances, then DBSCAN with 4 samples.
pub fn cluster_table(table: &RepTable, q: f64, mode: KnnMode) -> Result<ClusterAssignment> {
    table.validate()?;
    let vecs: Vec<&[f32]> = table.rows.iter().map(|r| &r.vector[..]).collect();
    let d = knn_distances(&vecs, KNN_K, mode)?;
    let epsilon = select_epsilon(&d, q)?;
    if epsilon <= 0.0 {
        return Err(Error::invalid(
            "representations",
            format!("the {q} quantile of neighbor distances is 0; too many duplicate points"),
        ));
    }
    let points: Vec<(Key, &[f32])> = table.rows.iter().map(|r| (r.key(), &r.vector[..])).collect();
    let mut a = dbscan(&points, epsilon, MIN_SAMPLES)?;
    a.q = Some(q);
    Ok(a)
}
