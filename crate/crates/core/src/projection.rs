//! Two-component PCA of the representation table.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::RepTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub player_id: u32,
    pub day: u16,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub explained_variance: [f64; 2],
    pub points: Vec<ProjectedPoint>,
}

/// Leading eigenvector of a symmetric matrix by power iteration from a fixed
/// start vector.
fn power_iteration(cov: &[f64], d: usize) -> (f64, Vec<f64>) {
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + (i as f64) * 1e-3).collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut lambda = 0.0;
    for _ in 0..1000 {
        let mut w = vec![0.0; d];
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = (0..d).map(|j| cov[i * d + j] * v[j]).sum();
        }
        let n = norm(&w);
        if n == 0.0 {
            return (0.0, v);
        }
        w.iter_mut().for_each(|x| *x /= n);
        let delta: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        v = w;
        lambda = n;
        if delta < 1e-12 {
            break;
        }
    }
    (lambda, v)
}

/// Projects onto the two leading principal components. Each component's
/// sign is fixed so its largest-magnitude loading is positive.
pub fn pca_2d(table: &RepTable) -> Result<Projection> {
    let n = table.len();
    let d = table.dim;
    if n == 0 || d == 0 {
        return Err(Error::invalid("representations", "empty table"));
    }
    let mut mean = vec![0.0f64; d];
    for r in &table.rows {
        for (m, v) in mean.iter_mut().zip(&r.vector) {
            *m += *v as f64 / n as f64;
        }
    }
    let mut cov = vec![0.0f64; d * d];
    for r in &table.rows {
        let c: Vec<f64> = r.vector.iter().zip(&mean).map(|(v, m)| *v as f64 - m).collect();
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += c[i] * c[j] / n as f64;
            }
        }
    }
    let mut comps = Vec::new();
    let mut variances = [0.0; 2];
    for variance in variances.iter_mut() {
        let (lambda, mut v) = power_iteration(&cov, d);
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        *variance = lambda;
        comps.push(v);
    }
    let points = table
        .rows
        .iter()
        .map(|r| {
            let c: Vec<f64> = r.vector.iter().zip(&mean).map(|(v, m)| *v as f64 - m).collect();
            let dot = |w: &[f64]| c.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
            ProjectedPoint {
                player_id: r.player_id,
                day: r.day,
                x: dot(&comps[0]),
                y: dot(&comps[1]),
            }
        })
        .collect();
    Ok(Projection {
        explained_variance: variances,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::Representation;

    #[test]
    fn recovers_dominant_axes() {
        // variance 9 along e2, 1 along e0, 0 along e1
        let mut rows = Vec::new();
        for (i, (a, b)) in [(-1.0f32, -3.0f32), (1.0, -3.0), (-1.0, 3.0), (1.0, 3.0)].iter().enumerate() {
            rows.push(Representation {
                player_id: i as u32,
                day: 1,
                vector: vec![*a, 0.0, *b],
            });
        }
        let t = RepTable { dim: 3, rows };
        let p = pca_2d(&t).unwrap();
        assert!((p.explained_variance[0] - 9.0).abs() < 1e-9);
        assert!((p.explained_variance[1] - 1.0).abs() < 1e-9);
        assert!((p.points[0].x - -3.0).abs() < 1e-9);
        assert!((p.points[0].y - -1.0).abs() < 1e-9);
        assert_eq!(pca_2d(&t).unwrap(), p);
    }
}
