//! Reconstruction metrics: Chamfer L2, asymmetric Chamfer, F-score,
//! occupancy IoU and area-weighted surface sampling.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mesh::TriMesh;
use crate::sdf::{NearestNeighbors, ScalarGrid3};

/// Default F-score distance threshold in world units.
pub const DEFAULT_TAU: f64 = 0.01;
/// Default number of surface samples per mesh.
pub const DEFAULT_SAMPLES: usize = 10_000;

/// Uniform samples over the mesh surface (triangles picked by area).
pub fn sample_surface(mesh: &TriMesh, n: usize, seed: u64) -> Result<Vec<[f64; 3]>> {
    mesh.validate()?;
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.area(t);
        cdf.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::Argument("cannot sample an empty mesh".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let u = rng.random::<f64>() * total;
            let t = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
            let [a, b, c] = mesh.triangle(t);
            let (r1, r2): (f64, f64) = (rng.random(), rng.random());
            let s = r1.sqrt();
            let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
            [0, 1, 2].map(|i| wa * a[i] + wb * b[i] + wc * c[i])
        })
        .collect())
}

fn nonempty(a: &[[f64; 3]], what: &str) -> Result<()> {
    if a.is_empty() {
        return Err(Error::Argument(format!("{what} point set is empty")));
    }
    Ok(())
}

/// Squared nearest-neighbour distance from each point of `a` to `b`.
pub fn nn_sq_distances(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<Vec<f64>> {
    nonempty(a, "query")?;
    nonempty(b, "reference")?;
    let index = NearestNeighbors::new(b.to_vec())?;
    Ok(a.par_iter().map(|p| index.nearest(p).1).collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `10³ · mean_a min_b ‖a − b‖²`.
pub fn asym_chamfer(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    Ok(1e3 * mean(&nn_sq_distances(a, b)?))
}

/// Symmetric Chamfer L2: the two directional means averaged, times 10³.
pub fn chamfer_l2(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    Ok(0.5 * (asym_chamfer(a, b)? + asym_chamfer(b, a)?))
}

/// F-score in percent at distance threshold `tau`.
pub fn f_score(pred: &[[f64; 3]], gt: &[[f64; 3]], tau: f64) -> Result<f64> {
    let t2 = tau * tau;
    let within = |d: Vec<f64>| 100.0 * d.iter().filter(|&&x| x <= t2).count() as f64 / d.len() as f64;
    let precision = within(nn_sq_distances(pred, gt)?);
    let recall = within(nn_sq_distances(gt, pred)?);
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// Intersection over union of the solids `{S < iso}` of two grids.
pub fn occupancy_iou(a: &ScalarGrid3, b: &ScalarGrid3, iso: f64) -> Result<f64> {
    if a.res() != b.res() {
        return Err(Error::Dimension(format!("grid resolutions differ: {} vs {}", a.res(), b.res())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.values().iter().zip(b.values()) {
        let (ia, ib) = ((x as f64) < iso, (y as f64) < iso);
        inter += usize::from(ia && ib);
        union += usize::from(ia || ib);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Metric record written as `key=value` lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub values: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn set(&mut self, key: &str, value: f64) -> &mut Self {
        self.values.insert(key.to_string(), value);
        self
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }

    /// Chamfer, F-score and the settings used, between two surface samplings.
    pub fn for_point_sets(pred: &[[f64; 3]], gt: &[[f64; 3]], tau: f64) -> Result<Self> {
        let mut r = Self::default();
        r.set("chamfer_l2", chamfer_l2(pred, gt)?)
            .set("f_score", f_score(pred, gt, tau)?)
            .set("tau_f", tau)
            .set("pred_samples", pred.len() as f64)
            .set("gt_samples", gt.len() as f64);
        Ok(r)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut r = Self::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("report line `{line}` is not key=value")))?;
            let v: f64 = v.trim().parse().map_err(|_| Error::Format(format!("bad value in `{line}`")))?;
            r.set(k.trim(), v);
        }
        Ok(r)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.values {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        let a = [[0.0; 3]];
        let b = [[0.1, 0.0, 0.0]];
        assert!((chamfer_l2(&a, &b).unwrap() - 10.0).abs() < 1e-12);
        assert!((asym_chamfer(&a, &b).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(chamfer_l2(&a, &a).unwrap(), 0.0);
        assert_eq!(f_score(&[[0.02, 0.0, 0.0]], &a, 0.01).unwrap(), 0.0);
        assert_eq!(f_score(&b, &b, 0.01).unwrap(), 100.0);
        assert!(chamfer_l2(&[], &a).is_err());
        assert!(f_score(&a, &[], 0.01).is_err());
    }

    #[test]
    fn asymmetry_witness() {
        let a = [[0.0; 3]];
        let b = [[0.0; 3], [0.5, 0.0, 0.0]];
        assert_eq!(asym_chamfer(&a, &b).unwrap(), 0.0);
        assert!(asym_chamfer(&b, &a).unwrap() > 0.0);
    }

    #[test]
    fn iou_cases() {
        let s = |r: f64| ScalarGrid3::from_fn(64, move |p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - r).unwrap();
        let (small, big) = (s(0.2), s(0.3));
        assert_eq!(occupancy_iou(&big, &big, 0.0).unwrap(), 1.0);
        let iou = occupancy_iou(&small, &big, 0.0).unwrap();
        assert!((iou - (0.2f64 / 0.3).powi(3)).abs() < 0.03, "{iou}");
        let left = ScalarGrid3::from_fn(16, |p| p[0] + 0.1).unwrap();
        let right = ScalarGrid3::from_fn(16, |p| 0.1 - p[0]).unwrap();
        assert_eq!(occupancy_iou(&left, &right, 0.0).unwrap(), 0.0);
        let empty = ScalarGrid3::from_fn(16, |_| 1.0).unwrap();
        assert_eq!(occupancy_iou(&empty, &empty, 0.0).unwrap(), 1.0);
        assert!(occupancy_iou(&empty, &big, 0.0).is_err());
    }

    #[test]
    fn report_text_round_trip() {
        let mut r = EvalReport::default();
        r.set("chamfer_l2", 1.25).set("tau_f", 0.01).set("iou", 0.5);
        let text = r.to_string();
        assert_eq!(text, "chamfer_l2=1.25\niou=0.5\ntau_f=0.01\n");
        assert_eq!(EvalReport::parse(&text).unwrap(), r);
        assert!(EvalReport::parse("nonsense").is_err());
    }
}
