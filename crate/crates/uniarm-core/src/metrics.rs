//! Multi-objective evaluation: Pareto filtering, hypervolume, and mean
//! inner product.
//!
//! Everything is maximization-oriented: larger reward coordinates are
//! better, the reference point sits strictly below every evaluated point,
//! and hypervolume is the Lebesgue measure of the region between the
//! reference point and the attained front.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preference::{PreferenceError, PreferenceVector};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("points have inconsistent dimensions: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("reference point is not strictly dominated by points {0:?}")]
    RefNotDominated(Vec<usize>),
    #[error("no exact hypervolume for dimension {0}; use the Monte-Carlo estimator")]
    UnsupportedDimension(usize),
    #[error("empty input")]
    EmptyInput,
    #[error(transparent)]
    Preference(#[from] PreferenceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One sweep outcome: the preference vector and the mean oracle reward vector
/// of the responses generated under it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub alpha: PreferenceVector,
    pub q: Vec<f64>,
}

/// The hypervolume reference point; must be strictly dominated by every
/// evaluated point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint(pub Vec<f64>);

fn dominates(q: &[f64], p: &[f64]) -> bool {
    q.iter().zip(p).all(|(a, b)| a >= b) && q != p
}

/// The maximal subset with no member weakly dominated by another point;
/// input order is preserved. Exact duplicates are all retained.
pub fn pareto_filter(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    // Any dominator precedes its victim in lexicographic descending order,
    // and dominators of dropped points survive transitively, so one pass
    // against the retained set suffices.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        points[b]
            .partial_cmp(&points[a])
            .expect("finite coordinates")
    });
    let mut kept_sorted: Vec<usize> = Vec::new();
    let mut keep = vec![false; n];
    for &i in &order {
        if kept_sorted
            .iter()
            .all(|&j| !dominates(&points[j], &points[i]))
        {
            kept_sorted.push(i);
            keep[i] = true;
        }
    }
    (0..n)
        .filter(|&i| keep[i])
        .map(|i| points[i].clone())
        .collect()
}

fn check_points(
    points: &[Vec<f64>],
    ref_point: &ReferencePoint,
) -> Result<(), MetricsError> {
    let k = ref_point.0.len();
    for p in points {
        if p.len() != k {
            return Err(MetricsError::DimensionMismatch {
                expected: k,
                got: p.len(),
            });
        }
    }
    let violators: Vec<usize> = points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.iter().zip(&ref_point.0).any(|(pi, zi)| pi <= zi))
        .map(|(i, _)| i)
        .collect();
    if !violators.is_empty() {
        return Err(MetricsError::RefNotDominated(violators));
    }
    Ok(())
}

/// 2-D dominated area by sort-and-sweep. Tolerates dominated inputs.
fn hv2(points: &[(f64, f64)], z: (f64, f64)) -> f64 {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| b.partial_cmp(a).expect("finite coordinates"));
    let mut acc = 0.0;
    let mut prev_y = z.1;
    for (x, y) in pts {
        if y > prev_y {
            acc += (x - z.0) * (y - prev_y);
            prev_y = y;
        }
    }
    acc
}

/// 3-D dominated volume: sweep the third axis in slabs between consecutive
/// attained levels; within a slab the cross-section is a fixed 2-D dominated
/// area.
fn hv3(points: &[Vec<f64>], z: &[f64]) -> f64 {
    let mut levels: Vec<f64> = points.iter().map(|p| p[2]).collect();
    levels.sort_by(|a, b| b.partial_cmp(a).expect("finite coordinates"));
    levels.dedup();
    let mut acc = 0.0;
    for (j, &level) in levels.iter().enumerate() {
        let next = levels.get(j + 1).copied().unwrap_or(z[2]);
        let active: Vec<(f64, f64)> = points
            .iter()
            .filter(|p| p[2] >= level)
            .map(|p| (p[0], p[1]))
            .collect();
        acc += hv2(&active, (z[0], z[1])) * (level - next);
    }
    acc
}

/// Exact hypervolume for 2 or 3 objectives.
///
/// Zero for an empty set; errors if the reference point is not strictly
/// dominated by every point (the violating indices are reported).
pub fn hypervolume(
    points: &[Vec<f64>],
    ref_point: &ReferencePoint,
) -> Result<f64, MetricsError> {
    if points.is_empty() {
        return Ok(0.0);
    }
    check_points(points, ref_point)?;
    let front = pareto_filter(points);
    match ref_point.0.len() {
        2 => Ok(hv2(
            &front.iter().map(|p| (p[0], p[1])).collect::<Vec<_>>(),
            (ref_point.0[0], ref_point.0[1]),
        )),
        3 => Ok(hv3(&front, &ref_point.0)),
        other => Err(MetricsError::UnsupportedDimension(other)),
    }
}

/// Monte-Carlo hypervolume: the dominated fraction of uniform samples in the
/// box spanned by the reference point and the componentwise maximum, scaled
/// by the box volume. Deterministic per seed; works for any dimension.
pub fn hypervolume_mc(
    points: &[Vec<f64>],
    ref_point: &ReferencePoint,
    samples: usize,
    seed: u64,
) -> Result<f64, MetricsError> {
    if points.is_empty() {
        return Ok(0.0);
    }
    check_points(points, ref_point)?;
    let k = ref_point.0.len();
    let mut high = vec![f64::NEG_INFINITY; k];
    for p in points {
        for (h, &v) in high.iter_mut().zip(p) {
            *h = h.max(v);
        }
    }
    let volume: f64 = high
        .iter()
        .zip(&ref_point.0)
        .map(|(h, z)| (h - z).max(0.0))
        .product();
    if volume == 0.0 {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    let mut sample = vec![0.0f64; k];
    for _ in 0..samples {
        for (s, (h, z)) in sample.iter_mut().zip(high.iter().zip(&ref_point.0)) {
            *s = z + rng.gen::<f64>() * (h - z);
        }
        if points
            .iter()
            .any(|q| q.iter().zip(&sample).all(|(qi, si)| qi >= si))
        {
            hits += 1;
        }
    }
    Ok(volume * hits as f64 / samples as f64)
}

/// Mean inner product `(1/N) Σ α_i · q_i`.
pub fn mip(points: &[ParetoPoint]) -> Result<f64, MetricsError> {
    if points.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let k = points[0].q.len();
    let mut total = 0.0;
    for p in points {
        if p.q.len() != k || p.alpha.k() != k {
            return Err(MetricsError::DimensionMismatch {
                expected: k,
                got: p.q.len(),
            });
        }
        total += p
            .alpha
            .components()
            .iter()
            .zip(&p.q)
            .map(|(a, q)| a * q)
            .sum::<f64>();
    }
    Ok(total / points.len() as f64)
}

/// Spearman rank correlation with average ranks on ties. NaN when either
/// input is constant or shorter than 2.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "rank correlation needs paired samples");
    let rank = |v: &[f64]| -> Vec<f64> {
        let n = v.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("finite values"));
        let mut ranks = vec![0.0; n];
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && v[order[j + 1]] == v[order[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &idx in &order[i..=j] {
                ranks[idx] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mean) * (b - mean);
        var_x += (a - mean) * (a - mean);
        var_y += (b - mean) * (b - mean);
    }
    cov / (var_x * var_y).sqrt()
}

/// Sweep points file: one `{alpha, q}` JSON object per line.
pub fn write_points(path: &Path, points: &[ParetoPoint]) -> Result<(), MetricsError> {
    let mut out = BufWriter::new(File::create(path)?);
    for p in points {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_points(path: &Path) -> Result<Vec<ParetoPoint>, MetricsError> {
    let reader = BufReader::new(File::open(path)?);
    let mut points = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        points.push(serde_json::from_str(&line)?);
    }
    Ok(points)
}

/// Per-method evaluation summary, as emitted by the evaluation command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: String,
    pub k: usize,
    #[serde(rename = "ref")]
    pub reference: Vec<f64>,
    pub hv: f64,
    pub mip: f64,
    pub points: Vec<ParetoPoint>,
}
