//! Score-dump diagnostics: histograms and a deterministic 2-D projection of
//! table-token latents.

use serde::Serialize;
use tabrel::train::{histogram, ScoreRecord, HISTOGRAM_BUCKETS};

pub const DIAGNOSE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
pub struct ProjectedToken {
    pub example_id: usize,
    pub token: usize,
    pub x: f64,
    pub y: f64,
    /// Score above the mean score of its example's table tokens.
    pub relevant: bool,
}

#[derive(Debug, Serialize)]
pub struct VariantDiagnostics {
    pub name: String,
    pub examples: usize,
    pub tokens: usize,
    pub histogram: Vec<usize>,
    pub mid_fraction: f64,
    pub relevant_tokens: usize,
    /// Present when the dump carries latents.
    pub projection: Option<Vec<ProjectedToken>>,
}

#[derive(Debug, Serialize)]
pub struct DiagnoseReport {
    pub schema_version: u32,
    pub variants: Vec<VariantDiagnostics>,
}

/// Per-token labels by the above-average rule within each example.
pub fn relevance_labels(records: &[ScoreRecord]) -> Vec<Vec<bool>> {
    records
        .iter()
        .map(|r| {
            let mean = r.eta_uns.iter().sum::<f64>() / r.eta_uns.len().max(1) as f64;
            r.eta_uns.iter().map(|&e| e > mean).collect()
        })
        .collect()
}

/// Projection onto the top two principal components, found by power
/// iteration with deflation from a fixed start. Component signs are chosen so
/// the largest-magnitude loading is positive.
pub fn pca_2d(points: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let d = points[0].len();
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
    let centered: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for p in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += p[i] * p[j];
            }
        }
    }
    let mut comps: Vec<Vec<f64>> = Vec::new();
    for k in 0..2.min(d) {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + ((i + k) % 7) as f64 * 0.1).collect();
        for _ in 0..500 {
            let mut w: Vec<f64> = (0..d).map(|i| (0..d).map(|j| cov[i][j] * v[j]).sum()).collect();
            for c in &comps {
                let dot: f64 = w.iter().zip(c).map(|(a, b)| a * b).sum();
                for (wi, ci) in w.iter_mut().zip(c) {
                    *wi -= dot * ci;
                }
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-300 {
                break;
            }
            v = w.into_iter().map(|x| x / norm).collect();
        }
        let pivot = v.iter().cloned().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        comps.push(v);
    }
    centered
        .iter()
        .map(|p| {
            let mut out = [0.0; 2];
            for (k, c) in comps.iter().enumerate() {
                out[k] = p.iter().zip(c).map(|(a, b)| a * b).sum();
            }
            out
        })
        .collect()
}

pub fn diagnose_variant(name: &str, records: &[ScoreRecord]) -> anyhow::Result<VariantDiagnostics> {
    if records.is_empty() {
        anyhow::bail!("score dump {name} is empty");
    }
    let scores: Vec<f64> = records.iter().flat_map(|r| r.eta_uns.iter().copied()).collect();
    let labels = relevance_labels(records);
    let mid = scores.iter().filter(|&&x| (0.4..=0.6).contains(&x)).count();
    let projection = if records.iter().all(|r| r.latents.is_some()) {
        let pts: Vec<Vec<f64>> = records
            .iter()
            .flat_map(|r| r.latents.clone().unwrap_or_default())
            .collect();
        let xy = pca_2d(&pts);
        let mut it = xy.into_iter();
        let mut out = Vec::with_capacity(scores.len());
        for (r, lab) in records.iter().zip(&labels) {
            for (t, &rel) in lab.iter().enumerate() {
                let [x, y] = it.next().ok_or_else(|| anyhow::anyhow!("latents shorter than scores"))?;
                out.push(ProjectedToken {
                    example_id: r.example_id,
                    token: t,
                    x,
                    y,
                    relevant: rel,
                });
            }
        }
        Some(out)
    } else {
        None
    };
    Ok(VariantDiagnostics {
        name: name.to_string(),
        examples: records.len(),
        tokens: scores.len(),
        histogram: histogram(&scores, HISTOGRAM_BUCKETS),
        mid_fraction: if scores.is_empty() { 0.0 } else { mid as f64 / scores.len() as f64 },
        relevant_tokens: labels.iter().flatten().filter(|&&b| b).count(),
        projection,
    })
}
