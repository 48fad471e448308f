//! Embedding-space analysis: per-organ PCA, phase silhouette, the
//! temperature sweep and report serialization.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dcc::{masked_mean_intensity, LossMode};
use crate::error::{Error, Result};
use crate::model::{Network, NORM_EPS};
use crate::phantom::Phase;
use crate::sampler::{to_model_input, AugView, Patch};
use crate::trainer::{run_pipeline, Dataset, Evaluation, Init, TrainConfig};

pub const DEFAULT_TEMPERATURES: [f64; 5] = [0.01, 0.07, 0.1, 0.5, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    /// Unit-norm embedding.
    pub z: Vec<f64>,
    pub organ: u8,
    pub phase: Phase,
    /// Masked mean intensity of the unaugmented patch.
    pub d: f64,
    pub volume: usize,
    pub slice: usize,
}

/// Embeds unaugmented patches. Networks that have lost their projection head
/// embed through their L2-normalized pooled encoder features instead.
pub fn embed_records(net: &Network, patches: &[Patch]) -> Result<Vec<EmbeddingRecord>> {
    patches
        .iter()
        .map(|p| {
            let mut view = AugView::identity(p);
            let d = masked_mean_intensity(&mut view)?;
            let input = to_model_input(&view);
            let z = match net.projection {
                Some(_) => net.embed(&input, p.size)?,
                None => {
                    let f = net.encoder.forward(&input, p.size)?.feature;
                    let n = f.iter().map(|v| v * v).sum::<f64>().sqrt() + NORM_EPS;
                    f.iter().map(|v| v / n).collect()
                }
            };
            Ok(EmbeddingRecord {
                z,
                organ: p.organ_class,
                phase: p.phase,
                d,
                volume: p.source.volume,
                slice: p.source.slice,
            })
        })
        .collect()
}

/// Writes `organ,phase,d,z_0..z_{D-1}`.
pub fn write_embeddings_csv(records: &[EmbeddingRecord], path: &Path) -> Result<()> {
    let dim = records.first().map_or(0, |r| r.z.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["organ".to_string(), "phase".into(), "d".into()];
    header.extend((0..dim).map(|i| format!("z_{i}")));
    w.write_record(&header)?;
    for r in records {
        if r.z.len() != dim {
            return Err(Error::Shape(format!("embedding of length {} among length {dim}", r.z.len())));
        }
        let mut row = vec![r.organ.to_string(), r.phase.to_string(), r.d.to_string()];
        row.extend(r.z.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    pub mean: Vec<f64>,
    /// Top-k eigenvectors as rows, by descending eigenvalue.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Projected coordinates, one k-vector per input point.
    pub coords: Vec<Vec<f64>>,
}

/// Covariance (n − 1 normalization) of mean-centred points.
fn covariance(points: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let n = points.len();
    let dim = points[0].len();
    let mut mean = vec![0.0; dim];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred = DMatrix::from_fn(n, dim, |i, j| points[i][j] - mean[j]);
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    (mean, cov)
}

pub fn pca_project(points: &[Vec<f64>], k: usize) -> Result<PcaProjection> {
    if points.len() < k + 1 || points.len() < 3 {
        return Err(Error::TooFewRecords {
            need: (k + 1).max(3),
            got: points.len(),
        });
    }
    let dim = points[0].len();
    if k == 0 || k > dim {
        return Err(Error::Config(format!("pca: k = {k} with dimension {dim}")));
    }
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("pca: points of unequal dimension".into()));
    }
    let (mean, cov) = covariance(points);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    for &c in order.iter().take(k) {
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        components.push(v);
        eigenvalues.push(eig.eigenvalues[c]);
    }
    let coords = points
        .iter()
        .map(|p| {
            components
                .iter()
                .map(|c| c.iter().zip(p).zip(&mean).map(|((c, x), m)| c * (x - m)).sum())
                .collect()
        })
        .collect();
    Ok(PcaProjection {
        mean,
        components,
        eigenvalues,
        coords,
    })
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette coefficient under Euclidean distance. Points alone in
/// their cluster score 0.
pub fn silhouette<L: Ord + Copy>(points: &[Vec<f64>], labels: &[L]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::Shape(format!("{} points, {} labels", points.len(), labels.len())));
    }
    let clusters: BTreeSet<L> = labels.iter().copied().collect();
    if clusters.len() < 2 {
        return Err(Error::TooFewRecords {
            need: 2,
            got: clusters.len(),
        });
    }
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums: BTreeMap<L, (f64, usize)> = BTreeMap::new();
        for j in 0..n {
            if i != j {
                let e = sums.entry(labels[j]).or_insert((0.0, 0));
                e.0 += euclid(&points[i], &points[j]);
                e.1 += 1;
            }
        }
        let own = match sums.get(&labels[i]) {
            Some(&(s, c)) if c > 0 => s / c as f64,
            _ => continue,
        };
        let nearest = sums
            .iter()
            .filter(|(l, _)| **l != labels[i])
            .map(|(_, &(s, c))| s / c as f64)
            .fold(f64::INFINITY, f64::min);
        let m = own.max(nearest);
        if m > 0.0 {
            total += (nearest - own) / m;
        }
    }
    Ok(total / n as f64)
}

/// Silhouette of one organ's embeddings with phase as the cluster label.
pub fn phase_silhouette(records: &[EmbeddingRecord]) -> Result<f64> {
    let mut counts: BTreeMap<Phase, usize> = BTreeMap::new();
    for r in records {
        *counts.entry(r.phase).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::TooFewRecords {
            need: 2,
            got: counts.len(),
        });
    }
    if let Some(&got) = counts.values().find(|&&c| c < 2) {
        return Err(Error::TooFewRecords { need: 2, got });
    }
    let points: Vec<Vec<f64>> = records.iter().map(|r| r.z.clone()).collect();
    let labels: Vec<Phase> = records.iter().map(|r| r.phase).collect();
    silhouette(&points, &labels)
}

/// Phase silhouette of every organ with enough records in both phases.
pub fn silhouette_by_organ(records: &[EmbeddingRecord]) -> BTreeMap<u8, f64> {
    let organs: BTreeSet<u8> = records.iter().map(|r| r.organ).collect();
    organs
        .into_iter()
        .filter_map(|o| {
            let own: Vec<EmbeddingRecord> = records.iter().filter(|r| r.organ == o).cloned().collect();
            phase_silhouette(&own).ok().map(|s| (o, s))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "T")]
    pub temperature: f64,
    pub seed: u64,
    pub mean_dice: f64,
}

/// DCC pretraining, fine-tuning and evaluation for every temperature and
/// seed, in list order.
pub fn temperature_sweep(dataset: &Dataset, cfg: &TrainConfig, temps: &[f64], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    if let Some(&t) = temps.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
        return Err(Error::Temperature(t));
    }
    let mut rows = Vec::with_capacity(temps.len() * seeds.len());
    for &temperature in temps {
        for &seed in seeds {
            let run = run_pipeline(dataset, cfg, temperature, Init::Pretrained(LossMode::Dcc), seed)?;
            log::info!("sweep T={temperature} seed={seed}: dice {:.4}", run.evaluation.mean_dice);
            rows.push(SweepRow {
                temperature,
                seed,
                mean_dice: run.evaluation.mean_dice,
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub seed: u64,
    pub config: serde_json::Value,
    pub loss_curve: Vec<f64>,
    pub per_organ_dice: BTreeMap<u8, f64>,
    pub per_phase_dice: BTreeMap<Phase, f64>,
    pub mean_dice: f64,
    pub silhouette: BTreeMap<u8, f64>,
    pub warnings: Vec<String>,
}

impl MetricsReport {
    pub fn new(
        evaluation: &Evaluation,
        loss_curve: Vec<f64>,
        silhouette: BTreeMap<u8, f64>,
        config: serde_json::Value,
        seed: u64,
    ) -> Self {
        MetricsReport {
            seed,
            config,
            loss_curve,
            per_organ_dice: evaluation.per_organ.clone(),
            per_phase_dice: evaluation.per_phase.clone(),
            mean_dice: evaluation.mean_dice,
            silhouette,
            warnings: evaluation.warnings.clone(),
        }
    }

    /// Flat `(organ, metric, value)` rows; volume-wide values use organ `all`.
    pub fn rows(&self) -> Vec<(String, String, f64)> {
        let mut rows = Vec::new();
        for (o, v) in &self.per_organ_dice {
            rows.push((o.to_string(), "dice".to_string(), *v));
        }
        for (o, v) in &self.silhouette {
            rows.push((o.to_string(), "phase_silhouette".to_string(), *v));
        }
        for (p, v) in &self.per_phase_dice {
            rows.push(("all".to_string(), format!("dice_{p}"), *v));
        }
        rows.push(("all".to_string(), "mean_dice".to_string(), self.mean_dice));
        rows
    }
}

/// Writes `<stem>.json` and `<stem>.csv` into `dir`.
pub fn emit_report(report: &MetricsReport, dir: &Path, stem: &str) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    fs::write(dir.join(format!("{stem}.json")), json + "\n")?;
    let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv")))?;
    w.write_record(["organ", "metric", "value"])?;
    for (organ, metric, value) in report.rows() {
        w.write_record([organ, metric, value.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
