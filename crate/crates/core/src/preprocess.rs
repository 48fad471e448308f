//! Soft-tissue windowing, percentile min-max normalization and abdominal
//! field-of-view cropping. The three steps must run in that order; each
//! checks the volume's [`Stage`] and refuses to run out of turn.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::phantom::{Stage, Volume};

pub const WINDOW_LO_HU: f64 = -175.0;
pub const WINDOW_HI_HU: f64 = 250.0;
pub const CROP_LO_SCORE: f64 = -4.0;
pub const CROP_HI_SCORE: f64 = 5.0;

pub fn window_hu(volume: &Volume, lo: f64, hi: f64) -> Result<Volume> {
    if volume.stage != Stage::Raw {
        return Err(Error::StageOrder(format!(
            "windowing expects a raw volume, found {:?}",
            volume.stage
        )));
    }
    if !(lo < hi) {
        return Err(Error::Config(format!("window bounds {lo} >= {hi}")));
    }
    let (lo, hi) = (lo as f32, hi as f32);
    let mut out = volume.clone();
    for v in &mut out.voxels {
        *v = v.clamp(lo, hi);
    }
    out.stage = Stage::Windowed;
    Ok(out)
}

/// `p`-th percentile (0..=100) with linear interpolation between closest ranks.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Maps intensities through `clamp((x - X1) / (X99 - X1), 0, 1)`, with the
/// percentiles taken over every voxel of this volume.
pub fn percentile_normalize(volume: &Volume) -> Result<Volume> {
    if volume.stage != Stage::Windowed {
        return Err(Error::StageOrder(format!(
            "normalization expects a windowed volume, found {:?}",
            volume.stage
        )));
    }
    let mut sorted: Vec<f64> = volume.voxels.iter().map(|&v| v as f64).collect();
    sorted.sort_by(f64::total_cmp);
    let x1 = percentile(&sorted, 1.0);
    let x99 = percentile(&sorted, 99.0);
    if !(x99 > x1) {
        return Err(Error::DegenerateIntensity(x1));
    }
    let span = x99 - x1;
    let mut out = volume.clone();
    for v in &mut out.voxels {
        *v = ((*v as f64 - x1) / span).clamp(0.0, 1.0) as f32;
    }
    out.stage = Stage::Normalized;
    Ok(out)
}

/// Keeps the axial slices whose score lies in `[lo, hi]` (inclusive).
pub fn crop_abdomen(volume: &Volume, scores: &[f64], lo: f64, hi: f64) -> Result<Volume> {
    if volume.stage != Stage::Normalized {
        return Err(Error::StageOrder(format!(
            "cropping expects a normalized volume, found {:?}",
            volume.stage
        )));
    }
    let depth = volume.dims[2];
    if scores.len() != depth {
        return Err(Error::ScoreLength {
            got: scores.len(),
            depth,
        });
    }
    let keep: Vec<usize> = (0..depth)
        .filter(|&z| scores[z] >= lo && scores[z] <= hi)
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyCrop { lo, hi });
    }
    let slice = volume.slice_len();
    let mut voxels = Vec::with_capacity(slice * keep.len());
    let mut labels = Vec::with_capacity(slice * keep.len());
    for &z in &keep {
        voxels.extend_from_slice(&volume.voxels[z * slice..(z + 1) * slice]);
        labels.extend_from_slice(&volume.labels[z * slice..(z + 1) * slice]);
    }
    Ok(Volume {
        dims: [volume.dims[0], volume.dims[1], keep.len()],
        voxels,
        labels,
        ..volume.clone()
    })
}

/// Indices of the slices `crop_abdomen` keeps, for cropping companion grids.
pub fn kept_slices(scores: &[f64], lo: f64, hi: f64) -> Vec<usize> {
    (0..scores.len())
        .filter(|&z| scores[z] >= lo && scores[z] <= hi)
        .collect()
}

/// Full chain with default bounds: window, normalize, crop.
pub fn preprocess(volume: &Volume, scores: &[f64]) -> Result<Volume> {
    let windowed = window_hu(volume, WINDOW_LO_HU, WINDOW_HI_HU)?;
    let normalized = percentile_normalize(&windowed)?;
    crop_abdomen(&normalized, scores, CROP_LO_SCORE, CROP_HI_SCORE)
}

pub fn read_slice_scores(path: &Path) -> Result<Vec<f64>> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

pub fn write_slice_scores(scores: &[f64], path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_vec(scores)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::Phase;
    use proptest::prelude::*;

    fn line(values: Vec<f32>) -> Volume {
        let n = values.len();
        Volume {
            dims: [n, 1, 1],
            spacing_mm: [1.0; 3],
            phase: Phase::NC,
            labels: vec![0; n],
            voxels: values,
            stage: Stage::Raw,
        }
    }

    fn stack(depth: usize) -> Volume {
        let voxels = (0..4 * depth).map(|i| i as f32).collect();
        Volume {
            dims: [2, 2, depth],
            spacing_mm: [1.0; 3],
            phase: Phase::CE,
            labels: (0..4 * depth).map(|i| (i / 4) as u8).collect(),
            voxels,
            stage: Stage::Normalized,
        }
    }

    #[test]
    fn window_clamps_to_soft_tissue_range() {
        let w = window_hu(&line(vec![300.0, -200.0, 100.0]), WINDOW_LO_HU, WINDOW_HI_HU).unwrap();
        assert_eq!(w.voxels, vec![250.0, -175.0, 100.0]);
        assert_eq!(w.stage, Stage::Windowed);
        let flat = window_hu(&line(vec![250.0; 4]), WINDOW_LO_HU, WINDOW_HI_HU).unwrap();
        assert_eq!(flat.voxels, vec![250.0; 4]);
    }

    #[test]
    fn window_rejects_normalized() {
        let mut v = line(vec![0.5; 4]);
        v.stage = Stage::Normalized;
        assert!(matches!(
            window_hu(&v, WINDOW_LO_HU, WINDOW_HI_HU),
            Err(Error::StageOrder(_))
        ));
    }

    #[test]
    fn percentile_normalize_arithmetic_sequence() {
        let v = window_hu(&line((0..=100).map(|i| i as f32).collect()), -175.0, 250.0).unwrap();
        let n = percentile_normalize(&v).unwrap();
        assert_eq!(n.voxels[50], 0.5);
        assert_eq!(n.voxels[1], 0.0);
        assert_eq!(n.voxels[99], 1.0);
        assert_eq!(n.voxels[0], 0.0);
        assert_eq!(n.voxels[100], 1.0);
        assert!(n.normalized());
    }

    #[test]
    fn constant_volume_is_degenerate() {
        let v = window_hu(&line(vec![7.0; 32]), -175.0, 250.0).unwrap();
        assert!(matches!(
            percentile_normalize(&v),
            Err(Error::DegenerateIntensity(_))
        ));
    }

    #[test]
    fn normalize_requires_window_first() {
        assert!(matches!(
            percentile_normalize(&line(vec![1.0, 2.0])),
            Err(Error::StageOrder(_))
        ));
    }

    #[test]
    fn crop_keeps_inclusive_range() {
        let v = stack(5);
        let c = crop_abdomen(&v, &[-6.0, -4.0, 0.0, 5.0, 7.0], CROP_LO_SCORE, CROP_HI_SCORE).unwrap();
        assert_eq!(c.dims, [2, 2, 3]);
        assert_eq!(c.voxels, v.voxels[4..16].to_vec());
        assert_eq!(c.labels, vec![1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3]);
    }

    #[test]
    fn crop_edge_cases() {
        let v = stack(5);
        assert_eq!(crop_abdomen(&v, &[0.0; 5], -4.0, 5.0).unwrap(), v);
        assert!(matches!(
            crop_abdomen(&v, &[10.0; 5], -4.0, 5.0),
            Err(Error::EmptyCrop { .. })
        ));
        assert!(matches!(
            crop_abdomen(&v, &[0.0; 4], -4.0, 5.0),
            Err(Error::ScoreLength { .. })
        ));
        let mut raw = v.clone();
        raw.stage = Stage::Windowed;
        assert!(matches!(
            crop_abdomen(&raw, &[0.0; 5], -4.0, 5.0),
            Err(Error::StageOrder(_))
        ));
    }

    #[test]
    fn pipeline_uses_uncropped_percentiles() {
        // The cropped-away slices hold the extremes, so percentiles taken
        // after cropping would give a different mapping.
        let mut values = vec![0.0f32; 4 * 5];
        for (i, v) in values.iter_mut().enumerate() {
            *v = match i / 4 {
                0 => -175.0,
                4 => 250.0,
                _ => (i as f32) * 3.0,
            };
        }
        let mut raw = stack(5);
        raw.voxels = values;
        raw.stage = Stage::Raw;
        let scores = [-10.0, 0.0, 0.0, 0.0, 10.0];
        let out = preprocess(&raw, &scores).unwrap();

        let mut sorted: Vec<f64> = raw.voxels.iter().map(|&v| v as f64).collect();
        sorted.sort_by(f64::total_cmp);
        let (x1, x99) = (percentile(&sorted, 1.0), percentile(&sorted, 99.0));
        let expected: Vec<f32> = raw.voxels[4..16]
            .iter()
            .map(|&v| ((v as f64 - x1) / (x99 - x1)).clamp(0.0, 1.0) as f32)
            .collect();
        assert_eq!(out.voxels, expected);
    }

    proptest! {
        #[test]
        fn normalization_is_monotone(mut values in prop::collection::vec(-300.0f32..300.0, 8..64)) {
            values.push(-300.0);
            values.push(300.0);
            let v = window_hu(&line(values.clone()), -175.0, 250.0).unwrap();
            let n = percentile_normalize(&v).unwrap();
            for i in 0..values.len() {
                prop_assert!((0.0..=1.0).contains(&n.voxels[i]));
                for j in 0..values.len() {
                    if values[i] <= values[j] {
                        prop_assert!(n.voxels[i] <= n.voxels[j]);
                    }
                }
            }
        }
    }
}
