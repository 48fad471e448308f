//! Synthetic multi-phase CT phantoms and their on-disk format.
//!
//! A phantom is a set of non-overlapping ellipsoidal organs on a constant
//! 40 HU background. Each organ carries a mean intensity per contrast phase,
//! so some organs brighten strongly between non-contrast and contrast-enhanced
//! scans while others stay put.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Background soft-tissue intensity in HU.
pub const BACKGROUND_HU: f32 = 40.0;

/// Smallest extent allowed along each axis.
pub const MIN_DIM: usize = 16;

/// Morphological radius (voxels) per unit corruption rate.
const RADIUS_PER_RATE: f64 = 7.0;

/// Contrast phase of an acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    /// Non-contrast.
    NC,
    /// Contrast-enhanced (portal venous).
    CE,
    /// Arterial.
    AP,
    /// Delayed.
    DL,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::NC => "NC",
            Phase::CE => "CE",
            Phase::AP => "AP",
            Phase::DL => "DL",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "NC" => Ok(Phase::NC),
            "CE" => Ok(Phase::CE),
            "AP" => Ok(Phase::AP),
            "DL" => Ok(Phase::DL),
            other => Err(Error::UnknownPhase(other.to_string())),
        }
    }
}

impl Serialize for Phase {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Phase {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrganSpec {
    pub class_id: u8,
    #[serde(default)]
    pub name: String,
    /// Ellipsoid center as fractions of (H, W, D).
    pub center: [f64; 3],
    /// Semi-axes as fractions of (H, W, D).
    pub semi_axes: [f64; 3],
    /// Mean HU per phase.
    pub intensity_by_phase: BTreeMap<Phase, f64>,
    /// Standard deviation (HU) of the additive Gaussian texture.
    pub texture_sd: f64,
}

impl OrganSpec {
    fn contains(&self, dims: [usize; 3], x: usize, y: usize, z: usize) -> bool {
        let p = [x, y, z];
        let mut acc = 0.0;
        for a in 0..3 {
            let pos = (p[a] as f64 + 0.5) / dims[a] as f64;
            let t = (pos - self.center[a]) / self.semi_axes[a];
            acc += t * t;
        }
        acc <= 1.0
    }
}

fn default_spacing() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

fn default_volumes() -> usize {
    2
}

fn default_corruption() -> f64 {
    0.1
}

fn default_score_range() -> [f64; 2] {
    [-6.0, 6.0]
}

/// Everything needed to synthesize a cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub dims: [usize; 3],
    #[serde(default = "default_spacing")]
    pub spacing_mm: [f64; 3],
    pub phases: Vec<Phase>,
    pub organs: Vec<OrganSpec>,
    /// Training volumes generated per phase.
    #[serde(default = "default_volumes")]
    pub volumes_per_phase: usize,
    /// Held-out volumes generated per phase, after the training ones.
    #[serde(default)]
    pub test_volumes_per_phase: usize,
    /// Coarse-mask corruption rate applied by the dataset builder.
    #[serde(default = "default_corruption")]
    pub corruption_rate: f64,
    /// Body-part regression scores assigned to the first and last slice.
    #[serde(default = "default_score_range")]
    pub slice_score_range: [f64; 2],
}

impl DatasetSpec {
    pub fn class_ids(&self) -> Vec<u8> {
        self.organs.iter().map(|o| o.class_id).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.organs.is_empty() {
            return Err(Error::InvalidSpec("no organs declared".into()));
        }
        if self.phases.is_empty() {
            return Err(Error::InvalidSpec("no phases declared".into()));
        }
        if self.dims.iter().any(|&d| d < MIN_DIM) {
            return Err(Error::InvalidSpec(format!(
                "dims {:?} below minimum {MIN_DIM}",
                self.dims
            )));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidSpec("spacing must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.corruption_rate) {
            return Err(Error::InvalidSpec(format!(
                "corruption rate {} outside [0, 1)",
                self.corruption_rate
            )));
        }
        let mut seen = BTreeSet::new();
        for organ in &self.organs {
            if organ.class_id == 0 {
                return Err(Error::InvalidSpec("class id 0 is background".into()));
            }
            if !seen.insert(organ.class_id) {
                return Err(Error::InvalidSpec(format!(
                    "duplicate class id {}",
                    organ.class_id
                )));
            }
            if organ.semi_axes.iter().any(|&a| !(a > 0.0)) {
                return Err(Error::InvalidSpec(format!(
                    "organ {} has non-positive semi-axis",
                    organ.class_id
                )));
            }
            if !(organ.texture_sd >= 0.0) {
                return Err(Error::InvalidSpec(format!(
                    "organ {} has negative texture_sd",
                    organ.class_id
                )));
            }
            for phase in &self.phases {
                if !organ.intensity_by_phase.contains_key(phase) {
                    return Err(Error::InvalidSpec(format!(
                        "organ {} lacks an intensity for phase {phase}",
                        organ.class_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Rasterizes the organ ellipsoids into a label grid.
    pub fn rasterize(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let [h, w, d] = self.dims;
        let mut labels = vec![0u8; h * w * d];
        let mut overlaps = BTreeSet::new();
        let mut counts = vec![0usize; self.organs.len()];
        for z in 0..d {
            for y in 0..w {
                for x in 0..h {
                    let idx = x + h * (y + w * z);
                    for (k, organ) in self.organs.iter().enumerate() {
                        if !organ.contains(self.dims, x, y, z) {
                            continue;
                        }
                        counts[k] += 1;
                        let prev = labels[idx];
                        if prev == 0 {
                            labels[idx] = organ.class_id;
                        } else {
                            let pair = (prev.min(organ.class_id), prev.max(organ.class_id));
                            overlaps.insert(pair);
                        }
                    }
                }
            }
        }
        if !overlaps.is_empty() {
            return Err(Error::OrganOverlap(overlaps.into_iter().collect()));
        }
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(Error::InvalidSpec(format!(
                "organ {} covers no voxel",
                self.organs[k].class_id
            )));
        }
        Ok(labels)
    }
}

/// Processing stage of a volume's intensities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Raw,
    Windowed,
    Normalized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    /// (H, W, D); voxel (x, y, z) lives at `x + H * (y + W * z)`.
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub phase: Phase,
    pub voxels: Vec<f32>,
    pub labels: Vec<u8>,
    pub stage: Stage,
}

impl Volume {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn normalized(&self) -> bool {
        self.stage == Stage::Normalized
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    /// Class ids present in the label grid, background excluded.
    pub fn classes(&self) -> BTreeSet<u8> {
        class_set(&self.labels)
    }

    pub fn check(&self) -> Result<()> {
        let n = self.len();
        if self.voxels.len() != n || self.labels.len() != n {
            return Err(Error::Shape(format!(
                "volume dims {:?} ({n} voxels) but {} intensities / {} labels",
                self.dims,
                self.voxels.len(),
                self.labels.len()
            )));
        }
        Ok(())
    }
}

pub(crate) fn class_set(labels: &[u8]) -> BTreeSet<u8> {
    let mut seen = [false; 256];
    for &l in labels {
        seen[l as usize] = true;
    }
    (1..256)
        .filter(|&c| seen[c])
        .map(|c| c as u8)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskSource {
    Oracle,
    Corrupted { rate: f64 },
}

/// Stand-in for a coarse whole-volume segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseMask {
    pub dims: [usize; 3],
    pub mask: Vec<u8>,
    pub source: MaskSource,
}

impl CoarseMask {
    pub fn oracle(volume: &Volume) -> Self {
        CoarseMask {
            dims: volume.dims,
            mask: volume.labels.clone(),
            source: MaskSource::Oracle,
        }
    }

    pub fn classes(&self) -> BTreeSet<u8> {
        class_set(&self.mask)
    }
}

/// Per-volume seed splitting rule shared by every parallelizable stage.
pub fn split_seed(seed: u64, index: u64) -> u64 {
    seed ^ index
}

/// Generates `volumes_per_phase + test_volumes_per_phase` volumes for each
/// phase, phase-major. Volume `i` of the output uses `split_seed(seed, i)`.
pub fn generate_phantom(spec: &DatasetSpec, seed: u64) -> Result<Vec<(Volume, CoarseMask)>> {
    let labels = spec.rasterize()?;
    let per_phase = spec.volumes_per_phase + spec.test_volumes_per_phase;
    let organ_of: BTreeMap<u8, &OrganSpec> =
        spec.organs.iter().map(|o| (o.class_id, o)).collect();

    let mut out = Vec::with_capacity(per_phase * spec.phases.len());
    for (pi, &phase) in spec.phases.iter().enumerate() {
        for v in 0..per_phase {
            let index = (pi * per_phase + v) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, index));
            let mut voxels = vec![BACKGROUND_HU; labels.len()];
            for (value, &label) in voxels.iter_mut().zip(&labels) {
                if label == 0 {
                    continue;
                }
                let organ = organ_of[&label];
                let mean = organ.intensity_by_phase[&phase];
                let noise = if organ.texture_sd > 0.0 {
                    Normal::new(0.0, organ.texture_sd)
                        .expect("validated sd")
                        .sample(&mut rng)
                } else {
                    0.0
                };
                *value = (mean + noise) as f32;
            }
            let volume = Volume {
                dims: spec.dims,
                spacing_mm: spec.spacing_mm,
                phase,
                voxels,
                labels: labels.clone(),
                stage: Stage::Raw,
            };
            let coarse = CoarseMask::oracle(&volume);
            out.push((volume, coarse));
        }
    }
    Ok(out)
}

/// Linear ramp of body-part scores across the axial slices.
pub fn synthetic_slice_scores(depth: usize, range: [f64; 2]) -> Vec<f64> {
    if depth == 1 {
        return vec![range[0]];
    }
    (0..depth)
        .map(|z| range[0] + (range[1] - range[0]) * z as f64 / (depth - 1) as f64)
        .collect()
}

fn ball_offsets(radius: i64) -> Vec<[i64; 3]> {
    let mut offs = Vec::new();
    for dz in -radius..=radius {
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                if dx * dx + dy * dy + dz * dz <= radius * radius {
                    offs.push([dx, dy, dz]);
                }
            }
        }
    }
    offs
}

fn morph(region: &[bool], dims: [usize; 3], radius: i64, dilate: bool) -> Vec<bool> {
    let offs = ball_offsets(radius);
    let [h, w, d] = dims;
    let at = |x: i64, y: i64, z: i64| -> bool {
        if x < 0 || y < 0 || z < 0 || x >= h as i64 || y >= w as i64 || z >= d as i64 {
            return false;
        }
        region[x as usize + h * (y as usize + w * z as usize)]
    };
    let mut out = vec![false; region.len()];
    for z in 0..d {
        for y in 0..w {
            for x in 0..h {
                let (xi, yi, zi) = (x as i64, y as i64, z as i64);
                let hit = if dilate {
                    offs.iter().any(|o| at(xi + o[0], yi + o[1], zi + o[2]))
                } else {
                    offs.iter().all(|o| at(xi + o[0], yi + o[1], zi + o[2]))
                };
                out[x + h * (y + w * z)] = hit;
            }
        }
    }
    out
}

const NEIGHBORS6: [[i64; 3]; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

/// Degrades an oracle label grid into a coarse mask.
///
/// Each organ is eroded or dilated (coin flip) by a ball whose radius is
/// `round(u * rate * 7)` voxels with `u ~ U[0, 1)`; dilation only claims
/// voxels that are background in the oracle. Afterwards a `rate` fraction of
/// organ boundary voxels take the label of a random differing 6-neighbor.
pub fn corrupt_labels(labels: &[u8], dims: [usize; 3], rate: f64, seed: u64) -> CoarseMask {
    let classes = class_set(labels);
    if rate <= 0.0 || classes.is_empty() {
        return CoarseMask {
            dims,
            mask: labels.to_vec(),
            source: MaskSource::Oracle,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0u8; labels.len()];
    for &class in &classes {
        let u: f64 = rng.gen();
        let dilate: bool = rng.gen();
        let radius = (u * rate * RADIUS_PER_RATE).round() as i64;
        let region: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        let region = if radius == 0 {
            region
        } else {
            morph(&region, dims, radius, dilate)
        };
        for (i, &inside) in region.iter().enumerate() {
            if inside && out[i] == 0 && (labels[i] == 0 || labels[i] == class) {
                out[i] = class;
            }
        }
    }

    let [h, w, d] = dims;
    let mut boundary = Vec::new();
    for z in 0..d {
        for y in 0..w {
            for x in 0..h {
                let i = x + h * (y + w * z);
                if out[i] == 0 {
                    continue;
                }
                let differs = NEIGHBORS6.iter().any(|o| {
                    neighbor(dims, x, y, z, *o).is_some_and(|j| out[j] != out[i])
                });
                if differs {
                    boundary.push((x, y, z));
                }
            }
        }
    }
    let flips = (rate * boundary.len() as f64).round() as usize;
    let chosen = sample(&mut rng, boundary.len(), flips.min(boundary.len())).into_vec();
    let snapshot = out.clone();
    for k in chosen {
        let (x, y, z) = boundary[k];
        let i = x + h * (y + w * z);
        let options: Vec<u8> = NEIGHBORS6
            .iter()
            .filter_map(|o| neighbor(dims, x, y, z, *o))
            .map(|j| snapshot[j])
            .filter(|&l| l != snapshot[i])
            .collect();
        out[i] = options[rng.gen_range(0..options.len())];
    }
    CoarseMask {
        dims,
        mask: out,
        source: MaskSource::Corrupted { rate },
    }
}

fn neighbor(dims: [usize; 3], x: usize, y: usize, z: usize, o: [i64; 3]) -> Option<usize> {
    let (nx, ny, nz) = (x as i64 + o[0], y as i64 + o[1], z as i64 + o[2]);
    if nx < 0 || ny < 0 || nz < 0 {
        return None;
    }
    let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
    if nx >= dims[0] || ny >= dims[1] || nz >= dims[2] {
        return None;
    }
    Some(nx + dims[0] * (ny + dims[1] * nz))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    phase: String,
    normalized: bool,
    labels_file: String,
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

/// Writes `<name>.json`, `<name>.vol` and `<name>.lab` next to `path`
/// (whatever extension `path` carries is replaced).
pub fn write_volume(volume: &Volume, path: &Path) -> Result<()> {
    volume.check()?;
    let vol_path = sibling(path, "vol");
    let lab_path = sibling(path, "lab");
    let lab_name = lab_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Config(format!("unusable path {}", path.display())))?
        .to_string();
    let sidecar = Sidecar {
        dims: volume.dims,
        spacing_mm: volume.spacing_mm,
        phase: volume.phase.to_string(),
        normalized: volume.normalized(),
        labels_file: lab_name,
    };
    let mut payload = Vec::with_capacity(volume.voxels.len() * 4);
    for v in &volume.voxels {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&vol_path, payload)?;
    fs::write(&lab_path, &volume.labels)?;
    fs::write(sibling(path, "json"), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let json_path = sibling(path, "json");
    let text = fs::read(&json_path)?;
    let sidecar: Sidecar =
        serde_json::from_slice(&text).map_err(|e| Error::MalformedSidecar {
            path: json_path.clone(),
            reason: e.to_string(),
        })?;
    if sidecar.dims.iter().any(|&d| d == 0) {
        return Err(Error::MalformedSidecar {
            path: json_path,
            reason: "zero dimension".into(),
        });
    }
    let phase: Phase = sidecar.phase.parse()?;
    let n: usize = sidecar.dims.iter().product();

    let vol_path = sibling(path, "vol");
    let bytes = fs::read(&vol_path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::PayloadLength {
            path: vol_path,
            bytes: bytes.len(),
            width: 4,
        });
    }
    if bytes.len() / 4 != n {
        return Err(Error::DimsMismatch {
            path: vol_path,
            dims: sidecar.dims,
            expected: n,
            actual: bytes.len() / 4,
        });
    }
    let voxels = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let lab_path = json_path.with_file_name(&sidecar.labels_file);
    let labels = fs::read(&lab_path)?;
    if labels.len() != n {
        return Err(Error::DimsMismatch {
            path: lab_path,
            dims: sidecar.dims,
            expected: n,
            actual: labels.len(),
        });
    }
    Ok(Volume {
        dims: sidecar.dims,
        spacing_mm: sidecar.spacing_mm,
        phase,
        voxels,
        labels,
        stage: if sidecar.normalized {
            Stage::Normalized
        } else {
            Stage::Raw
        },
    })
}

/// Coarse masks are stored as a bare label payload with the volume's layout.
pub fn write_mask(mask: &CoarseMask, path: &Path) -> Result<()> {
    fs::write(path, &mask.mask)?;
    Ok(())
}

pub fn read_mask(path: &Path, dims: [usize; 3], source: MaskSource) -> Result<CoarseMask> {
    let mask = fs::read(path)?;
    let n: usize = dims.iter().product();
    if mask.len() != n {
        return Err(Error::DimsMismatch {
            path: path.to_path_buf(),
            dims,
            expected: n,
            actual: mask.len(),
        });
    }
    Ok(CoarseMask { dims, mask, source })
}
