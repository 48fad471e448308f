//! Organ-centred 2D patch extraction, paired augmentation and minibatch
//! assembly.
//!
//! Patches are axial `P x P` windows stored row-major: pixel `(r, c)` sits at
//! `r * P + c` and maps to volume voxel `(x0 + c, y0 + r, z)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{CoarseMask, Phase, Volume};

/// Parameter redraws allowed after the first augmentation attempt.
pub const AUGMENT_RETRIES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSource {
    pub volume: usize,
    pub slice: usize,
    /// Sampled center voxel `(x, y)` on the slice.
    pub center: (usize, usize),
    /// Top-left voxel `(x0, y0)` of the window.
    pub origin: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub image: Vec<f64>,
    pub gt: Vec<u8>,
    pub attention: Vec<u8>,
    pub organ_class: u8,
    pub phase: Phase,
    pub source: PatchSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugView {
    pub size: usize,
    pub image: Vec<f64>,
    pub attention: Vec<u8>,
    pub gt: Vec<u8>,
    pub organ_class: u8,
    pub phase: Phase,
    pub source: PatchSource,
    /// Masked mean intensity, filled by [`crate::dcc::masked_mean_intensity`].
    pub d: Option<f64>,
}

impl AugView {
    pub fn attention_count(&self) -> usize {
        self.attention.iter().filter(|&&a| a != 0).count()
    }

    /// Unaugmented view of a patch.
    pub fn identity(patch: &Patch) -> Self {
        AugView {
            size: patch.size,
            image: patch.image.clone(),
            attention: patch.attention.clone(),
            gt: patch.gt.clone(),
            organ_class: patch.organ_class,
            phase: patch.phase,
            source: patch.source,
            d: None,
        }
    }
}

/// Two augmented views per patch; views `2k` and `2k + 1` (0-based) share a
/// parent. Every other view is in the denominator set of an anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    pub views: Vec<AugView>,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn partner(&self, k: usize) -> usize {
        partner(k)
    }

    pub fn pairing(&self) -> Vec<usize> {
        (0..self.len()).map(partner).collect()
    }

    pub fn negatives(&self, k: usize) -> Vec<usize> {
        (0..self.len()).filter(|&j| j != k).collect()
    }
}

/// Positive partner of view `k` in the interleaved layout.
#[inline]
pub fn partner(k: usize) -> usize {
    k ^ 1
}

/// Picks a uniformly random coarse-mask voxel of `organ_class` and crops the
/// `size x size` axial window around it, shifted to stay inside the slice.
pub fn sample_patch<R: Rng + ?Sized>(
    volume: &Volume,
    coarse: &CoarseMask,
    volume_id: usize,
    organ_class: u8,
    size: usize,
    rng: &mut R,
) -> Result<Patch> {
    if !volume.normalized() {
        return Err(Error::StageOrder("patches need a normalized volume".into()));
    }
    volume.check()?;
    if coarse.dims != volume.dims {
        return Err(Error::Shape(format!(
            "coarse mask dims {:?} vs volume {:?}",
            coarse.dims, volume.dims
        )));
    }
    let candidates: Vec<usize> = coarse
        .mask
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == organ_class)
        .map(|(i, _)| i)
        .collect();
    if candidates.is_empty() {
        return Err(Error::OrganMissing(organ_class));
    }
    let idx = candidates[rng.gen_range(0..candidates.len())];
    let h = volume.dims[0];
    let w = volume.dims[1];
    let (x, y, z) = (idx % h, (idx / h) % w, idx / (h * w));
    extract_patch(volume, coarse, volume_id, organ_class, size, (x, y), z)
}

/// Deterministic window around `(x, y)` on slice `z`.
pub fn extract_patch(
    volume: &Volume,
    coarse: &CoarseMask,
    volume_id: usize,
    organ_class: u8,
    size: usize,
    center: (usize, usize),
    z: usize,
) -> Result<Patch> {
    let [h, w, _] = volume.dims;
    if size == 0 || size > h || size > w {
        return Err(Error::Shape(format!(
            "patch size {size} does not fit slice {h}x{w}"
        )));
    }
    let x0 = window_origin(center.0, size, h);
    let y0 = window_origin(center.1, size, w);
    let mut image = Vec::with_capacity(size * size);
    let mut gt = Vec::with_capacity(size * size);
    let mut attention = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let i = volume.index(x0 + c, y0 + r, z);
            image.push(volume.voxels[i] as f64);
            gt.push((volume.labels[i] == organ_class) as u8);
            attention.push((coarse.mask[i] == organ_class) as u8);
        }
    }
    Ok(Patch {
        size,
        image,
        gt,
        attention,
        organ_class,
        phase: volume.phase,
        source: PatchSource {
            volume: volume_id,
            slice: z,
            center,
            origin: (x0, y0),
        },
    })
}

/// Start of a `size`-wide window centred on `center`, shifted into `[0, extent)`.
pub fn window_origin(center: usize, size: usize, extent: usize) -> usize {
    let start = center as isize - (size / 2) as isize;
    start.clamp(0, (extent - size) as isize) as usize
}

/// One draw of the augmentation pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugParams {
    /// Side of the crop window as a fraction of the patch side.
    pub crop_frac: f64,
    /// Top-left corner of the crop window, in pixels.
    pub crop_origin: (f64, f64),
    /// Counter-clockwise rotation in (column, row) coordinates, degrees.
    pub angle_deg: f64,
    pub scale_w: f64,
    pub scale_h: f64,
}

impl AugParams {
    pub const IDENTITY: AugParams = AugParams {
        crop_frac: 1.0,
        crop_origin: (0.0, 0.0),
        angle_deg: 0.0,
        scale_w: 1.0,
        scale_h: 1.0,
    };

    pub fn draw<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Self {
        let crop_frac = rng.gen_range(0.7..=1.0);
        let slack = size as f64 * (1.0 - crop_frac);
        let r0 = rng.gen::<f64>() * slack;
        let c0 = rng.gen::<f64>() * slack;
        AugParams {
            crop_frac,
            crop_origin: (r0, c0),
            angle_deg: rng.gen_range(-30.0..=30.0),
            scale_w: rng.gen_range(0.3..=1.0),
            scale_h: rng.gen_range(0.7..=1.0),
        }
    }

    /// Source coordinates `(row, col)` in the input patch for output pixel
    /// `(r, c)`: undo scaling, then rotation, then crop-and-resize.
    pub fn source_of(&self, size: usize, r: usize, c: usize) -> (f64, f64) {
        let center = (size as f64 - 1.0) / 2.0;
        let cs = center + (c as f64 - center) / self.scale_w;
        let rs = center + (r as f64 - center) / self.scale_h;
        let (sin, cos) = self.angle_deg.to_radians().sin_cos();
        let (dc, dr) = (cs - center, rs - center);
        let cr = center + cos * dc + sin * dr;
        let rr = center - sin * dc + cos * dr;
        let ratio = self.crop_frac;
        let c_src = self.crop_origin.1 + (cr + 0.5) * ratio - 0.5;
        let r_src = self.crop_origin.0 + (rr + 0.5) * ratio - 0.5;
        (r_src, c_src)
    }
}

/// Forward rotation of pixel `(r, c)` about the patch center, the closed form
/// inverted inside [`AugParams::source_of`].
pub fn rotate_point(size: usize, r: f64, c: f64, angle_deg: f64) -> (f64, f64) {
    let center = (size as f64 - 1.0) / 2.0;
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let (dc, dr) = (c - center, r - center);
    (center + sin * dc + cos * dr, center + cos * dc - sin * dr)
}

fn bilinear(img: &[f64], size: usize, r: f64, c: f64) -> f64 {
    let r0 = r.floor();
    let c0 = c.floor();
    let fr = r - r0;
    let fc = c - c0;
    let at = |rr: f64, cc: f64| -> f64 {
        if rr < 0.0 || cc < 0.0 || rr >= size as f64 || cc >= size as f64 {
            0.0
        } else {
            img[rr as usize * size + cc as usize]
        }
    };
    (1.0 - fr) * ((1.0 - fc) * at(r0, c0) + fc * at(r0, c0 + 1.0))
        + fr * ((1.0 - fc) * at(r0 + 1.0, c0) + fc * at(r0 + 1.0, c0 + 1.0))
}

fn nearest(mask: &[u8], size: usize, r: f64, c: f64) -> u8 {
    let (rr, cc) = (r.round(), c.round());
    if rr < 0.0 || cc < 0.0 || rr >= size as f64 || cc >= size as f64 {
        0
    } else {
        mask[rr as usize * size + cc as usize]
    }
}

/// Resamples a patch through one parameter draw: bilinear for the image,
/// nearest neighbour for both masks, zero outside the source.
pub fn apply_augmentation(patch: &Patch, params: &AugParams) -> AugView {
    let p = patch.size;
    let mut image = vec![0.0; p * p];
    let mut attention = vec![0u8; p * p];
    let mut gt = vec![0u8; p * p];
    for r in 0..p {
        for c in 0..p {
            let (rs, cs) = params.source_of(p, r, c);
            let i = r * p + c;
            image[i] = bilinear(&patch.image, p, rs, cs);
            attention[i] = nearest(&patch.attention, p, rs, cs);
            gt[i] = nearest(&patch.gt, p, rs, cs);
        }
    }
    AugView {
        size: p,
        image,
        attention,
        gt,
        organ_class: patch.organ_class,
        phase: patch.phase,
        source: patch.source,
        d: None,
    }
}

pub fn augment<R: Rng + ?Sized>(patch: &Patch, rng: &mut R) -> Result<AugView> {
    for _ in 0..=AUGMENT_RETRIES {
        let params = AugParams::draw(patch.size, rng);
        let view = apply_augmentation(patch, &params);
        if view.attention_count() > 0 {
            return Ok(view);
        }
    }
    Err(Error::DegenerateAugmentation(AUGMENT_RETRIES + 1))
}

pub fn build_minibatch<R: Rng + ?Sized>(patches: &[Patch], rng: &mut R) -> Result<Minibatch> {
    if patches.len() < 2 {
        return Err(Error::BatchTooSmall(patches.len()));
    }
    let mut views = Vec::with_capacity(2 * patches.len());
    for patch in patches {
        views.push(augment(patch, rng)?);
        views.push(augment(patch, rng)?);
    }
    Ok(Minibatch { views })
}

/// Channel 0 is the image, channel 1 the binary attention map.
pub fn to_model_input(view: &AugView) -> Vec<f64> {
    let mut input = Vec::with_capacity(2 * view.image.len());
    input.extend_from_slice(&view.image);
    input.extend(view.attention.iter().map(|&a| a as f64));
    input
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::Stage;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn volume(h: usize, w: usize, d: usize) -> Volume {
        let n = h * w * d;
        Volume {
            dims: [h, w, d],
            spacing_mm: [1.0; 3],
            phase: Phase::CE,
            voxels: (0..n).map(|i| (i % 97) as f32 / 97.0).collect(),
            labels: vec![0; n],
            stage: Stage::Normalized,
        }
    }

    fn patch_with(size: usize, attention: &[(usize, usize)]) -> Patch {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut att = vec![0u8; size * size];
        for &(r, c) in attention {
            att[r * size + c] = 1;
        }
        Patch {
            size,
            image: (0..size * size).map(|_| rng.gen()).collect(),
            gt: att.clone(),
            attention: att,
            organ_class: 2,
            phase: Phase::NC,
            source: PatchSource {
                volume: 0,
                slice: 0,
                center: (0, 0),
                origin: (0, 0),
            },
        }
    }

    #[test]
    fn single_voxel_organ_is_always_the_center() {
        let mut v = volume(20, 20, 3);
        let i = v.index(1, 17, 2);
        v.labels[i] = 5;
        let coarse = CoarseMask::oracle(&v);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let p = sample_patch(&v, &coarse, 0, 5, 8, &mut rng).unwrap();
            assert_eq!(p.source.center, (1, 17));
            assert_eq!(p.source.slice, 2);
            assert_eq!(p.source.origin, (0, 12));
            assert_eq!(p.attention.iter().map(|&a| a as usize).sum::<usize>(), 1);
            assert_eq!(p.attention[(17 - 12) * 8 + 1], 1);
        }
    }

    #[test]
    fn attention_is_coarse_mask_restricted_to_window() {
        let mut v = volume(24, 24, 2);
        for x in 5..15 {
            for y in 6..12 {
                let i = v.index(x, y, 1);
                v.labels[i] = 3;
            }
        }
        let mut coarse = CoarseMask::oracle(&v);
        // Coarse mask deviates from the labels on one row and has another class.
        for x in 5..15 {
            let i = v.index(x, 11, 1);
            coarse.mask[i] = 0;
        }
        let j = v.index(16, 8, 1);
        coarse.mask[j] = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = sample_patch(&v, &coarse, 7, 3, 16, &mut rng).unwrap();
        let (x0, y0) = p.source.origin;
        for r in 0..16 {
            for c in 0..16 {
                let i = v.index(x0 + c, y0 + r, 1);
                assert_eq!(p.attention[r * 16 + c], (coarse.mask[i] == 3) as u8);
                assert_eq!(p.gt[r * 16 + c], (v.labels[i] == 3) as u8);
                assert_eq!(p.image[r * 16 + c], v.voxels[i] as f64);
            }
        }
        assert_eq!(p.source.volume, 7);
    }

    #[test]
    fn two_voxel_organ_sampled_uniformly() {
        let mut v = volume(16, 16, 2);
        let a = v.index(3, 3, 0);
        let b = v.index(12, 9, 1);
        v.labels[a] = 1;
        v.labels[b] = 1;
        let coarse = CoarseMask::oracle(&v);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws = 1000;
        let hits = (0..draws)
            .filter(|_| {
                sample_patch(&v, &coarse, 0, 1, 8, &mut rng)
                    .unwrap()
                    .source
                    .center
                    == (3, 3)
            })
            .count();
        let freq = hits as f64 / draws as f64;
        assert!((freq - 0.5).abs() <= 0.05, "freq {freq}");
    }

    #[test]
    fn missing_organ_errors() {
        let v = volume(16, 16, 2);
        let coarse = CoarseMask::oracle(&v);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_patch(&v, &coarse, 0, 9, 8, &mut rng),
            Err(Error::OrganMissing(9))
        ));
    }

    #[test]
    fn identity_augmentation_is_exact() {
        let p = patch_with(16, &[(4, 5), (9, 9), (10, 9)]);
        let v = apply_augmentation(&p, &AugParams::IDENTITY);
        assert_eq!(v.image, p.image);
        assert_eq!(v.attention, p.attention);
        assert_eq!(v.gt, p.gt);
    }

    #[test]
    fn rotation_moves_single_pixel_to_closed_form_position() {
        let size = 32;
        let (r, c) = (8usize, 22usize);
        let p = patch_with(size, &[(r, c)]);
        let params = AugParams {
            angle_deg: 30.0,
            ..AugParams::IDENTITY
        };
        let v = apply_augmentation(&p, &params);
        let (er, ec) = rotate_point(size, r as f64, c as f64, 30.0);
        let (er_i, ec_i) = (er.round() as usize, ec.round() as usize);
        assert_eq!(v.attention[er_i * size + ec_i], 1, "expected ({er}, {ec})");
        for rr in 0..size {
            for cc in 0..size {
                if v.attention[rr * size + cc] == 1 {
                    let dist = ((rr as f64 - er).powi(2) + (cc as f64 - ec).powi(2)).sqrt();
                    assert!(dist < 1.0, "stray pixel ({rr}, {cc})");
                }
            }
        }
    }

    #[test]
    fn minibatch_pairing_structure() {
        let patches: Vec<Patch> = (0..2)
            .map(|k| {
                let mut p = patch_with(16, &[(7, 7), (7, 8), (8, 7), (8, 8)]);
                p.organ_class = k as u8 + 1;
                p.source.volume = k;
                p
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = build_minibatch(&patches, &mut rng).unwrap();
        assert_eq!(batch.len(), 4);
        assert_eq!(batch.pairing(), vec![1, 0, 3, 2]);
        for k in 0..4 {
            assert_eq!(batch.negatives(k).len(), 3);
        }
        assert!(matches!(
            build_minibatch(&patches[..1], &mut rng),
            Err(Error::BatchTooSmall(1))
        ));
    }

    #[test]
    fn model_input_layout() {
        let p = patch_with(8, &[(1, 1), (2, 3)]);
        let v = AugView::identity(&p);
        let input = to_model_input(&v);
        assert_eq!(input.len(), 2 * 8 * 8);
        assert_eq!(&input[..64], &v.image[..]);
        for (a, b) in input[64..].iter().zip(&v.attention) {
            assert!(*a == 0.0 || *a == 1.0);
            assert_eq!(*a, *b as f64);
        }
    }

    proptest! {
        #[test]
        fn augmented_masks_stay_binary(seed in any::<u64>()) {
            let p = patch_with(16, &[(6, 6), (6, 7), (7, 6), (7, 7), (8, 8)]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = augment(&p, &mut rng).unwrap();
            prop_assert!(v.attention.iter().all(|&a| a <= 1));
            prop_assert!(v.gt.iter().all(|&a| a <= 1));
            prop_assert!(v.attention_count() >= 1);
            prop_assert!(v.image.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }

        #[test]
        fn pairing_invariants(n in 2usize..8, seed in any::<u64>()) {
            let patches: Vec<Patch> = (0..n).map(|k| {
                let mut p = patch_with(12, &[(5, 5), (5, 6), (6, 5), (6, 6)]);
                p.source.volume = k;
                p.phase = if k % 2 == 0 { Phase::NC } else { Phase::CE };
                p
            }).collect();
            let mut a = ChaCha8Rng::seed_from_u64(seed);
            let mut b = ChaCha8Rng::seed_from_u64(seed);
            let batch = build_minibatch(&patches, &mut a).unwrap();
            prop_assert_eq!(&batch, &build_minibatch(&patches, &mut b).unwrap());
            let pairing = batch.pairing();
            for k in 0..2 * n {
                let pk = pairing[k];
                prop_assert_ne!(pk, k);
                prop_assert_eq!(pairing[pk], k);
                let neg = batch.negatives(k);
                prop_assert_eq!(neg.len(), 2 * n - 1);
                prop_assert!(neg.contains(&pk));
                prop_assert_eq!(batch.views[k].organ_class, batch.views[pk].organ_class);
                prop_assert_eq!(batch.views[k].phase, batch.views[pk].phase);
                prop_assert_eq!(batch.views[k].source, batch.views[pk].source);
            }
        }
    }
}
