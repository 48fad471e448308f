//! Contrastive pretraining, Dice fine-tuning, volumetric inference with
//! majority-vote fusion, and Dice evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dcc::{
    contrast_correlation, dcc_loss, labeled_positive_loss, masked_mean_intensity, LossConfig,
    LossMode, ViewLabel,
};
use crate::error::{Error, Result};
use crate::model::{
    adam_step, dice_loss, project_backward, project_forward, seg_backward, seg_forward, AdamConfig,
    AdamState, Gradients, ModelConfig, Network,
};
use crate::phantom::{
    corrupt_labels, generate_phantom, read_mask, read_volume, split_seed, synthetic_slice_scores,
    write_mask, write_volume, CoarseMask, DatasetSpec, MaskSource, Phase, Volume,
};
use crate::preprocess::{kept_slices, preprocess, write_slice_scores, CROP_HI_SCORE, CROP_LO_SCORE};
use crate::sampler::{
    build_minibatch, extract_patch, to_model_input, window_origin, AugView, Minibatch, Patch,
};

// Salts keep the random streams of different stages apart under one seed.
const CORRUPT_SALT: u64 = 0x636f_7272_7570_7400;
const TEST_SALT: u64 = 0x7465_7374_0000_0000;
const FINETUNE_SALT: u64 = 0x6669_6e65_0000_0000;
const HEAD_SALT: u64 = 0x6865_6164_0000_0000;
const SCRATCH_SALT: u64 = 0x7363_7261_7463_6800;
const EMBED_SALT: u64 = 0x656d_6265_6400_0000;

fn d_batch() -> usize {
    4
}
fn d_pre_epochs() -> usize {
    10
}
fn d_pre_lr() -> f64 {
    3e-4
}
fn d_ft_epochs() -> usize {
    5
}
fn d_ft_lr() -> f64 {
    1e-4
}
fn d_steps() -> usize {
    50
}
fn d_per_organ() -> usize {
    4
}
fn d_patch() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Patches per minibatch; each yields two views.
    #[serde(default = "d_batch")]
    pub batch_patches: usize,
    #[serde(default = "d_pre_epochs")]
    pub pretrain_epochs: usize,
    #[serde(default = "d_pre_lr")]
    pub pretrain_lr: f64,
    #[serde(default = "d_ft_epochs")]
    pub finetune_epochs: usize,
    #[serde(default = "d_ft_lr")]
    pub finetune_lr: f64,
    #[serde(default = "d_steps")]
    pub steps_per_epoch: usize,
    /// Pretraining patches drawn per (volume, organ).
    #[serde(default = "d_per_organ")]
    pub patches_per_organ: usize,
    #[serde(default = "d_patch")]
    pub patch_size: usize,
    /// Phases used for training; empty means every phase in the dataset.
    #[serde(default)]
    pub phases: Vec<Phase>,
    #[serde(default)]
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_patches", self.batch_patches),
            ("pretrain_epochs", self.pretrain_epochs),
            ("finetune_epochs", self.finetune_epochs),
            ("steps_per_epoch", self.steps_per_epoch),
            ("patches_per_organ", self.patches_per_organ),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.batch_patches < 2 {
            return Err(Error::Config("batch_patches must be at least 2".into()));
        }
        for (name, lr) in [("pretrain_lr", self.pretrain_lr), ("finetune_lr", self.finetune_lr)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        self.model.validate()?;
        self.model.check_input_size(self.patch_size)
    }
}

/// One preprocessed volume with its coarse mask; ground truth is `volume.labels`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    pub volume: Volume,
    pub coarse: CoarseMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexEntry {
    name: String,
    split: String,
    phase: Phase,
    coarse_file: String,
    coarse_source: MaskSource,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetIndex {
    spec: DatasetSpec,
    seed: u64,
    volumes: Vec<IndexEntry>,
}

impl Dataset {
    /// Generates, preprocesses (window, normalize, crop on synthetic slice
    /// scores) and corrupts coarse masks at the spec's rate.
    pub fn build(spec: &DatasetSpec, seed: u64) -> Result<Self> {
        let raw = generate_phantom(spec, seed)?;
        let per_phase = spec.volumes_per_phase + spec.test_volumes_per_phase;
        let scores = synthetic_slice_scores(spec.dims[2], spec.slice_score_range);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, (volume, _)) in raw.into_iter().enumerate() {
            let volume = preprocess(&volume, &scores)?;
            let coarse = corrupt_labels(
                &volume.labels,
                volume.dims,
                spec.corruption_rate,
                split_seed(seed ^ CORRUPT_SALT, i as u64),
            );
            let within = i % per_phase;
            let is_test = within >= spec.volumes_per_phase;
            let (split, k) = if is_test {
                ("test", within - spec.volumes_per_phase)
            } else {
                ("train", within)
            };
            let name = format!("{split}_{}_{k:03}", volume.phase);
            let sample = Sample {
                name,
                volume,
                coarse,
            };
            if is_test {
                test.push(sample);
            } else {
                train.push(sample);
            }
        }
        Ok(Dataset {
            spec: spec.clone(),
            train,
            test,
        })
    }

    pub fn filter_phases(&self, phases: &[Phase]) -> Dataset {
        if phases.is_empty() {
            return self.clone();
        }
        let keep = |s: &&Sample| phases.contains(&s.volume.phase);
        Dataset {
            spec: self.spec.clone(),
            train: self.train.iter().filter(keep).cloned().collect(),
            test: self.test.iter().filter(keep).cloned().collect(),
        }
    }

    pub fn organs(&self) -> Vec<u8> {
        let mut ids = self.spec.class_ids();
        ids.sort_unstable();
        ids
    }

    pub fn save(&self, dir: &Path, seed: u64) -> Result<()> {
        fs::create_dir_all(dir)?;
        // Volumes are stored cropped, so only the scores of kept slices apply.
        let all = synthetic_slice_scores(self.spec.dims[2], self.spec.slice_score_range);
        let scores: Vec<f64> = kept_slices(&all, CROP_LO_SCORE, CROP_HI_SCORE)
            .into_iter()
            .map(|z| all[z])
            .collect();
        let mut volumes = Vec::new();
        for (split, samples) in [("train", &self.train), ("test", &self.test)] {
            for s in samples {
                write_volume(&s.volume, &dir.join(format!("{}.json", s.name)))?;
                let coarse_file = format!("{}.coarse.lab", s.name);
                write_mask(&s.coarse, &dir.join(&coarse_file))?;
                write_slice_scores(&scores, &dir.join(format!("{}.scores.json", s.name)))?;
                volumes.push(IndexEntry {
                    name: s.name.clone(),
                    split: split.to_string(),
                    phase: s.volume.phase,
                    coarse_file,
                    coarse_source: s.coarse.source,
                });
            }
        }
        let index = DatasetIndex {
            spec: self.spec.clone(),
            seed,
            volumes,
        };
        fs::write(dir.join("dataset.json"), serde_json::to_vec_pretty(&index)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: DatasetIndex = serde_json::from_slice(&fs::read(dir.join("dataset.json"))?)?;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for entry in index.volumes {
            let volume = read_volume(&dir.join(format!("{}.json", entry.name)))?;
            if volume.phase != entry.phase {
                return Err(Error::Config(format!(
                    "{} is {} on disk but {} in the index",
                    entry.name, volume.phase, entry.phase
                )));
            }
            let coarse = read_mask(&dir.join(&entry.coarse_file), volume.dims, entry.coarse_source)?;
            let sample = Sample {
                name: entry.name,
                volume,
                coarse,
            };
            match entry.split.as_str() {
                "train" => train.push(sample),
                "test" => test.push(sample),
                other => return Err(Error::Config(format!("unknown split `{other}`"))),
            }
        }
        Ok(Dataset {
            spec: index.spec,
            train,
            test,
        })
    }
}

/// Uniform patch sampling with per-(volume, organ) candidate lists cached.
pub struct PatchSampler<'a> {
    samples: &'a [Sample],
    size: usize,
    /// (sample index, organ) -> flat coarse-mask indices of that organ.
    candidates: BTreeMap<(usize, u8), Vec<usize>>,
}

impl<'a> PatchSampler<'a> {
    pub fn new(samples: &'a [Sample], organs: &[u8], size: usize) -> Self {
        let mut candidates = BTreeMap::new();
        for (si, s) in samples.iter().enumerate() {
            for &organ in organs {
                let idx: Vec<usize> = s
                    .coarse
                    .mask
                    .iter()
                    .enumerate()
                    .filter(|(_, &l)| l == organ)
                    .map(|(i, _)| i)
                    .collect();
                if !idx.is_empty() {
                    candidates.insert((si, organ), idx);
                }
            }
        }
        PatchSampler {
            samples,
            size,
            candidates,
        }
    }

    /// (organ, phase) groups with at least one candidate volume.
    pub fn groups(&self) -> Vec<ViewLabel> {
        let set: BTreeSet<ViewLabel> = self
            .candidates
            .keys()
            .map(|&(si, organ)| ViewLabel {
                organ,
                phase: self.samples[si].volume.phase,
            })
            .collect();
        set.into_iter().collect()
    }

    fn volumes_of(&self, group: ViewLabel) -> Vec<usize> {
        self.candidates
            .keys()
            .filter(|&&(si, organ)| organ == group.organ && self.samples[si].volume.phase == group.phase)
            .map(|&(si, _)| si)
            .collect()
    }

    pub fn sample_in<R: Rng + ?Sized>(&self, si: usize, organ: u8, rng: &mut R) -> Result<Patch> {
        let idx = self
            .candidates
            .get(&(si, organ))
            .ok_or(Error::OrganMissing(organ))?;
        let s = &self.samples[si];
        let flat = idx[rng.gen_range(0..idx.len())];
        let [h, w, _] = s.volume.dims;
        let (x, y, z) = (flat % h, (flat / h) % w, flat / (h * w));
        extract_patch(&s.volume, &s.coarse, si, organ, self.size, (x, y), z)
    }

    pub fn sample_group<R: Rng + ?Sized>(&self, group: ViewLabel, rng: &mut R) -> Result<Patch> {
        let vols = self.volumes_of(group);
        if vols.is_empty() {
            return Err(Error::OrganMissing(group.organ));
        }
        let si = vols[rng.gen_range(0..vols.len())];
        self.sample_in(si, group.organ, rng)
    }
}

/// Fixed pool of pretraining patches, grouped by (organ, phase).
fn pretrain_pool<R: Rng + ?Sized>(
    sampler: &PatchSampler<'_>,
    organs: &[u8],
    per_organ: usize,
    rng: &mut R,
) -> Result<BTreeMap<ViewLabel, Vec<Patch>>> {
    let mut pool: BTreeMap<ViewLabel, Vec<Patch>> = BTreeMap::new();
    for si in 0..sampler.samples.len() {
        for &organ in organs {
            if !sampler.candidates.contains_key(&(si, organ)) {
                continue;
            }
            let label = ViewLabel {
                organ,
                phase: sampler.samples[si].volume.phase,
            };
            for _ in 0..per_organ {
                let p = sampler.sample_in(si, organ, rng)?;
                pool.entry(label).or_default().push(p);
            }
        }
    }
    Ok(pool)
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub network: Network,
    pub loss_curve: Vec<f64>,
}

/// Per-view tapes and embeddings of one forward pass over a minibatch.
struct BatchForward {
    tapes: Vec<(crate::model::EncoderTape, crate::model::ProjectionTape)>,
    z: Vec<Vec<f64>>,
    d: Vec<f64>,
    labels: Vec<ViewLabel>,
}

fn forward_batch(net: &Network, batch: &mut Minibatch) -> Result<BatchForward> {
    let mut tapes = Vec::with_capacity(batch.len());
    let mut z = Vec::with_capacity(batch.len());
    let mut d = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for view in &mut batch.views {
        d.push(masked_mean_intensity(view)?);
        labels.push(ViewLabel::from(&*view));
        let (enc, proj) = project_forward(net, &to_model_input(view), view.size)?;
        z.push(proj.z.clone());
        tapes.push((enc, proj));
    }
    Ok(BatchForward {
        tapes,
        z,
        d,
        labels,
    })
}

/// Contrastive loss and its embedding gradient for one forward pass.
pub fn batch_loss(
    z: &[Vec<f64>],
    d: &[f64],
    labels: &[ViewLabel],
    loss: &LossConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    match loss.mode {
        LossMode::Dcc | LossMode::Plain => {
            let v = contrast_correlation(d)?;
            let pairing: Vec<usize> = (0..z.len()).map(crate::sampler::partner).collect();
            let out = dcc_loss(z, &v, &pairing, Some(labels), loss)?;
            Ok((out.loss, out.grad))
        }
        LossMode::HardLabel => labeled_positive_loss(z, labels, loss),
    }
}

/// Visits every (organ, phase) group once per pass, in a fresh random order
/// each pass, so batches mix organs and phases.
struct GroupCycle {
    order: Vec<ViewLabel>,
    pos: usize,
}

impl GroupCycle {
    fn new(groups: Vec<ViewLabel>) -> Self {
        let pos = groups.len();
        GroupCycle { order: groups, pos }
    }

    fn next<R: Rng + ?Sized>(&mut self, rng: &mut R) -> ViewLabel {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Groups for one batch. Hard-label batches take two patches from each group
/// so every anchor has positives beyond its partner.
fn batch_groups<R: Rng + ?Sized>(cycle: &mut GroupCycle, n: usize, mode: LossMode, rng: &mut R) -> Vec<ViewLabel> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let g = cycle.next(rng);
        out.push(g);
        if mode == LossMode::HardLabel && out.len() < n {
            out.push(g);
        }
    }
    out
}

pub fn pretrain(
    dataset: &Dataset,
    cfg: &TrainConfig,
    loss: &LossConfig,
    seed: u64,
) -> Result<PretrainOutput> {
    cfg.validate()?;
    loss.validate()?;
    let data = dataset.filter_phases(&cfg.phases);
    let organs = data.organs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::pretraining(cfg.model.clone(), &mut rng)?;
    let sampler = PatchSampler::new(&data.train, &organs, cfg.patch_size);
    let pool = pretrain_pool(&sampler, &organs, cfg.patches_per_organ, &mut rng)?;
    let groups: Vec<ViewLabel> = pool.keys().copied().collect();
    if groups.is_empty() {
        return Err(Error::Config("no training patches for the selected phases".into()));
    }
    let adam = AdamConfig::with_lr(cfg.pretrain_lr);
    let mut enc_state = AdamState::new(net.encoder.params.len());
    let mut proj_state = AdamState::new(net.projection.as_ref().map_or(0, |p| p.params.len()));
    let steps = cfg.pretrain_epochs * cfg.steps_per_epoch;
    let mut curve = Vec::with_capacity(steps);
    let mut cycle = GroupCycle::new(groups);
    for step in 0..steps {
        let picks = batch_groups(&mut cycle, cfg.batch_patches, loss.mode, &mut rng);
        let patches: Vec<Patch> = picks
            .iter()
            .map(|g| {
                let members = &pool[g];
                members[rng.gen_range(0..members.len())].clone()
            })
            .collect();
        let mut batch = build_minibatch(&patches, &mut rng)?;
        let fwd = forward_batch(&net, &mut batch)?;
        let (value, grad_z) = batch_loss(&fwd.z, &fwd.d, &fwd.labels, loss)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("pretraining loss at step {step}")));
        }
        let mut grads = Gradients::zeros(&net);
        for ((enc, proj), g) in fwd.tapes.iter().zip(&grad_z) {
            project_backward(&net, enc, proj, g, &mut grads);
        }
        adam_step(&mut net.encoder.params, &grads.encoder, &mut enc_state, &adam)?;
        let projection = net.projection.as_mut().expect("pretraining network");
        adam_step(&mut projection.params, &grads.projection, &mut proj_state, &adam)?;
        curve.push(value);
        if step % cfg.steps_per_epoch == 0 {
            debug!("pretrain step {step}: loss {value:.4}");
        }
    }
    info!(
        "pretrained {steps} steps ({}), final loss {:.4}",
        loss.mode,
        curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(PretrainOutput {
        network: net,
        loss_curve: curve,
    })
}

#[derive(Debug, Clone)]
pub struct FinetuneOutput {
    pub network: Network,
    pub loss_curve: Vec<f64>,
}

/// Trains encoder and a fresh segmentation head with the soft Dice loss on
/// (image + coarse attention, ground truth) patches. `init` supplies a
/// pretrained encoder; without it the encoder starts from random weights.
/// The head's initialization and the patch stream depend only on `seed`, so
/// pretrained and scratch runs see identical data.
pub fn finetune(
    dataset: &Dataset,
    init: Option<&Network>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<FinetuneOutput> {
    cfg.validate()?;
    let data = dataset.filter_phases(&cfg.phases);
    let organs = data.organs();
    let encoder_net = match init {
        Some(net) => {
            if net.config() != &cfg.model {
                return Err(Error::Config("checkpoint architecture differs from config".into()));
            }
            net.clone()
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SCRATCH_SALT);
            Network::pretraining(cfg.model.clone(), &mut rng)?
        }
    };
    let mut head_rng = ChaCha8Rng::seed_from_u64(seed ^ HEAD_SALT);
    let mut net = encoder_net.into_segmentation(&mut head_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ FINETUNE_SALT);
    let sampler = PatchSampler::new(&data.train, &organs, cfg.patch_size);
    let groups = sampler.groups();
    if groups.is_empty() {
        return Err(Error::Config("no training patches for the selected phases".into()));
    }
    let adam = AdamConfig::with_lr(cfg.finetune_lr);
    let mut enc_state = AdamState::new(net.encoder.params.len());
    let mut head_state = AdamState::new(net.seg_head.as_ref().map_or(0, |h| h.params.len()));
    let steps = cfg.finetune_epochs * cfg.steps_per_epoch;
    let mut curve = Vec::with_capacity(steps);
    let mut cycle = GroupCycle::new(groups);
    let size = cfg.patch_size;
    for step in 0..steps {
        let mut grads = Gradients::zeros(&net);
        let mut total = 0.0;
        let inv = 1.0 / cfg.batch_patches as f64;
        for _ in 0..cfg.batch_patches {
            let group = cycle.next(&mut rng);
            let patch = sampler.sample_group(group, &mut rng)?;
            let view = AugView::identity(&patch);
            let (enc, seg) = seg_forward(&net, &to_model_input(&view), size)?;
            let (l, mut g) = dice_loss(&seg.prob, &view.gt)?;
            for v in &mut g {
                *v *= inv;
            }
            seg_backward(&net, &enc, &seg, &g, &mut grads);
            total += l * inv;
        }
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("fine-tuning loss at step {step}")));
        }
        adam_step(&mut net.encoder.params, &grads.encoder, &mut enc_state, &adam)?;
        let head = net.seg_head.as_mut().expect("segmentation network");
        adam_step(&mut head.params, &grads.seg_head, &mut head_state, &adam)?;
        curve.push(total);
    }
    info!(
        "fine-tuned {steps} steps ({}), final loss {:.4}",
        if init.is_some() { "pretrained" } else { "scratch" },
        curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(FinetuneOutput {
        network: net,
        loss_curve: curve,
    })
}

/// Per-organ refinement output over a whole volume.
#[derive(Debug, Clone, PartialEq)]
pub struct OrganMap {
    pub class: u8,
    /// Sigmoid probability inside the inference windows, zero elsewhere.
    pub prob: Vec<f64>,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VolumePrediction {
    pub organs: Vec<OrganMap>,
    pub warnings: Vec<String>,
}

/// Refines every listed organ slice by slice: the window is centred on the
/// organ's coarse-mask centroid on that slice, the network's map is
/// thresholded at 0.5 and written back into volume coordinates.
pub fn predict_volume(
    net: &Network,
    volume: &Volume,
    coarse: &CoarseMask,
    organs: &[u8],
    patch_size: usize,
) -> Result<VolumePrediction> {
    let [h, w, d] = volume.dims;
    let n = volume.len();
    let mut out = VolumePrediction::default();
    for &organ in organs {
        let mut prob = vec![0.0; n];
        let mut mask = vec![false; n];
        let mut found = false;
        for z in 0..d {
            let (mut sx, mut sy, mut count) = (0usize, 0usize, 0usize);
            for y in 0..w {
                for x in 0..h {
                    if coarse.mask[volume.index(x, y, z)] == organ {
                        sx += x;
                        sy += y;
                        count += 1;
                    }
                }
            }
            if count == 0 {
                continue;
            }
            found = true;
            let cx = (sx as f64 / count as f64).round() as usize;
            let cy = (sy as f64 / count as f64).round() as usize;
            let patch = extract_patch(volume, coarse, 0, organ, patch_size, (cx, cy), z)?;
            let probs = net.segment(&to_model_input(&AugView::identity(&patch)), patch_size)?;
            let x0 = window_origin(cx, patch_size, h);
            let y0 = window_origin(cy, patch_size, w);
            for r in 0..patch_size {
                for c in 0..patch_size {
                    let i = volume.index(x0 + c, y0 + r, z);
                    let p = probs[r * patch_size + c];
                    prob[i] = p;
                    mask[i] = p > 0.5;
                }
            }
        }
        if found {
            out.organs.push(OrganMap {
                class: organ,
                prob,
                mask,
            });
        } else {
            let msg = format!("organ {organ} absent from coarse mask");
            warn!("{msg}");
            out.warnings.push(msg);
        }
    }
    Ok(out)
}

/// Combines binary organ maps into one label map. A pixel claimed by one
/// organ takes its class; contested pixels go to the highest probability,
/// then to the lowest class id; unclaimed pixels stay background.
pub fn fuse_majority(maps: &[OrganMap]) -> Result<Vec<u8>> {
    let n = maps.first().map_or(0, |m| m.mask.len());
    if maps.iter().any(|m| m.mask.len() != n || m.prob.len() != n) {
        return Err(Error::Shape("organ maps differ in size".into()));
    }
    let mut order: Vec<&OrganMap> = maps.iter().collect();
    order.sort_by_key(|m| m.class);
    let mut labels = vec![0u8; n];
    for (i, label) in labels.iter_mut().enumerate() {
        let mut best: Option<(f64, u8)> = None;
        for m in &order {
            if !m.mask[i] {
                continue;
            }
            match best {
                Some((p, _)) if m.prob[i] <= p => {}
                _ => best = Some((m.prob[i], m.class)),
            }
        }
        if let Some((_, class)) = best {
            *label = class;
        }
    }
    Ok(labels)
}

/// `2|P & G| / (|P| + |G|)` for one class; 1.0 when both are empty.
pub fn dice_score(pred: &[u8], gt: &[u8], class: u8) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "prediction has {} voxels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (a, b) = (p == class, g == class);
        np += a as usize;
        ng += b as usize;
        inter += (a && b) as usize;
    }
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ng) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeScore {
    pub name: String,
    pub phase: Phase,
    pub dice: BTreeMap<u8, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub volumes: Vec<VolumeScore>,
    pub per_organ: BTreeMap<u8, f64>,
    pub per_phase: BTreeMap<Phase, f64>,
    pub mean_dice: f64,
    pub warnings: Vec<String>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Predicts and fuses every sample, scoring each organ against the oracle labels.
pub fn evaluate(net: &Network, samples: &[Sample], organs: &[u8], patch_size: usize) -> Result<Evaluation> {
    let mut volumes = Vec::with_capacity(samples.len());
    let mut warnings = Vec::new();
    for s in samples {
        let pred = predict_volume(net, &s.volume, &s.coarse, organs, patch_size)?;
        warnings.extend(pred.warnings.iter().map(|w| format!("{}: {w}", s.name)));
        let fused = if pred.organs.is_empty() {
            vec![0u8; s.volume.len()]
        } else {
            fuse_majority(&pred.organs)?
        };
        let mut dice = BTreeMap::new();
        for &organ in organs {
            dice.insert(organ, dice_score(&fused, &s.volume.labels, organ)?);
        }
        volumes.push(VolumeScore {
            name: s.name.clone(),
            phase: s.volume.phase,
            dice,
        });
    }
    let per_organ = organs
        .iter()
        .map(|&o| (o, mean(volumes.iter().map(|v| v.dice[&o]))))
        .collect();
    let phases: BTreeSet<Phase> = volumes.iter().map(|v| v.phase).collect();
    let per_phase = phases
        .into_iter()
        .map(|p| {
            let m = mean(
                volumes
                    .iter()
                    .filter(|v| v.phase == p)
                    .flat_map(|v| v.dice.values().copied()),
            );
            (p, m)
        })
        .collect();
    let mean_dice = mean(volumes.iter().flat_map(|v| v.dice.values().copied()));
    Ok(Evaluation {
        volumes,
        per_organ,
        per_phase,
        mean_dice,
        warnings,
    })
}

/// Pretraining regime of one end-to-end run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Scratch,
    Pretrained(LossMode),
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub pretrain: Option<PretrainOutput>,
    pub finetune: FinetuneOutput,
    pub evaluation: Evaluation,
}

/// Pretrain (unless scratch), fine-tune and evaluate on the test split.
/// Evaluation always covers every test phase, whatever `cfg.phases` says.
pub fn run_pipeline(
    dataset: &Dataset,
    cfg: &TrainConfig,
    temperature: f64,
    init: Init,
    seed: u64,
) -> Result<RunResult> {
    let pretrain_out = match init {
        Init::Scratch => None,
        Init::Pretrained(mode) => Some(pretrain(dataset, cfg, &LossConfig::new(temperature, mode), seed)?),
    };
    let ft = finetune(dataset, pretrain_out.as_ref().map(|p| &p.network), cfg, seed)?;
    let evaluation = evaluate(&ft.network, &dataset.test, &dataset.organs(), cfg.patch_size)?;
    Ok(RunResult {
        pretrain: pretrain_out,
        finetune: ft,
        evaluation,
    })
}

/// Held-out patches for embedding analysis, drawn with a seed-derived stream.
pub fn embedding_patches(dataset: &Dataset, per_organ: usize, patch_size: usize, seed: u64) -> Result<Vec<Patch>> {
    let organs = dataset.organs();
    let sampler = PatchSampler::new(&dataset.test, &organs, patch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ EMBED_SALT);
    let mut out = Vec::new();
    for si in 0..dataset.test.len() {
        for &organ in &organs {
            if !sampler.candidates.contains_key(&(si, organ)) {
                continue;
            }
            for _ in 0..per_organ {
                out.push(sampler.sample_in(si, organ, &mut rng)?);
            }
        }
    }
    Ok(out)
}

/// Second dataset seed used for the held-out split when callers want one.
pub fn test_seed(seed: u64) -> u64 {
    seed ^ TEST_SALT
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::phantom::OrganSpec;

    pub(crate) fn tiny_spec() -> DatasetSpec {
        let organ = |id: u8, cx: f64, cy: f64, nc: f64, ce: f64| OrganSpec {
            class_id: id,
            name: String::new(),
            center: [cx, cy, 0.5],
            semi_axes: [0.17, 0.17, 0.3],
            intensity_by_phase: [(Phase::NC, nc), (Phase::CE, ce)].into_iter().collect(),
            texture_sd: 8.0,
        };
        DatasetSpec {
            dims: [32, 32, 16],
            spacing_mm: [1.0, 1.0, 2.0],
            phases: vec![Phase::NC, Phase::CE],
            organs: vec![
                organ(1, 0.28, 0.28, -40.0, 120.0),
                organ(2, 0.72, 0.28, 0.0, 160.0),
                organ(3, 0.28, 0.72, -120.0, -120.0),
                organ(4, 0.72, 0.72, 220.0, 220.0),
            ],
            volumes_per_phase: 1,
            test_volumes_per_phase: 1,
            corruption_rate: 0.1,
            slice_score_range: [-5.0, 6.0],
        }
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            pretrain_epochs: 1,
            finetune_epochs: 1,
            steps_per_epoch: 3,
            patches_per_organ: 2,
            patch_size: 16,
            model: ModelConfig {
                in_channels: 2,
                widths: vec![4, 8],
                projection_dim: 8,
            },
            ..TrainConfig::default()
        }
    }

    fn map(class: u8, mask: &[bool], prob: &[f64]) -> OrganMap {
        OrganMap {
            class,
            prob: prob.to_vec(),
            mask: mask.to_vec(),
        }
    }

    #[test]
    fn fusion_rules() {
        let a = map(2, &[true, false, true, true], &[0.9, 0.1, 0.7, 0.8]);
        let b = map(5, &[false, true, true, true], &[0.2, 0.6, 0.9, 0.8]);
        assert_eq!(fuse_majority(&[a.clone(), b.clone()]).unwrap(), vec![2, 5, 5, 2]);
        assert_eq!(fuse_majority(&[b, a]).unwrap(), vec![2, 5, 5, 2]);
        let none = map(3, &[false; 4], &[0.0; 4]);
        assert_eq!(fuse_majority(&[none]).unwrap(), vec![0; 4]);
    }

    #[test]
    fn dice_score_cases() {
        assert_eq!(dice_score(&[1, 1, 0], &[1, 1, 0], 1).unwrap(), 1.0);
        assert_eq!(dice_score(&[1, 0, 0], &[0, 1, 0], 1).unwrap(), 0.0);
        assert_eq!(dice_score(&[0, 0], &[0, 0], 3).unwrap(), 1.0);
        assert!((dice_score(&[1, 1, 0, 0], &[1, 0, 1, 0], 1).unwrap() - 0.5).abs() < 1e-15);
        assert!(dice_score(&[1], &[1, 0], 1).is_err());
    }

    #[test]
    fn empty_coarse_mask_yields_warnings_only() {
        let ds = Dataset::build(&tiny_spec(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = tiny_cfg();
        let net = Network::pretraining(cfg.model.clone(), &mut rng)
            .unwrap()
            .into_segmentation(&mut rng);
        let s = &ds.test[0];
        let empty = CoarseMask {
            dims: s.volume.dims,
            mask: vec![0; s.volume.len()],
            source: MaskSource::Oracle,
        };
        let pred = predict_volume(&net, &s.volume, &empty, &[1, 2], 16).unwrap();
        assert!(pred.organs.is_empty());
        assert_eq!(pred.warnings.len(), 2);
    }

    #[test]
    fn predictions_stay_inside_windows() {
        let ds = Dataset::build(&tiny_spec(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Network::pretraining(tiny_cfg().model, &mut rng)
            .unwrap()
            .into_segmentation(&mut rng);
        let s = &ds.test[0];
        let pred = predict_volume(&net, &s.volume, &s.coarse, &[1], 16).unwrap();
        let organ = &pred.organs[0];
        let [h, w, d] = s.volume.dims;
        for z in 0..d {
            let mut count = 0;
            let (mut sx, mut sy) = (0, 0);
            for y in 0..w {
                for x in 0..h {
                    if s.coarse.mask[s.volume.index(x, y, z)] == 1 {
                        sx += x;
                        sy += y;
                        count += 1;
                    }
                }
            }
            for y in 0..w {
                for x in 0..h {
                    let i = s.volume.index(x, y, z);
                    let inside = count > 0 && {
                        let cx = (sx as f64 / count as f64).round() as usize;
                        let cy = (sy as f64 / count as f64).round() as usize;
                        let (x0, y0) = (window_origin(cx, 16, h), window_origin(cy, 16, w));
                        (x0..x0 + 16).contains(&x) && (y0..y0 + 16).contains(&y)
                    };
                    if !inside {
                        assert!(!organ.mask[i]);
                        assert_eq!(organ.prob[i], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let ds = Dataset::build(&tiny_spec(), 3).unwrap();
        assert_eq!(ds.train.len(), 2);
        assert_eq!(ds.test.len(), 2);
        assert!(ds.train.iter().all(|s| s.volume.normalized()));
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path(), 3).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = Dataset::build(&tiny_spec(), 4).unwrap();
        let cfg = tiny_cfg();
        let loss = LossConfig::default();
        let a = pretrain(&ds, &cfg, &loss, 7).unwrap();
        let b = pretrain(&ds, &cfg, &loss, 7).unwrap();
        assert_eq!(a.loss_curve, b.loss_curve);
        assert_eq!(a.network, b.network);
        let fa = finetune(&ds, Some(&a.network), &cfg, 7).unwrap();
        let fb = finetune(&ds, Some(&b.network), &cfg, 7).unwrap();
        assert_eq!(fa.network, fb.network);
        let scratch = finetune(&ds, None, &cfg, 7).unwrap();
        assert!(scratch.network.seg_head.is_some());
        assert!(scratch.network.projection.is_none());
        assert_eq!(scratch.loss_curve.len(), 3);
    }

    #[test]
    fn batches_cover_every_group_each_pass() {
        let groups: Vec<ViewLabel> = [(1, Phase::NC), (1, Phase::CE), (2, Phase::NC), (2, Phase::CE)]
            .iter()
            .map(|&(organ, phase)| ViewLabel { organ, phase })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cycle = GroupCycle::new(groups.clone());
        for _ in 0..5 {
            let mut picks = batch_groups(&mut cycle, 4, LossMode::Dcc, &mut rng);
            picks.sort();
            assert_eq!(picks, groups);
        }
        let mut cycle = GroupCycle::new(groups.clone());
        let picks = batch_groups(&mut cycle, 4, LossMode::HardLabel, &mut rng);
        assert_eq!(picks[0], picks[1]);
        assert_eq!(picks[2], picks[3]);
        assert_ne!(picks[0], picks[2]);
    }

    #[test]
    fn phase_filter_only_changes_data() {
        let ds = Dataset::build(&tiny_spec(), 5).unwrap();
        let ce = ds.filter_phases(&[Phase::CE]);
        assert!(ce.train.iter().chain(&ce.test).all(|s| s.volume.phase == Phase::CE));
        assert_eq!(ds.filter_phases(&[]), ds);
    }
}
