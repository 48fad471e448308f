use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{
    avg_pool2, avg_pool2_backward, concat, conv3x3, conv3x3_backward, relu_backward, relu_inplace,
    sigmoid, split, upsample2, upsample2_backward, ConvLayout, FeatureMap, LinearLayout,
};
use crate::error::{Error, Result};

fn default_in_channels() -> usize {
    2
}

fn default_widths() -> Vec<usize> {
    vec![8, 16, 32, 64]
}

fn default_projection_dim() -> usize {
    32
}

/// Architecture shared by encoder, projection and segmentation head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// Channel width of each encoder stage; each stage halves the resolution.
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_projection_dim")]
    pub projection_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: default_in_channels(),
            widths: default_widths(),
            projection_dim: default_projection_dim(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!("degenerate model config {self:?}")));
        }
        if self.projection_dim == 0 {
            return Err(Error::Config("projection_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    /// Input side must survive one halving per stage.
    pub fn check_input_size(&self, size: usize) -> Result<()> {
        let factor = 1usize << self.widths.len();
        if size == 0 || size % factor != 0 {
            return Err(Error::Shape(format!(
                "patch size {size} not divisible by {factor}"
            )));
        }
        Ok(())
    }
}

/// Stack of (3x3 conv, ReLU, 2x2 average pool) stages followed by global
/// average pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: ModelConfig,
    layers: Vec<ConvLayout>,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EncoderTape {
    pub size: usize,
    pub stage_inputs: Vec<FeatureMap>,
    /// Rectified activations before pooling; also the decoder's skip inputs.
    pub stage_acts: Vec<FeatureMap>,
    /// Output of the last pooling stage.
    pub feature_map: FeatureMap,
    /// Global average of `feature_map`.
    pub feature: Vec<f64>,
}

impl Encoder {
    pub fn layout(config: &ModelConfig) -> (Vec<ConvLayout>, usize) {
        let mut offset = 0;
        let mut in_ch = config.in_channels;
        let mut layers = Vec::new();
        for &w in &config.widths {
            let l = ConvLayout {
                in_ch,
                out_ch: w,
                offset,
            };
            offset += l.len();
            layers.push(l);
            in_ch = w;
        }
        (layers, offset)
    }

    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (layers, len) = Self::layout(&config);
        let mut params = vec![0.0; len];
        for l in &layers {
            l.init(&mut params, rng);
        }
        Ok(Encoder {
            config,
            layers,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let (layers, len) = Self::layout(&config);
        if params.len() != len {
            return Err(Error::Checkpoint(format!(
                "encoder expects {len} parameters, got {}",
                params.len()
            )));
        }
        Ok(Encoder {
            config,
            layers,
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn forward(&self, input: &[f64], size: usize) -> Result<EncoderTape> {
        self.config.check_input_size(size)?;
        let expected = self.config.in_channels * size * size;
        if input.len() != expected {
            return Err(Error::Shape(format!(
                "encoder input has {} values, expected {expected}",
                input.len()
            )));
        }
        let mut x = FeatureMap::from_vec(self.config.in_channels, size, size, input.to_vec());
        let mut stage_inputs = Vec::with_capacity(self.layers.len());
        let mut stage_acts = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let mut a = conv3x3(&x, l, &self.params);
            relu_inplace(&mut a);
            let pooled = avg_pool2(&a);
            stage_inputs.push(x);
            stage_acts.push(a);
            x = pooled;
        }
        let hw = x.plane_len() as f64;
        let feature = (0..x.channels)
            .map(|c| x.plane(c).iter().sum::<f64>() / hw)
            .collect();
        Ok(EncoderTape {
            size,
            stage_inputs,
            stage_acts,
            feature_map: x,
            feature,
        })
    }

    /// Gradient of the pooled feature spread back over the final map.
    pub fn feature_to_map_grad(tape: &EncoderTape, grad_feature: &[f64]) -> FeatureMap {
        let fm = &tape.feature_map;
        let hw = fm.plane_len();
        let mut g = FeatureMap::zeros(fm.channels, fm.height, fm.width);
        for c in 0..fm.channels {
            g.data[c * hw..(c + 1) * hw].fill(grad_feature[c] / hw as f64);
        }
        g
    }

    /// Backpropagates a gradient on `feature_map` plus optional extra gradients
    /// on each stage's activation, accumulating into `grads`.
    pub fn backward(
        &self,
        tape: &EncoderTape,
        grad_feature_map: FeatureMap,
        grad_acts: Option<&[FeatureMap]>,
        grads: &mut [f64],
    ) {
        let mut g = grad_feature_map;
        for s in (0..self.layers.len()).rev() {
            let mut ga = avg_pool2_backward(&g);
            if let Some(extra) = grad_acts {
                for (a, b) in ga.data.iter_mut().zip(&extra[s].data) {
                    *a += b;
                }
            }
            relu_backward(&mut ga, &tape.stage_acts[s]);
            let want_input = s > 0;
            match conv3x3_backward(
                &tape.stage_inputs[s],
                &self.layers[s],
                &self.params,
                &ga,
                grads,
                want_input,
            ) {
                Some(gi) => g = gi,
                None => break,
            }
        }
    }
}

/// Two affine layers with a ReLU between, then L2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    hidden: LinearLayout,
    output: LinearLayout,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ProjectionTape {
    pub feature: Vec<f64>,
    pub hidden: Vec<f64>,
    pub unnormalized: Vec<f64>,
    pub norm: f64,
    pub z: Vec<f64>,
}

/// Added to the norm before dividing.
pub const NORM_EPS: f64 = 1e-12;

impl Projection {
    fn layout(config: &ModelConfig) -> (LinearLayout, LinearLayout) {
        let f = config.feature_dim();
        let hidden = LinearLayout {
            in_dim: f,
            out_dim: f,
            offset: 0,
        };
        let output = LinearLayout {
            in_dim: f,
            out_dim: config.projection_dim,
            offset: hidden.len(),
        };
        (hidden, output)
    }

    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let (hidden, output) = Self::layout(config);
        let mut params = vec![0.0; hidden.len() + output.len()];
        hidden.init(&mut params, rng);
        output.init(&mut params, rng);
        Projection {
            hidden,
            output,
            params,
        }
    }

    pub fn from_params(config: &ModelConfig, params: Vec<f64>) -> Result<Self> {
        let (hidden, output) = Self::layout(config);
        if params.len() != hidden.len() + output.len() {
            return Err(Error::Checkpoint(format!(
                "projection expects {} parameters, got {}",
                hidden.len() + output.len(),
                params.len()
            )));
        }
        Ok(Projection {
            hidden,
            output,
            params,
        })
    }

    pub fn forward(&self, feature: &[f64]) -> Result<ProjectionTape> {
        if feature.len() != self.hidden.in_dim {
            return Err(Error::Shape(format!(
                "projection input has {} values, expected {}",
                feature.len(),
                self.hidden.in_dim
            )));
        }
        let mut hidden = self.hidden.forward(&self.params, feature);
        for h in &mut hidden {
            *h = h.max(0.0);
        }
        let unnormalized = self.output.forward(&self.params, &hidden);
        let norm = unnormalized.iter().map(|u| u * u).sum::<f64>().sqrt();
        let z = unnormalized.iter().map(|u| u / (norm + NORM_EPS)).collect();
        Ok(ProjectionTape {
            feature: feature.to_vec(),
            hidden,
            unnormalized,
            norm,
            z,
        })
    }

    /// Accumulates parameter gradients; returns the gradient on the feature.
    pub fn backward(&self, tape: &ProjectionTape, grad_z: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let m = tape.norm + NORM_EPS;
        let dot: f64 = tape.unnormalized.iter().zip(grad_z).map(|(u, g)| u * g).sum();
        let radial = if tape.norm > 0.0 {
            dot / (tape.norm * m * m)
        } else {
            0.0
        };
        let grad_u: Vec<f64> = grad_z
            .iter()
            .zip(&tape.unnormalized)
            .map(|(g, u)| g / m - u * radial)
            .collect();
        let mut grad_h = self
            .output
            .backward(&self.params, &tape.hidden, &grad_u, grads);
        for (g, &h) in grad_h.iter_mut().zip(&tape.hidden) {
            if h <= 0.0 {
                *g = 0.0;
            }
        }
        self.hidden
            .backward(&self.params, &tape.feature, &grad_h, grads)
    }
}

/// Mirror decoder: per stage a 2x upsample, concatenation with the encoder
/// activation at that resolution, 3x3 conv and ReLU; the last stage emits one
/// sigmoid channel at input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SegHead {
    layers: Vec<ConvLayout>,
    /// Channels coming up from below, per stage (before concatenation).
    up_channels: Vec<usize>,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SegTape {
    pub stage_inputs: Vec<FeatureMap>,
    pub stage_outputs: Vec<FeatureMap>,
    /// Sigmoid map, `size * size`.
    pub prob: Vec<f64>,
}

impl SegHead {
    fn layout(config: &ModelConfig) -> (Vec<ConvLayout>, Vec<usize>, usize) {
        let widths = &config.widths;
        let stages = widths.len();
        let mut layers = Vec::with_capacity(stages);
        let mut up_channels = Vec::with_capacity(stages);
        let mut offset = 0;
        let mut below = config.feature_dim();
        for k in 0..stages {
            let skip = widths[stages - 1 - k];
            let out = if k + 1 == stages {
                1
            } else {
                widths[stages - 2 - k]
            };
            let l = ConvLayout {
                in_ch: below + skip,
                out_ch: out,
                offset,
            };
            offset += l.len();
            layers.push(l);
            up_channels.push(below);
            below = out;
        }
        (layers, up_channels, offset)
    }

    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let (layers, up_channels, len) = Self::layout(config);
        let mut params = vec![0.0; len];
        for l in &layers {
            l.init(&mut params, rng);
        }
        SegHead {
            layers,
            up_channels,
            params,
        }
    }

    pub fn from_params(config: &ModelConfig, params: Vec<f64>) -> Result<Self> {
        let (layers, up_channels, len) = Self::layout(config);
        if params.len() != len {
            return Err(Error::Checkpoint(format!(
                "segmentation head expects {len} parameters, got {}",
                params.len()
            )));
        }
        Ok(SegHead {
            layers,
            up_channels,
            params,
        })
    }

    pub fn forward(&self, enc: &EncoderTape) -> SegTape {
        let stages = self.layers.len();
        let mut x = enc.feature_map.clone();
        let mut stage_inputs = Vec::with_capacity(stages);
        let mut stage_outputs = Vec::with_capacity(stages);
        for (k, l) in self.layers.iter().enumerate() {
            let up = upsample2(&x);
            let input = concat(&up, &enc.stage_acts[stages - 1 - k]);
            let mut out = conv3x3(&input, l, &self.params);
            if k + 1 == stages {
                for v in &mut out.data {
                    *v = sigmoid(*v);
                }
            } else {
                relu_inplace(&mut out);
            }
            stage_inputs.push(input);
            stage_outputs.push(out.clone());
            x = out;
        }
        SegTape {
            stage_inputs,
            stage_outputs,
            prob: x.data,
        }
    }

    /// Returns the gradients on the encoder's final map and on each encoder
    /// stage activation (indexed like `EncoderTape::stage_acts`).
    pub fn backward(
        &self,
        enc: &EncoderTape,
        tape: &SegTape,
        grad_prob: &[f64],
        grads: &mut [f64],
    ) -> (FeatureMap, Vec<FeatureMap>) {
        let stages = self.layers.len();
        let mut skip_grads: Vec<FeatureMap> = enc
            .stage_acts
            .iter()
            .map(|a| FeatureMap::zeros(a.channels, a.height, a.width))
            .collect();
        let last = &tape.stage_outputs[stages - 1];
        let mut g = FeatureMap::from_vec(
            1,
            last.height,
            last.width,
            grad_prob
                .iter()
                .zip(&last.data)
                .map(|(g, p)| g * p * (1.0 - p))
                .collect(),
        );
        for k in (0..stages).rev() {
            if k + 1 != stages {
                relu_backward(&mut g, &tape.stage_outputs[k]);
            }
            let gi = conv3x3_backward(
                &tape.stage_inputs[k],
                &self.layers[k],
                &self.params,
                &g,
                grads,
                true,
            )
            .expect("input gradient requested");
            let (g_up, g_skip) = split(gi, self.up_channels[k]);
            skip_grads[stages - 1 - k] = g_skip;
            g = upsample2_backward(&g_up);
        }
        (g, skip_grads)
    }
}

/// Encoder, projection head and an optional segmentation head.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub encoder: Encoder,
    pub projection: Option<Projection>,
    pub seg_head: Option<SegHead>,
}

impl Network {
    /// Fresh encoder and projection head for contrastive pretraining.
    pub fn pretraining<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let encoder = Encoder::new(config, rng)?;
        let projection = Projection::new(&encoder.config, rng);
        Ok(Network {
            encoder,
            projection: Some(projection),
            seg_head: None,
        })
    }

    /// Drops the projection head and attaches a freshly initialized decoder.
    pub fn into_segmentation<R: Rng + ?Sized>(self, rng: &mut R) -> Self {
        let seg_head = SegHead::new(&self.encoder.config, rng);
        Network {
            encoder: self.encoder,
            projection: None,
            seg_head: Some(seg_head),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.encoder.config
    }

    pub fn embed(&self, input: &[f64], size: usize) -> Result<Vec<f64>> {
        let projection = self
            .projection
            .as_ref()
            .ok_or_else(|| Error::Config("network has no projection head".into()))?;
        let tape = self.encoder.forward(input, size)?;
        Ok(projection.forward(&tape.feature)?.z)
    }

    pub fn segment(&self, input: &[f64], size: usize) -> Result<Vec<f64>> {
        Ok(seg_forward(self, input, size)?.1.prob)
    }
}

/// Encoder then projection; the unit vector is `proj.z`.
pub fn project_forward(net: &Network, input: &[f64], size: usize) -> Result<(EncoderTape, ProjectionTape)> {
    let projection = net
        .projection
        .as_ref()
        .ok_or_else(|| Error::Config("network has no projection head".into()))?;
    let enc = net.encoder.forward(input, size)?;
    let proj = projection.forward(&enc.feature)?;
    Ok((enc, proj))
}

pub fn seg_forward(net: &Network, input: &[f64], size: usize) -> Result<(EncoderTape, SegTape)> {
    let head = net
        .seg_head
        .as_ref()
        .ok_or_else(|| Error::Config("network has no segmentation head".into()))?;
    let enc = net.encoder.forward(input, size)?;
    let seg = head.forward(&enc);
    Ok((enc, seg))
}

/// Gradient buffers matching a [`Network`]'s parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: Vec<f64>,
    pub projection: Vec<f64>,
    pub seg_head: Vec<f64>,
}

impl Gradients {
    pub fn zeros(net: &Network) -> Self {
        Gradients {
            encoder: vec![0.0; net.encoder.params.len()],
            projection: vec![0.0; net.projection.as_ref().map_or(0, |p| p.params.len())],
            seg_head: vec![0.0; net.seg_head.as_ref().map_or(0, |h| h.params.len())],
        }
    }
}

/// Backward through projection and encoder for a gradient on `z`.
pub fn project_backward(
    net: &Network,
    enc: &EncoderTape,
    proj: &ProjectionTape,
    grad_z: &[f64],
    grads: &mut Gradients,
) {
    let projection = net.projection.as_ref().expect("forward used the projection");
    let grad_feature = projection.backward(proj, grad_z, &mut grads.projection);
    let grad_map = Encoder::feature_to_map_grad(enc, &grad_feature);
    net.encoder.backward(enc, grad_map, None, &mut grads.encoder);
}

/// Backward through decoder and encoder for a gradient on the sigmoid map.
pub fn seg_backward(
    net: &Network,
    enc: &EncoderTape,
    seg: &SegTape,
    grad_prob: &[f64],
    grads: &mut Gradients,
) {
    let head = net.seg_head.as_ref().expect("forward used the head");
    let (grad_map, grad_skips) = head.backward(enc, seg, grad_prob, &mut grads.seg_head);
    net.encoder
        .backward(enc, grad_map, Some(&grad_skips), &mut grads.encoder);
}
