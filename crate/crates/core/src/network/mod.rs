//! The cascaded segmentation model: a coarse U-Net over the full trace, a
//! classifier head on its bottleneck, a probabilistic window proposal, and
//! a refined U-Net over the proposed window whose encoder layers ingest
//! cropped coarse-decoder features.

pub mod checkpoint;
pub mod proposal;

use std::collections::BTreeMap;

use ndarray::{Array3, ArrayD};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::params::ParamStore;
use crate::autodiff::{Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::signal::{AModeFrame, Area};
use proposal::{propose_region, ProposalConfig, ProposalMode, RegionProposal};

/// Activation slope used throughout the network.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Geometry of one U-Net.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UNetConfig {
    /// Encoder/decoder channel widths, one per layer; the depth is fixed at
    /// five layers of dual convolutions.
    pub channels: Vec<usize>,
    pub kernel_size: usize,
    /// Network input length; a multiple of `2^(depth-1)`.
    pub input_len: usize,
}

pub const UNET_DEPTH: usize = 5;

impl UNetConfig {
    pub fn new(channels: Vec<usize>, kernel_size: usize, input_len: usize) -> Result<Self> {
        let cfg = UNetConfig {
            channels,
            kernel_size,
            input_len,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn depth(&self) -> usize {
        UNET_DEPTH
    }

    /// Downsampling factor between the input and the bottleneck.
    pub fn scale(&self) -> usize {
        1 << (UNET_DEPTH - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != UNET_DEPTH {
            return Err(Error::Config(format!(
                "expected {UNET_DEPTH} channel widths, got {}",
                self.channels.len()
            )));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(Error::Config(format!(
                "kernel size {} must be odd",
                self.kernel_size
            )));
        }
        if self.input_len == 0 || self.input_len % self.scale() != 0 {
            return Err(Error::Config(format!(
                "input length {} must be a positive multiple of {}",
                self.input_len,
                self.scale()
            )));
        }
        Ok(())
    }
}

/// Full model configuration, serialized alongside checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub area: Area,
    /// True frame length; inputs are zero-padded up to `unet.input_len`.
    pub signal_len: usize,
    pub unet: UNetConfig,
    pub proposal: ProposalConfig,
    /// Hidden widths of the two intermediate classifier layers.
    pub classifier_hidden: (usize, usize),
}

impl ModelConfig {
    /// Default architecture for an area and frame length.
    pub fn for_area(area: Area, signal_len: usize) -> Result<Self> {
        let input_len = signal_len.div_ceil(16) * 16;
        let cfg = ModelConfig {
            area,
            signal_len,
            unet: UNetConfig::new(vec![4, 8, 16, 32, 64], 5, input_len)?,
            proposal: ProposalConfig::new(default_window(signal_len)),
            classifier_hidden: (256, 64),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn classes(&self) -> usize {
        self.area.region_count()
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.proposal.validate()?;
        if self.signal_len == 0 || self.signal_len > self.unet.input_len {
            return Err(Error::Config(format!(
                "signal length {} exceeds network input length {}",
                self.signal_len, self.unet.input_len
            )));
        }
        let w = self.proposal.window_len;
        if w % self.unet.scale() != 0 {
            return Err(Error::Config(format!(
                "proposal window {w} must be a multiple of {}",
                self.unet.scale()
            )));
        }
        if w > self.signal_len {
            return Err(Error::Config(format!(
                "proposal window {w} exceeds signal length {}",
                self.signal_len
            )));
        }
        if self.classifier_hidden.0 == 0 || self.classifier_hidden.1 == 0 {
            return Err(Error::Config("classifier hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Refined window width for a frame length: one thirteenth of the signal,
/// rounded to the nearest multiple of the U-Net scale.
pub fn default_window(signal_len: usize) -> usize {
    let scale = 1 << (UNET_DEPTH - 1);
    let ideal = signal_len as f64 / 13.0 / scale as f64;
    let mut units = ideal.round_ties_even() as usize;
    if units == 0 {
        units = 1;
    }
    (units * scale).min(signal_len / scale * scale)
}

/// Parameters plus configuration of the whole cascade.
#[derive(Debug, Clone)]
pub struct CascadedModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Expected parameter names and shapes for a configuration, in creation
/// order. Shared by initialization and checkpoint validation.
fn expected_params(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let ch = &cfg.unet.channels;
    let k = cfg.unet.kernel_size;
    let mut out = Vec::new();
    for net in ["coarse", "refined"] {
        for l in 0..UNET_DEPTH {
            let prev = if l == 0 { 1 } else { ch[l - 1] };
            let in_ch = if net == "refined" { prev + ch[l] } else { prev };
            out.push((format!("{net}.enc{l}.conv0.w"), vec![ch[l], in_ch, k]));
            out.push((format!("{net}.enc{l}.conv0.b"), vec![ch[l]]));
            out.push((format!("{net}.enc{l}.conv1.w"), vec![ch[l], ch[l], k]));
            out.push((format!("{net}.enc{l}.conv1.b"), vec![ch[l]]));
        }
        for l in 0..UNET_DEPTH - 1 {
            out.push((format!("{net}.att{l}.enc.w"), vec![ch[l], ch[l], 1]));
            out.push((format!("{net}.att{l}.enc.b"), vec![ch[l]]));
            out.push((format!("{net}.att{l}.up.w"), vec![ch[l], ch[l + 1], 1]));
            out.push((format!("{net}.att{l}.up.b"), vec![ch[l]]));
            out.push((
                format!("{net}.dec{l}.conv0.w"),
                vec![ch[l], ch[l] + ch[l + 1], k],
            ));
            out.push((format!("{net}.dec{l}.conv0.b"), vec![ch[l]]));
            out.push((format!("{net}.dec{l}.conv1.w"), vec![ch[l], ch[l], k]));
            out.push((format!("{net}.dec{l}.conv1.b"), vec![ch[l]]));
        }
        out.push((format!("{net}.head.w"), vec![2, ch[0], 1]));
        out.push((format!("{net}.head.b"), vec![2]));
    }
    let bottleneck_feats = ch[UNET_DEPTH - 1] * (cfg.unet.input_len / cfg.unet.scale());
    let (h0, h1) = cfg.classifier_hidden;
    out.push(("cls.fc0.w".into(), vec![h0, bottleneck_feats]));
    out.push(("cls.fc0.b".into(), vec![h0]));
    out.push(("cls.fc1.w".into(), vec![h1, h0]));
    out.push(("cls.fc1.b".into(), vec![h1]));
    out.push(("cls.fc2.w".into(), vec![cfg.classes(), h1]));
    out.push(("cls.fc2.b".into(), vec![cfg.classes()]));
    out
}


impl CascadedModel {
    /// Fresh model with seeded He-uniform weights and zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, "init", 0);
        let mut params = ParamStore::new();
        for (name, shape) in expected_params(&config) {
            let arr = if name.ends_with(".b") {
                ArrayD::zeros(ndarray::IxDyn(&shape))
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let limit = (6.0 / fan_in as f64).sqrt();
                ArrayD::from_shape_fn(ndarray::IxDyn(&shape), |_| rng.gen_range(-limit..limit))
            };
            params.insert(&name, arr);
        }
        Ok(CascadedModel { config, params })
    }

    /// Check that the store holds exactly the parameters the configuration
    /// prescribes.
    pub fn validate_params(&self) -> Result<()> {
        let expected = expected_params(&self.config);
        if expected.len() != self.params.len() {
            return Err(Error::Config(format!(
                "parameter count {} != expected {}",
                self.params.len(),
                expected.len()
            )));
        }
        for (name, shape) in &expected {
            let p = self.params.get(name)?;
            if p.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter '{name}': shape {:?} != expected {:?}",
                    p.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }

    /// Pack a batch of frames into the padded network input `[B, 1, N]`.
    pub fn frames_to_input(&self, frames: &[&AModeFrame]) -> Result<Array3<f64>> {
        let n = self.config.unet.input_len;
        let sl = self.config.signal_len;
        let mut x = Array3::<f64>::zeros((frames.len(), 1, n));
        for (i, frame) in frames.iter().enumerate() {
            if frame.normalized.len() != sl {
                return Err(Error::Shape(format!(
                    "frame {}: length {} != signal length {sl}",
                    frame.frame_id,
                    frame.normalized.len()
                )));
            }
            if frame.region.area() != self.config.area {
                return Err(Error::Config(format!(
                    "frame {} is from {}, model is for {}",
                    frame.frame_id,
                    frame.region.area().name(),
                    self.config.area.name()
                )));
            }
            x.slice_mut(ndarray::s![i, 0, ..sl])
                .assign(&ndarray::ArrayView1::from(&frame.normalized[..]));
        }
        Ok(x)
    }

    /// Coarse U-Net pass over the full (padded) trace.
    pub fn coarse_forward(
        &self,
        g: &mut Graph,
        tp: &mut TapeParams<'_>,
        x: NodeId,
    ) -> Result<UNetOutputs> {
        unet_forward(
            g,
            tp,
            &self.config.unet,
            "coarse",
            x,
            None,
            self.config.signal_len,
        )
    }

    /// Region probabilities from the coarse bottleneck features.
    pub fn classify(
        &self,
        g: &mut Graph,
        tp: &mut TapeParams<'_>,
        bottleneck: NodeId,
    ) -> Result<NodeId> {
        let shape = g.value(bottleneck).shape().to_vec();
        let (b, feats) = (shape[0], shape[1] * shape[2]);
        let flat = g.reshape(bottleneck, &[b, feats])?;
        let w0 = tp.node(g, "cls.fc0.w")?;
        let b0 = tp.node(g, "cls.fc0.b")?;
        let h = g.dense(flat, w0, b0)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let w1 = tp.node(g, "cls.fc1.w")?;
        let b1 = tp.node(g, "cls.fc1.b")?;
        let h = g.dense(h, w1, b1)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let w2 = tp.node(g, "cls.fc2.w")?;
        let b2 = tp.node(g, "cls.fc2.b")?;
        let logits = g.dense(h, w2, b2)?;
        g.softmax(logits, 1)
    }

    /// Crop one coarse decoder layer to the proposed windows, downsampled to
    /// that layer's resolution.
    pub fn region_crop(
        &self,
        g: &mut Graph,
        dec_feats: &[NodeId; UNET_DEPTH],
        proposals: &[RegionProposal],
        layer: usize,
    ) -> Result<NodeId> {
        if layer >= UNET_DEPTH {
            return Err(Error::Config(format!(
                "region crop layer {layer} outside 0..{UNET_DEPTH}"
            )));
        }
        let w = self.config.proposal.window_len;
        if w % self.config.unet.scale() != 0 {
            return Err(Error::Config(format!(
                "proposal window {w} is not divisible by {}",
                self.config.unet.scale()
            )));
        }
        let starts: Vec<usize> = proposals.iter().map(|p| p.start >> layer).collect();
        g.windows(dec_feats[layer], &starts, w >> layer)
    }

    /// Refined U-Net pass over the proposed windows.
    pub fn refined_forward(
        &self,
        g: &mut Graph,
        tp: &mut TapeParams<'_>,
        x_windows: NodeId,
        crops: &[NodeId; UNET_DEPTH],
    ) -> Result<UNetOutputs> {
        let w = self.config.proposal.window_len;
        let refined_cfg = UNetConfig {
            channels: self.config.unet.channels.clone(),
            kernel_size: self.config.unet.kernel_size,
            input_len: w,
        };
        unet_forward(g, tp, &refined_cfg, "refined", x_windows, Some(crops), w)
    }

    /// Full forward pass for a batch of frames: coarse segmentation,
    /// classification, window proposals, and refined segmentation.
    pub fn forward_batch(
        &self,
        frames: &[&AModeFrame],
        mode: ProposalMode,
        rng: &mut ChaCha8Rng,
        training: bool,
    ) -> Result<BatchPass<'_>> {
        if frames.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let mut graph = if training {
            Graph::new()
        } else {
            Graph::inference()
        };
        let mut tp = TapeParams::new(&self.params);
        let x = graph.input(self.frames_to_input(frames)?.into_dyn());
        let coarse = self.coarse_forward(&mut graph, &mut tp, x)?;
        let class_probs = self.classify(&mut graph, &mut tp, coarse.bottleneck)?;

        let fg = graph.value(coarse.fg_prob);
        let mut proposals = Vec::with_capacity(frames.len());
        for row in fg
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("fg is [B, L]")
            .outer_iter()
        {
            proposals.push(propose_region(
                row.as_slice().expect("row is contiguous"),
                &self.config.proposal,
                mode,
                rng,
            )?);
        }

        let mut crops = [0; UNET_DEPTH];
        for (layer, crop) in crops.iter_mut().enumerate() {
            *crop = self.region_crop(&mut graph, &coarse.dec_feats, &proposals, layer)?;
        }
        let starts: Vec<usize> = proposals.iter().map(|p| p.start).collect();
        let x_windows = graph.windows(x, &starts, self.config.proposal.window_len)?;
        let refined = self.refined_forward(&mut graph, &mut tp, x_windows, &crops)?;

        Ok(BatchPass {
            graph,
            tape_params: tp,
            input: x,
            coarse,
            class_probs,
            proposals,
            refined,
        })
    }
}

/// Everything one forward pass produces, with the live tape.
pub struct BatchPass<'a> {
    pub graph: Graph,
    pub tape_params: TapeParams<'a>,
    pub input: NodeId,
    pub coarse: UNetOutputs,
    pub class_probs: NodeId,
    pub proposals: Vec<RegionProposal>,
    pub refined: UNetOutputs,
}

/// Heads of one U-Net pass.
pub struct UNetOutputs {
    /// Per-position foreground probability, `[B, out_len]`.
    pub fg_prob: NodeId,
    /// Bottleneck features, `[B, C4, input_len/16]`.
    pub bottleneck: NodeId,
    /// Features available to region cropping: decoder outputs at layers
    /// 0..=3 plus the bottleneck at layer 4.
    pub dec_feats: [NodeId; UNET_DEPTH],
}

/// Binds model parameters into a graph on demand and maps gradients back to
/// parameter names.
pub struct TapeParams<'a> {
    store: &'a ParamStore,
    ids: BTreeMap<String, NodeId>,
}

impl<'a> TapeParams<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        TapeParams {
            store,
            ids: BTreeMap::new(),
        }
    }

    /// Node for a named parameter, materializing it on first use.
    pub fn node(&mut self, g: &mut Graph, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.ids.get(name) {
            return Ok(id);
        }
        let value = self.store.get(name)?.clone();
        let id = g.param(value);
        self.ids.insert(name.to_string(), id);
        Ok(id)
    }

    /// Collect gradients for every bound parameter.
    pub fn named_gradients(&self, grads: &Gradients) -> BTreeMap<String, ArrayD<f64>> {
        let mut out = BTreeMap::new();
        for (name, &id) in &self.ids {
            if let Some(g) = grads.get(id) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

fn conv_block(
    g: &mut Graph,
    tp: &mut TapeParams<'_>,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let w0 = tp.node(g, &format!("{prefix}.conv0.w"))?;
    let b0 = tp.node(g, &format!("{prefix}.conv0.b"))?;
    let h = g.conv1d(x, w0, b0)?;
    let h = g.leaky_relu(h, LEAKY_SLOPE);
    let w1 = tp.node(g, &format!("{prefix}.conv1.w"))?;
    let b1 = tp.node(g, &format!("{prefix}.conv1.b"))?;
    let h = g.conv1d(h, w1, b1)?;
    Ok(g.leaky_relu(h, LEAKY_SLOPE))
}

/// Gate the skip connection: `enc * sigmoid(conv1(enc) + conv1(up))`.
fn attention_gate(
    g: &mut Graph,
    tp: &mut TapeParams<'_>,
    prefix: &str,
    enc: NodeId,
    up: NodeId,
) -> Result<NodeId> {
    let we = tp.node(g, &format!("{prefix}.enc.w"))?;
    let be = tp.node(g, &format!("{prefix}.enc.b"))?;
    let a_enc = g.conv1d(enc, we, be)?;
    let wu = tp.node(g, &format!("{prefix}.up.w"))?;
    let bu = tp.node(g, &format!("{prefix}.up.b"))?;
    let a_up = g.conv1d(up, wu, bu)?;
    let sum = g.add(a_enc, a_up)?;
    let gate = g.sigmoid(sum);
    g.mul(enc, gate)
}

/// Shared U-Net body. `crops`, when present, are concatenated onto each
/// encoder layer's input. The foreground probability is cropped to
/// `out_len` positions.
fn unet_forward(
    g: &mut Graph,
    tp: &mut TapeParams<'_>,
    cfg: &UNetConfig,
    prefix: &str,
    x: NodeId,
    crops: Option<&[NodeId; UNET_DEPTH]>,
    out_len: usize,
) -> Result<UNetOutputs> {
    let in_len = g.value(x).shape()[2];
    if in_len != cfg.input_len {
        return Err(Error::Shape(format!(
            "{prefix}: input length {in_len} != configured {}",
            cfg.input_len
        )));
    }

    let mut enc_feats = Vec::with_capacity(UNET_DEPTH);
    let mut h = x;
    for l in 0..UNET_DEPTH {
        if l > 0 {
            h = g.maxpool1d(h, 2)?;
        }
        if let Some(crops) = crops {
            h = g.concat(&[h, crops[l]], 1)?;
        }
        h = conv_block(g, tp, &format!("{prefix}.enc{l}"), h)?;
        enc_feats.push(h);
    }

    let bottleneck = enc_feats[UNET_DEPTH - 1];
    let mut dec_feats = [0; UNET_DEPTH];
    dec_feats[UNET_DEPTH - 1] = bottleneck;
    let mut d = bottleneck;
    for l in (0..UNET_DEPTH - 1).rev() {
        let up = g.upsample1d(d, 2)?;
        let gated = attention_gate(g, tp, &format!("{prefix}.att{l}"), enc_feats[l], up)?;
        let cat = g.concat(&[gated, up], 1)?;
        d = conv_block(g, tp, &format!("{prefix}.dec{l}"), cat)?;
        dec_feats[l] = d;
    }

    let hw = tp.node(g, &format!("{prefix}.head.w"))?;
    let hb = tp.node(g, &format!("{prefix}.head.b"))?;
    let logits = g.conv1d(dec_feats[0], hw, hb)?;
    let logits = g.crop(logits, 2, 0, out_len)?;
    let probs = g.softmax(logits, 1)?;
    let fg3 = g.crop(probs, 1, 1, 1)?;
    let batch = g.value(fg3).shape()[0];
    let fg_prob = g.reshape(fg3, &[batch, out_len])?;

    Ok(UNetOutputs {
        fg_prob,
        bottleneck,
        dec_feats,
    })
}

#[cfg(test)]
mod tests;
