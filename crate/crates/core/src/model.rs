//! Model variants and their wiring.
//!
//! All variants share one encoder: `levels` double-conv blocks
//! (conv 3x3 -> group norm -> relu, twice) with 2x2 mean pooling between
//! levels and channel widths `C1 * 2^(i-1)`.
//!
//! - `unet`: classic encoder-decoder; skips carry the encoder feature and are
//!   fused by channel concatenation.
//! - `unet-add`: identical except skips are fused by point-wise sum, which is
//!   what shrinks the decoder.
//! - `mfp1`: every plain skip is replaced by one reuse branch per encoder
//!   level (rate 2): an encoding block on the source feature followed by a
//!   dilated convolution with stride equal to its dilation, halving the
//!   channels. The deepest branch alone feeds the decoder.
//! - `mfp2`: the full pyramid; every admissible branch (source level `s`,
//!   rate `2^k`, `k <= levels - s`) is built. Branches landing at the deepest
//!   scale are channel-concatenated into the decoder input; branches landing
//!   at an intermediate scale are channel-concatenated into that level's skip.
//!   Skips fuse with the decoder by point-wise sum everywhere.
//! - `mfp-bica`: `mfp2` plus a bidirectional cross-attention junction at
//!   every sum-fused skip.
//!
//! Decoding follows `X_D(t) = U(H(X_D(t+1))) + skip(t)`: encoding block, then
//! bilinear 2x upsampling with a 1x1 projection onto the skip width. The
//! deepest encoder feature is the decoder input for the u-net variants; the
//! mfp variants replace it with the branch concatenation (the deepest encoder
//! block still exists in every variant, so encoders are parameter-identical
//! across variants at equal depth/width; it simply receives no gradient in
//! the mfp topologies).

use crate::attention::{bica_fuse, BicaConfig, MaskActivation, SemanticDomainConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::ops::conv::{Conv2dParams, Padding};
use crate::ops::norm::{fitting_group_count, GroupNormParams};
use crate::params::{init_parameters, InitKind, ParamDef, ParamNodes, ParameterSet};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Unet,
    UnetAdd,
    Mfp1,
    Mfp2,
    MfpBica,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Unet => "unet",
            Variant::UnetAdd => "unet-add",
            Variant::Mfp1 => "mfp1",
            Variant::Mfp2 => "mfp2",
            Variant::MfpBica => "mfp-bica",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "unet" => Ok(Variant::Unet),
            "unet-add" => Ok(Variant::UnetAdd),
            "mfp1" => Ok(Variant::Mfp1),
            "mfp2" => Ok(Variant::Mfp2),
            "mfp-bica" => Ok(Variant::MfpBica),
            other => Err(Error::config(format!(
                "unknown variant {other:?} (expected unet, unet-add, mfp1, mfp2 or mfp-bica)"
            ))),
        }
    }

    fn uses_branches(&self) -> bool {
        matches!(self, Variant::Mfp1 | Variant::Mfp2 | Variant::MfpBica)
    }
}

/// Declarative architecture description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub variant: Variant,
    /// Number of encoder levels `n` (>= 2).
    pub levels: usize,
    /// Channels of the first level; level `i` has `base_channels * 2^(i-1)`.
    pub base_channels: usize,
    pub in_channels: usize,
    /// Class count including background.
    pub classes: usize,
    /// Square input extent. Only the BiCA variant depends on it (the channel
    /// mask weighting is sized by the block grid), but it is recorded for all.
    pub input_extent: usize,
    /// Reuse branches emit half their source's channels when set.
    pub halve_reuse_channels: bool,
}

impl ModelSpec {
    pub fn new(variant: Variant, levels: usize, base_channels: usize, classes: usize) -> ModelSpec {
        ModelSpec {
            variant,
            levels,
            base_channels,
            in_channels: 1,
            classes,
            input_extent: 64,
            halve_reuse_channels: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::config(format!("levels must be >= 2, got {}", self.levels)));
        }
        if self.levels > 16 {
            return Err(Error::config(format!("levels {} is unreasonably deep", self.levels)));
        }
        if self.base_channels < 2 || (self.halve_reuse_channels && self.base_channels % 2 != 0) {
            return Err(Error::config(format!(
                "base_channels must be an even value >= 2, got {}",
                self.base_channels
            )));
        }
        if self.in_channels == 0 || self.classes == 0 {
            return Err(Error::config("in_channels and classes must be >= 1".to_string()));
        }
        let div = 1usize << (self.levels - 1);
        if self.input_extent == 0 || self.input_extent % div != 0 {
            return Err(Error::config(format!(
                "input extent {} not divisible by 2^(levels-1) = {div}",
                self.input_extent
            )));
        }
        Ok(())
    }

    /// Channels of encoder level `i` (1-based).
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }
}

/// One reuse branch: an encoding block on the source feature (shared per
/// source level) followed by a dilated convolution with stride = dilation =
/// `2^k`, emitting half the source channels at `1/2^k` the source extent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Branch {
    pub source_level: usize,
    pub k: usize,
    pub rate: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub target_level: usize,
}

/// What feeds the skip fusion at one decoder level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SkipWiring {
    /// Encoder feature, fused by channel concatenation (unet).
    EncoderConcat { level: usize },
    /// Encoder feature, fused by point-wise sum (unet-add).
    EncoderSum { level: usize },
    /// Reuse branches landing at this level (channel-concatenated when more
    /// than one), fused by point-wise sum.
    Branches { indices: Vec<usize> },
    /// No skip; the decode step is the upsample path alone.
    Absent,
}

/// What the decoder starts from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Bottleneck {
    /// Deepest encoder feature (u-net variants).
    Encoder,
    /// Channel concatenation of the listed branches (mfp variants).
    Branches { indices: Vec<usize> },
}

/// Width bookkeeping of one decode step (level `target + 1` -> `target`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeStep {
    pub target_level: usize,
    /// Width of the incoming decoder state.
    pub in_width: usize,
    /// Width after the encoding block.
    pub mid_width: usize,
    /// Width after the 1x1 projection; equals the skip width where a skip
    /// exists.
    pub out_width: usize,
}

/// Fully resolved wiring of one [`ModelSpec`].
#[derive(Debug, Clone)]
pub struct Wiring {
    pub enc_channels: Vec<usize>,
    pub branches: Vec<Branch>,
    pub bottleneck: Bottleneck,
    pub bottleneck_width: usize,
    /// Indexed by level - 1, levels 1..n-1.
    pub skips: Vec<SkipWiring>,
    /// Ordered deepest-first: target levels n-1 down to 1.
    pub steps: Vec<DecodeStep>,
    pub head_in: usize,
    pub head_mid: usize,
    /// BiCA junction per level (level - 1 indexed), present only on the
    /// bica variant's sum-fused skips.
    pub bica: Vec<Option<BicaConfig>>,
}

/// A validated spec plus its wiring; all graph-building entry points live
/// here.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub wiring: Wiring,
}

/// Build a model and its deterministically initialized parameters.
pub fn build_model<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<(Model, ParameterSet<T>)> {
    let model = Model::new(spec.clone())?;
    let params = model.init_params::<T>(seed)?;
    Ok((model, params))
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Model> {
        spec.validate()?;
        let wiring = Self::wire(&spec)?;
        Ok(Model { spec, wiring })
    }

    fn wire(spec: &ModelSpec) -> Result<Wiring> {
        let n = spec.levels;
        let enc_channels: Vec<usize> = (1..=n).map(|i| spec.level_channels(i)).collect();

        // Enumerate branches per variant.
        let mut branches: Vec<Branch> = Vec::new();
        let mut push_branch = |s: usize, k: usize| {
            let in_channels = spec.level_channels(s);
            let out_channels =
                if spec.halve_reuse_channels { in_channels / 2 } else { in_channels };
            branches.push(Branch {
                source_level: s,
                k,
                rate: 1 << k,
                in_channels,
                out_channels,
                target_level: s + k,
            });
        };
        match spec.variant {
            Variant::Unet | Variant::UnetAdd => {}
            Variant::Mfp1 => {
                for s in 1..n {
                    push_branch(s, 1);
                }
            }
            Variant::Mfp2 | Variant::MfpBica => {
                for s in 1..n {
                    for k in 1..=(n - s) {
                        push_branch(s, k);
                    }
                }
            }
        }

        // Route branches to their target levels.
        let mut skips = vec![SkipWiring::Absent; n - 1];
        let bottleneck;
        let bottleneck_width;
        if spec.variant.uses_branches() {
            let at_level = |t: usize| -> Vec<usize> {
                branches
                    .iter()
                    .enumerate()
                    .filter(|(_, b)| b.target_level == t)
                    .map(|(i, _)| i)
                    .collect()
            };
            let deepest = at_level(n);
            bottleneck_width = deepest.iter().map(|&i| branches[i].out_channels).sum();
            bottleneck = Bottleneck::Branches { indices: deepest };
            for t in 2..n {
                let idx = at_level(t);
                if !idx.is_empty() {
                    skips[t - 1] = SkipWiring::Branches { indices: idx };
                }
            }
        } else {
            bottleneck = Bottleneck::Encoder;
            bottleneck_width = enc_channels[n - 1];
            for t in 1..n {
                skips[t - 1] = match spec.variant {
                    Variant::Unet => SkipWiring::EncoderConcat { level: t },
                    _ => SkipWiring::EncoderSum { level: t },
                };
            }
        }

        // Decoder widths, deepest-first.
        let mut steps = Vec::with_capacity(n - 1);
        let mut state_width = bottleneck_width;
        for t in (1..n).rev() {
            let skip_width = match &skips[t - 1] {
                SkipWiring::EncoderConcat { level } | SkipWiring::EncoderSum { level } => {
                    enc_channels[level - 1]
                }
                SkipWiring::Branches { indices } => {
                    indices.iter().map(|&i| branches[i].out_channels).sum()
                }
                SkipWiring::Absent => 0,
            };
            let mid_width = match spec.variant {
                Variant::Unet => enc_channels[t], // C_{t+1}
                _ => state_width,
            };
            let out_width = if skip_width > 0 { skip_width } else { state_width };
            steps.push(DecodeStep { target_level: t, in_width: state_width, mid_width, out_width });
            state_width = match &skips[t - 1] {
                SkipWiring::EncoderConcat { .. } => out_width + skip_width,
                _ => out_width,
            };
        }
        let head_in = state_width;
        let head_mid = match spec.variant {
            Variant::Unet => enc_channels[0],
            _ => state_width,
        };

        // BiCA junctions at every sum-fused branch skip.
        let mut bica = vec![None; n - 1];
        if spec.variant == Variant::MfpBica {
            for step in &steps {
                let t = step.target_level;
                if matches!(skips[t - 1], SkipWiring::Branches { .. }) {
                    let extent = spec.input_extent >> (t - 1);
                    let block = (1usize << (n - 1 - t).min(3)).min(extent);
                    let cfg = BicaConfig {
                        channels: step.out_width,
                        feature_h: extent,
                        feature_w: extent,
                        semantic: SemanticDomainConfig::square(block),
                        mask_activation: MaskActivation::Sigmoid,
                    };
                    cfg.validate()?;
                    bica[t - 1] = Some(cfg);
                }
            }
        }

        Ok(Wiring {
            enc_channels,
            branches,
            bottleneck,
            bottleneck_width,
            skips,
            steps,
            head_in,
            head_mid,
            bica,
        })
    }

    /// Declared parameters of every layer, in a fixed naming scheme.
    pub fn param_defs(&self) -> Vec<ParamDef> {
        let w = &self.wiring;
        let mut defs = Vec::new();
        let mut prev = self.spec.in_channels;
        for (i, &c) in w.enc_channels.iter().enumerate() {
            block_defs(&mut defs, &format!("enc{}.", i + 1), prev, c);
            prev = c;
        }
        let mut h_sources: Vec<usize> = w.branches.iter().map(|b| b.source_level).collect();
        h_sources.sort_unstable();
        h_sources.dedup();
        for s in h_sources {
            let c = self.spec.level_channels(s);
            block_defs(&mut defs, &format!("branch.s{s}.h."), c, c);
        }
        for b in &w.branches {
            let p = format!("branch.s{}.k{}.", b.source_level, b.k);
            defs.push(ParamDef::new(
                format!("{p}dconv.weight"),
                &[b.out_channels, b.in_channels, 3, 3],
                InitKind::FanInUniform { fan_in: b.in_channels * 9 },
            ));
            defs.push(ParamDef::new(format!("{p}dgn.gamma"), &[b.out_channels], InitKind::Ones));
            defs.push(ParamDef::new(format!("{p}dgn.beta"), &[b.out_channels], InitKind::Zeros));
        }
        for step in &w.steps {
            let p = format!("dec{}.", step.target_level);
            block_defs(&mut defs, &format!("{p}h."), step.in_width, step.mid_width);
            defs.push(ParamDef::new(
                format!("{p}up.conv.weight"),
                &[step.out_width, step.mid_width, 1, 1],
                InitKind::FanInUniform { fan_in: step.mid_width },
            ));
            defs.push(ParamDef::new(format!("{p}up.gn.gamma"), &[step.out_width], InitKind::Ones));
            defs.push(ParamDef::new(format!("{p}up.gn.beta"), &[step.out_width], InitKind::Zeros));
        }
        block_defs(&mut defs, "head.h.", w.head_in, w.head_mid);
        defs.push(ParamDef::new(
            "head.classifier.weight",
            &[self.spec.classes, w.head_mid, 1, 1],
            InitKind::FanInUniform { fan_in: w.head_mid },
        ));
        defs.push(ParamDef::new("head.classifier.bias", &[self.spec.classes], InitKind::Zeros));
        for (idx, cfg) in w.bica.iter().enumerate() {
            if let Some(cfg) = cfg {
                defs.extend(cfg.param_defs(&format!("bica{}.", idx + 1)));
            }
        }
        defs
    }

    /// Deterministic parameter initialization for this wiring.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParameterSet<T>> {
        init_parameters(&self.param_defs(), seed)
    }

    /// Encoder features for levels 1..=n; level i has `C_i` channels at
    /// `1/2^(i-1)` the input extent.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        nodes: &ParamNodes,
        input: NodeId,
    ) -> Result<Vec<NodeId>> {
        self.encode_levels(g, nodes, input, self.spec.levels)
    }

    fn encode_levels<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        nodes: &ParamNodes,
        input: NodeId,
        upto: usize,
    ) -> Result<Vec<NodeId>> {
        let (_, c, h, w) = g.value(input).dims4()?;
        if c != self.spec.in_channels {
            return Err(Error::shape(format!(
                "encode: input has {c} channels, spec expects {}",
                self.spec.in_channels
            )));
        }
        let div = 1usize << (self.spec.levels - 1);
        if h % div != 0 || w % div != 0 {
            return Err(Error::shape(format!(
                "encode: spatial extent {h}x{w} not divisible by 2^(levels-1) = {div}"
            )));
        }
        let mut feats = Vec::with_capacity(upto);
        let mut x = input;
        for i in 1..=upto {
            if i > 1 {
                x = g.block_mean(x, 2, 2)?;
            }
            x = apply_block(g, nodes, &format!("enc{i}."), x)?;
            feats.push(x);
        }
        Ok(feats)
    }

    /// One reuse branch: encoding block on the level-`source_level` feature,
    /// then a dilated convolution with rate and stride `2^k` emitting
    /// half the channels (`k = 0` degenerates to a plain rate-1 skip).
    pub fn reuse_branch<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        nodes: &ParamNodes,
        source: NodeId,
        source_level: usize,
        k: usize,
    ) -> Result<NodeId> {
        let n = self.spec.levels;
        if source_level == 0 || source_level >= n || k > n - source_level {
            return Err(Error::contract(format!(
                "reuse_branch: (source {source_level}, k {k}) violates k <= levels - source"
            )));
        }
        let h = apply_block(g, nodes, &format!("branch.s{source_level}.h."), source)?;
        apply_branch_conv(g, nodes, &format!("branch.s{source_level}.k{k}."), h, 1 << k)
    }

    /// `U(H(state)) + fused`: encoding block, bilinear 2x upsample with a 1x1
    /// projection, then point-wise sum with the skip contribution.
    pub fn decode_step<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        nodes: &ParamNodes,
        state: NodeId,
        fused: Option<NodeId>,
        target_level: usize,
    ) -> Result<NodeId> {
        let q = self.up_path(g, nodes, state, target_level)?;
        match fused {
            Some(f) => g.add(q, f),
            None => Ok(q),
        }
    }

    fn up_path<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        nodes: &ParamNodes,
        state: NodeId,
        target_level: usize,
    ) -> Result<NodeId> {
        if target_level == 0 || target_level >= self.spec.levels {
            return Err(Error::contract(format!(
                "decode_step: target level {target_level} out of range"
            )));
        }
        let p = format!("dec{target_level}.");
        let h = apply_block(g, nodes, &format!("{p}h."), state)?;
        let up = g.upsample_bilinear(h, 2)?;
        let up_weight = param(nodes, &format!("{p}up.conv.weight"))?;
        let oc = g.value(up_weight).shape()[0];
        let zero_bias = g.constant(Tensor::zeros(&[oc])?);
        let proj = g.conv2d(up, up_weight, zero_bias, Conv2dParams::default())?;
        let c = g.value(proj).shape()[1];
        let gn = g.group_norm(
            proj,
            param(nodes, &format!("{p}up.gn.gamma"))?,
            param(nodes, &format!("{p}up.gn.beta"))?,
            GroupNormParams { groups: fitting_group_count(c, 8), ..Default::default() },
        )?;
        g.relu(gn)
    }

    /// Full-resolution logits (B, classes, H, W). Softmax is applied by the
    /// loss and metrics, not here.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        nodes: &ParamNodes,
        input: NodeId,
    ) -> Result<NodeId> {
        self.forward_inner(g, nodes, input, None)
    }

    /// Forward pass that also records named intermediate feature maps
    /// (branch outputs, skips, upsampled decoder features, fusion results).
    pub fn forward_traced<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        nodes: &ParamNodes,
        input: NodeId,
        trace: &mut Vec<(String, NodeId)>,
    ) -> Result<NodeId> {
        self.forward_inner(g, nodes, input, Some(trace))
    }

    fn forward_inner<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        nodes: &ParamNodes,
        input: NodeId,
        mut trace: Option<&mut Vec<(String, NodeId)>>,
    ) -> Result<NodeId> {
        let n = self.spec.levels;
        let w = &self.wiring;
        let enc_upto = match w.bottleneck {
            Bottleneck::Encoder => n,
            Bottleneck::Branches { .. } => n - 1,
        };
        let feats = self.encode_levels(g, nodes, input, enc_upto)?;
        if let Some(t) = trace.as_deref_mut() {
            for (i, &f) in feats.iter().enumerate() {
                t.push((format!("enc{}", i + 1), f));
            }
        }

        // Branch outputs, sharing the per-source encoding block.
        let mut branch_out: Vec<Option<NodeId>> = vec![None; w.branches.len()];
        if !w.branches.is_empty() {
            let mut h_cache: Vec<Option<NodeId>> = vec![None; n];
            for (i, b) in w.branches.iter().enumerate() {
                let s = b.source_level;
                let h = match h_cache[s - 1] {
                    Some(h) => h,
                    None => {
                        let h =
                            apply_block(g, nodes, &format!("branch.s{s}.h."), feats[s - 1])?;
                        h_cache[s - 1] = Some(h);
                        h
                    }
                };
                let out = apply_branch_conv(
                    g,
                    nodes,
                    &format!("branch.s{}.k{}.", b.source_level, b.k),
                    h,
                    b.rate,
                )?;
                branch_out[i] = Some(out);
                if let Some(t) = trace.as_deref_mut() {
                    t.push((format!("branch.s{}.k{}", b.source_level, b.k), out));
                }
            }
        }
        let branch_node = |i: usize| branch_out[i].expect("branch computed above");

        // Decoder input.
        let mut state = match &w.bottleneck {
            Bottleneck::Encoder => feats[n - 1],
            Bottleneck::Branches { indices } => {
                let ids: Vec<NodeId> = indices.iter().map(|&i| branch_node(i)).collect();
                g.concat_ch(&ids)?
            }
        };
        if let Some(t) = trace.as_deref_mut() {
            t.push((format!("dec{n}"), state));
        }

        for t_level in (1..n).rev() {
            let q = self.up_path(g, nodes, state, t_level)?;
            if let Some(t) = trace.as_deref_mut() {
                t.push((format!("dec{t_level}.up"), q));
            }
            state = match &w.skips[t_level - 1] {
                SkipWiring::Absent => q,
                SkipWiring::EncoderConcat { level } => g.concat_ch(&[q, feats[level - 1]])?,
                SkipWiring::EncoderSum { level } => g.add(q, feats[level - 1])?,
                SkipWiring::Branches { indices } => {
                    let ids: Vec<NodeId> = indices.iter().map(|&i| branch_node(i)).collect();
                    let skip = if ids.len() == 1 { ids[0] } else { g.concat_ch(&ids)? };
                    if let Some(t) = trace.as_deref_mut() {
                        t.push((format!("skip{t_level}"), skip));
                    }
                    match &w.bica[t_level - 1] {
                        Some(cfg) => {
                            let fused =
                                bica_fuse(g, skip, q, nodes, &format!("bica{t_level}."), cfg)?;
                            if let Some(t) = trace.as_deref_mut() {
                                t.push((format!("bica{t_level}"), fused));
                            }
                            g.add(q, fused)?
                        }
                        None => g.add(q, skip)?,
                    }
                }
            };
            if let Some(t) = trace.as_deref_mut() {
                t.push((format!("dec{t_level}"), state));
            }
        }

        let h = apply_block(g, nodes, "head.h.", state)?;
        let logits = g.conv2d(
            h,
            param(nodes, "head.classifier.weight")?,
            param(nodes, "head.classifier.bias")?,
            Conv2dParams::default(),
        )?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(("logits".to_string(), logits));
        }
        Ok(logits)
    }
}

/// Total scalar count of a parameter set.
pub fn param_count<T: Scalar>(params: &ParameterSet<T>) -> usize {
    params.param_count()
}

// Convolutions that feed a group norm carry no bias: the mean subtraction
// makes a per-channel offset a no-op direction, so the parameter would be
// dead weight with an identically zero gradient.
fn block_defs(defs: &mut Vec<ParamDef>, prefix: &str, in_ch: usize, out_ch: usize) {
    defs.push(ParamDef::new(
        format!("{prefix}conv1.weight"),
        &[out_ch, in_ch, 3, 3],
        InitKind::FanInUniform { fan_in: in_ch * 9 },
    ));
    defs.push(ParamDef::new(format!("{prefix}gn1.gamma"), &[out_ch], InitKind::Ones));
    defs.push(ParamDef::new(format!("{prefix}gn1.beta"), &[out_ch], InitKind::Zeros));
    defs.push(ParamDef::new(
        format!("{prefix}conv2.weight"),
        &[out_ch, out_ch, 3, 3],
        InitKind::FanInUniform { fan_in: out_ch * 9 },
    ));
    defs.push(ParamDef::new(format!("{prefix}gn2.gamma"), &[out_ch], InitKind::Ones));
    defs.push(ParamDef::new(format!("{prefix}gn2.beta"), &[out_ch], InitKind::Zeros));
}

/// conv 3x3 -> group norm -> relu, twice (biasless convs; see block_defs).
fn apply_block<T: Scalar>(
    g: &mut Graph<T>,
    nodes: &ParamNodes,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let mut y = x;
    for i in 1..=2 {
        let weight = param(nodes, &format!("{prefix}conv{i}.weight"))?;
        let oc = g.value(weight).shape()[0];
        let zero_bias = g.constant(Tensor::zeros(&[oc])?);
        y = g.conv2d(y, weight, zero_bias, Conv2dParams::default())?;
        let c = g.value(y).shape()[1];
        y = g.group_norm(
            y,
            param(nodes, &format!("{prefix}gn{i}.gamma"))?,
            param(nodes, &format!("{prefix}gn{i}.beta"))?,
            GroupNormParams { groups: fitting_group_count(c, 8), ..Default::default() },
        )?;
        y = g.relu(y)?;
    }
    Ok(y)
}

/// The dilated (stride = dilation = rate) convolution of a reuse branch,
/// followed by group norm and relu.
fn apply_branch_conv<T: Scalar>(
    g: &mut Graph<T>,
    nodes: &ParamNodes,
    prefix: &str,
    x: NodeId,
    rate: usize,
) -> Result<NodeId> {
    let weight = param(nodes, &format!("{prefix}dconv.weight"))?;
    let oc = g.value(weight).shape()[0];
    let zero_bias = g.constant(Tensor::zeros(&[oc])?);
    let y = g.conv2d(
        x,
        weight,
        zero_bias,
        Conv2dParams { stride: rate, dilation: rate, padding: Padding::SameEffective },
    )?;
    let c = g.value(y).shape()[1];
    let y = g.group_norm(
        y,
        param(nodes, &format!("{prefix}dgn.gamma"))?,
        param(nodes, &format!("{prefix}dgn.beta"))?,
        GroupNormParams { groups: fitting_group_count(c, 8), ..Default::default() },
    )?;
    g.relu(y)
}

fn param(nodes: &ParamNodes, name: &str) -> Result<NodeId> {
    nodes
        .get(name)
        .copied()
        .ok_or_else(|| Error::contract(format!("missing parameter {name:?}")))
}

// ---------------------------------------------------------------------------
// Plain-text spec serialization (key=value).
// ---------------------------------------------------------------------------

impl ModelSpec {
    /// Serialize as `key=value` lines (documented keys: variant, levels,
    /// base_channels, in_channels, classes, input_extent, halve_reuse).
    pub fn to_config_text(&self) -> String {
        format!(
            "variant={}\nlevels={}\nbase_channels={}\nin_channels={}\nclasses={}\ninput_extent={}\nhalve_reuse={}\n",
            self.variant.as_str(),
            self.levels,
            self.base_channels,
            self.in_channels,
            self.classes,
            self.input_extent,
            self.halve_reuse_channels
        )
    }

    /// Parse the `key=value` form; unknown keys are rejected by name.
    pub fn from_config_text(text: &str) -> Result<ModelSpec> {
        let mut spec = ModelSpec::new(Variant::Unet, 5, 16, 6);
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key=value, got {line:?}", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let parse_usize = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::config(format!("{key}: invalid integer {v:?}")))
            };
            match key {
                "variant" => spec.variant = Variant::parse(value)?,
                "levels" => spec.levels = parse_usize(value)?,
                "base_channels" => spec.base_channels = parse_usize(value)?,
                "in_channels" => spec.in_channels = parse_usize(value)?,
                "classes" => spec.classes = parse_usize(value)?,
                "input_extent" => spec.input_extent = parse_usize(value)?,
                "halve_reuse" => {
                    spec.halve_reuse_channels = value.parse::<bool>().map_err(|_| {
                        Error::config(format!("halve_reuse: invalid bool {value:?}"))
                    })?
                }
                other => {
                    return Err(Error::config(format!("unknown model spec key {other:?}")));
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn spec(variant: Variant, n: usize, c1: usize, extent: usize) -> ModelSpec {
        ModelSpec { input_extent: extent, ..ModelSpec::new(variant, n, c1, 6) }
    }

    fn forward_shape(s: &ModelSpec, b: usize, hw: usize) -> Vec<usize> {
        let (model, params) = build_model::<f32>(s, 7).unwrap();
        let mut g = Graph::<f32>::new();
        let nodes = params.register(&mut g);
        let input = g.constant(Tensor::rand_uniform(&[b, 1, hw, hw], 0.0, 1.0, 3).unwrap());
        let out = model.forward(&mut g, &nodes, input).unwrap();
        g.value(out).shape().to_vec()
    }

    #[test]
    fn encoder_halves_extent_per_level() {
        let s = spec(Variant::Unet, 4, 4, 64);
        let (model, params) = build_model::<f32>(&s, 1).unwrap();
        let mut g = Graph::<f32>::new();
        let nodes = params.register(&mut g);
        let input = g.constant(Tensor::zeros(&[1, 1, 64, 64]).unwrap());
        let feats = model.encode(&mut g, &nodes, input).unwrap();
        let extents: Vec<usize> = feats.iter().map(|&f| g.value(f).shape()[2]).collect();
        assert_eq!(extents, vec![64, 32, 16, 8]);
    }

    #[test]
    fn deepest_extent_for_five_levels() {
        let s = spec(Variant::Unet, 5, 4, 256);
        let (model, params) = build_model::<f32>(&s, 1).unwrap();
        let mut g = Graph::<f32>::new();
        let nodes = params.register(&mut g);
        let input = g.constant(Tensor::zeros(&[1, 1, 256, 256]).unwrap());
        let feats = model.encode(&mut g, &nodes, input).unwrap();
        assert_eq!(g.value(feats[4]).shape(), &[1, 64, 16, 16]);
    }

    #[test]
    fn indivisible_extent_rejected() {
        let s = spec(Variant::Unet, 4, 4, 64);
        let (model, params) = build_model::<f32>(&s, 1).unwrap();
        let mut g = Graph::<f32>::new();
        let nodes = params.register(&mut g);
        let input = g.constant(Tensor::zeros(&[1, 1, 20, 20]).unwrap());
        assert!(model.encode(&mut g, &nodes, input).is_err());
    }

    #[test]
    fn batched_encode_equals_per_sample_runs() {
        let s = spec(Variant::Unet, 3, 4, 16);
        let (model, params) = build_model::<f32>(&s, 5).unwrap();
        let two = Tensor::<f32>::rand_uniform(&[2, 1, 16, 16], 0.0, 1.0, 9).unwrap();
        let run = |t: Tensor<f32>| {
            let mut g = Graph::<f32>::new();
            let nodes = params.register(&mut g);
            let input = g.constant(t);
            let feats = model.encode(&mut g, &nodes, input).unwrap();
            feats.iter().map(|&f| g.value(f).clone()).collect::<Vec<_>>()
        };
        let batched = run(two.clone());
        for bi in 0..2 {
            let plane = 16 * 16;
            let single = run(
                Tensor::from_vec(&[1, 1, 16, 16], two.data()[bi * plane..(bi + 1) * plane].to_vec())
                    .unwrap(),
            );
            for (bf, sf) in batched.iter().zip(&single) {
                let per = sf.numel();
                assert_eq!(&bf.data()[bi * per..(bi + 1) * per], sf.data());
            }
        }
    }

    #[test]
    fn reuse_branch_shape_law() {
        // Source level 2 of a 5-level mfp2 build has 16 channels at 32x32
        // when the input is 64x64 and C1 = 8.
        let s = spec(Variant::Mfp2, 5, 8, 64);
        let (model, params) = build_model::<f32>(&s, 11).unwrap();
        let mut g = Graph::<f32>::new();
        let nodes = params.register(&mut g);
        let src = g.constant(Tensor::rand_uniform(&[1, 16, 32, 32], -1.0, 1.0, 12).unwrap());
        for (k, extent) in [(1usize, 16usize), (2, 8), (3, 4)] {
            let out = model.reuse_branch(&mut g, &nodes, src, 2, k).unwrap();
            assert_eq!(g.value(out).shape(), &[1, 8, extent, extent], "k={k}");
        }
        // k out of range for source 2 in a depth-5 build.
        assert!(model.reuse_branch(&mut g, &nodes, src, 2, 4).is_err());
    }

    #[test]
    fn decode_step_shape_law_and_additive_identity() {
        // 32ch 8x8 state decodes to 16ch 16x16 under halving widths
        // (mfp1 level-4 step of a 5-level C1=32 build: skip = C3/2 = 16).
        let s = spec(Variant::Mfp1, 5, 32, 64);
        let (model, params) = build_model::<f32>(&s, 13).unwrap();
        let mut g = Graph::<f32>::new();
        let nodes = params.register(&mut g);
        // mfp1 bottleneck width = C4/2 = 128; build the level-4 step input.
        let state = g.constant(Tensor::rand_uniform(&[1, 128, 4, 4], -1.0, 1.0, 14).unwrap());
        let up_only = model.decode_step(&mut g, &nodes, state, None, 4).unwrap();
        assert_eq!(g.value(up_only).shape(), &[1, 64, 8, 8]);
        let zero_skip = g.constant(Tensor::zeros(&[1, 64, 8, 8]).unwrap());
        let fused = model.decode_step(&mut g, &nodes, state, Some(zero_skip), 4).unwrap();
        assert_eq!(g.value(fused).data(), g.value(up_only).data(), "fused = 0 is the identity");
        // Mismatched skip shape is a shape error.
        let bad = g.constant(Tensor::zeros(&[1, 32, 8, 8]).unwrap());
        assert!(model.decode_step(&mut g, &nodes, state, Some(bad), 4).is_err());
    }

    #[test]
    fn forward_output_shape_is_bkhw_for_all_variants() {
        for v in [Variant::Unet, Variant::UnetAdd, Variant::Mfp1, Variant::Mfp2, Variant::MfpBica]
        {
            let s = spec(v, 3, 4, 16);
            assert_eq!(forward_shape(&s, 2, 16), vec![2, 6, 16, 16], "variant {v:?}");
        }
    }

    #[test]
    fn unet_and_mfp2_share_the_output_contract() {
        let a = forward_shape(&spec(Variant::Unet, 4, 4, 32), 1, 32);
        let b = forward_shape(&spec(Variant::Mfp2, 4, 4, 32), 1, 32);
        assert_eq!(a, b);
    }

    #[test]
    fn unet_add_differs_from_unet_only_at_skips() {
        let (mu, pu) = build_model::<f32>(&spec(Variant::Unet, 4, 8, 32), 21).unwrap();
        let (ma, pa) = build_model::<f32>(&spec(Variant::UnetAdd, 4, 8, 32), 21).unwrap();
        assert_eq!(mu.wiring.enc_channels, ma.wiring.enc_channels);
        // Encoders are parameter-identical for the same seed.
        for (name, t) in pu.iter() {
            if name.starts_with("enc") {
                assert_eq!(Some(t), pa.get(name).ok(), "{name} differs");
            }
        }
        // The sum variant is strictly smaller overall.
        assert!(pa.param_count() < pu.param_count());
    }

    #[test]
    fn mfp2_has_fewer_parameters_than_unet() {
        let (_, unet) = build_model::<f32>(&spec(Variant::Unet, 5, 16, 64), 3).unwrap();
        let (_, mfp2) = build_model::<f32>(&spec(Variant::Mfp2, 5, 16, 64), 3).unwrap();
        assert!(mfp2.param_count() < unet.param_count());
    }

    #[test]
    fn same_seed_gives_bit_identical_parameters() {
        let s = spec(Variant::MfpBica, 4, 4, 32);
        let (_, a) = build_model::<f32>(&s, 42).unwrap();
        let (_, b) = build_model::<f32>(&s, 42).unwrap();
        assert_eq!(a, b);
        let (_, c) = build_model::<f32>(&s, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn mfp2_enumerates_every_admissible_branch() {
        let (model, _) = build_model::<f32>(&spec(Variant::Mfp2, 5, 8, 64), 1).unwrap();
        let mut expected = Vec::new();
        for s in 1..5 {
            for k in 1..=(5 - s) {
                expected.push((s, k));
            }
        }
        let got: Vec<(usize, usize)> =
            model.wiring.branches.iter().map(|b| (b.source_level, b.k)).collect();
        assert_eq!(got, expected);
        assert_eq!(model.wiring.branches.len(), 10);
    }

    #[test]
    fn config_text_round_trip() {
        let s = ModelSpec {
            in_channels: 2,
            input_extent: 128,
            ..ModelSpec::new(Variant::MfpBica, 4, 8, 3)
        };
        let text = s.to_config_text();
        let parsed = ModelSpec::from_config_text(&text).unwrap();
        assert_eq!(parsed, s);
    }

    #[test]
    fn unknown_config_key_is_named_in_the_error() {
        let err = ModelSpec::from_config_text("variant=unet\nbogus_key=3\n").unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(ModelSpec::new(Variant::Unet, 1, 16, 6).validate().is_err());
        assert!(ModelSpec::new(Variant::Unet, 5, 3, 6).validate().is_err());
        let bad_extent = ModelSpec { input_extent: 24, ..ModelSpec::new(Variant::Unet, 5, 8, 6) };
        assert!(bad_extent.validate().is_err());
    }
}
