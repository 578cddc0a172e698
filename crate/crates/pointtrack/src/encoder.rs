//! Convolutional per-frame feature extractor.
//!
//! One 7×7 stride-2 stem, a stack of residual blocks with instance norm
//! (one of them stride 2), then final 3×3 and 1×1 convolutions. Overall
//! stride k; an S-level pyramid follows by 2×2 average pooling. Pyramid
//! levels are stored channel-last for point sampling.

use crate::coordmap::CoordMap;
use crate::diffcore::{
    init, DiffError, DiffResult, Mounted, PadMode, ParamId, ParamSet, Real, Tape, Var,
};
use rand_chacha::ChaCha8Rng;

/// Per-frame dense features at S scales, channel-last (H, W, C) per level.
#[derive(Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
    pub frame_index: usize,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub stem_channels: usize,
    /// Residual blocks as (stride, output channels).
    pub blocks: Vec<(usize, usize)>,
    /// Output feature dimension d.
    pub feat_dim: usize,
    /// Pyramid scale count S.
    pub scales: usize,
    pub pad_mode: PadMode,
}

impl EncoderConfig {
    /// Desk-scale default: stride 4, d = 32, two residual blocks.
    pub fn toy(feat_dim: usize, scales: usize) -> Self {
        EncoderConfig {
            stem_channels: 32,
            blocks: vec![(2, 32), (1, 32)],
            feat_dim,
            scales,
            pad_mode: PadMode::Replicate,
        }
    }

    /// The full-scale configuration: d = 128, eight residual blocks.
    pub fn full() -> Self {
        EncoderConfig {
            stem_channels: 64,
            blocks: vec![
                (1, 64),
                (1, 64),
                (2, 96),
                (1, 96),
                (1, 128),
                (1, 128),
                (1, 128),
                (1, 128),
            ],
            feat_dim: 128,
            scales: 4,
            pad_mode: PadMode::Replicate,
        }
    }

    /// Overall stride k of the base features.
    pub fn stride(&self) -> usize {
        2 * self.blocks.iter().map(|&(s, _)| s).product::<usize>()
    }

    /// Input extents must divide k·2^(S−1) so every pyramid level is exact.
    pub fn required_divisor(&self) -> usize {
        self.stride() << (self.scales - 1)
    }
}

struct ConvP {
    w: ParamId,
    b: ParamId,
    stride: usize,
    padding: usize,
}

impl ConvP {
    fn new<R: Real>(
        params: &mut ParamSet<R>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        f: usize,
        stride: usize,
    ) -> DiffResult<Self> {
        let fan_in = c_in * f * f;
        let w = params.register(
            &format!("{name}.weight"),
            init::scaled_uniform(rng, &[c_out, c_in, f, f], fan_in),
        )?;
        let b = params.register(&format!("{name}.bias"), crate::diffcore::Tensor::zeros(&[c_out]))?;
        Ok(ConvP { w, b, stride, padding: (f - 1) / 2 })
    }

    fn apply<R: Real>(
        &self,
        tape: &mut Tape<R>,
        params: &ParamSet<R>,
        mounted: &mut Mounted,
        x: Var,
        mode: PadMode,
    ) -> DiffResult<Var> {
        let w = mounted.var(tape, params, self.w);
        let b = mounted.var(tape, params, self.b);
        tape.conv2d_with(x, w, Some(b), self.stride, self.padding, mode)
    }
}

struct ResBlock {
    conv1: ConvP,
    conv2: ConvP,
    skip: Option<ConvP>,
}

/// Feature CNN. Holds parameter ids; values live in the registry.
pub struct Encoder {
    cfg: EncoderConfig,
    stem: ConvP,
    blocks: Vec<ResBlock>,
    final3: ConvP,
    final1: ConvP,
    norm_eps: f64,
}

impl Encoder {
    pub fn new<R: Real>(
        cfg: EncoderConfig,
        params: &mut ParamSet<R>,
        rng: &mut ChaCha8Rng,
    ) -> DiffResult<Self> {
        let stem = ConvP::new(params, rng, "encoder.stem", 3, cfg.stem_channels, 7, 2)?;
        let mut blocks = Vec::new();
        let mut c_in = cfg.stem_channels;
        for (i, &(stride, c_out)) in cfg.blocks.iter().enumerate() {
            let conv1 = ConvP::new(params, rng, &format!("encoder.block{i}.conv1"), c_in, c_out, 3, stride)?;
            let conv2 = ConvP::new(params, rng, &format!("encoder.block{i}.conv2"), c_out, c_out, 3, 1)?;
            let skip = if stride != 1 || c_in != c_out {
                Some(ConvP::new(params, rng, &format!("encoder.block{i}.skip"), c_in, c_out, 1, stride)?)
            } else {
                None
            };
            blocks.push(ResBlock { conv1, conv2, skip });
            c_in = c_out;
        }
        let final3 = ConvP::new(params, rng, "encoder.final3", c_in, c_in, 3, 1)?;
        let final1 = ConvP::new(params, rng, "encoder.final1", c_in, cfg.feat_dim, 1, 1)?;
        let enc = Encoder { cfg, stem, blocks, final3, final1, norm_eps: 1e-5 };

        // single source of truth for feature coordinates
        let folded = CoordMap::<f64>::fold(&enc.coord_chain());
        let k = enc.cfg.stride() as f64;
        if folded.alpha != k || folded.beta != 0.0 {
            return Err(DiffError::InvalidConfig {
                op: "encoder",
                message: format!(
                    "declared layers fold to (α={}, β={}), expected (α={k}, β=0)",
                    folded.alpha, folded.beta
                ),
            });
        }
        Ok(enc)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Per-layer coordinate maps of the declared architecture, outermost
    /// first. Every conv uses β-canceling padding P=(F−1)/2.
    pub fn coord_chain(&self) -> Vec<CoordMap<f64>> {
        let mut chain = vec![CoordMap::filter_map(7, 2, 3)];
        for &(stride, _) in &self.cfg.blocks {
            chain.push(CoordMap::filter_map(3, stride, 1));
            chain.push(CoordMap::filter_map(3, 1, 1));
        }
        chain.push(CoordMap::filter_map(3, 1, 1));
        chain.push(CoordMap::filter_map(1, 1, 0));
        chain
    }

    /// Coordinate chain of pyramid level s (1-based): the base chain plus
    /// s−1 average-pooling maps (F=2, S=2, P=0 → α=2, β=1/2).
    pub fn level_chain(&self, level: usize) -> Vec<CoordMap<f64>> {
        let mut chain = self.coord_chain();
        for _ in 1..level {
            chain.push(CoordMap::filter_map(2, 2, 0));
        }
        chain
    }

    /// Folded map of pyramid level s (1-based): level coords → image coords.
    pub fn level_map(&self, level: usize) -> CoordMap<f64> {
        CoordMap::fold(&self.level_chain(level))
    }

    /// Runs the CNN on a (3, H, W) frame and builds the pooled pyramid.
    pub fn encode_frame<R: Real>(
        &self,
        tape: &mut Tape<R>,
        params: &ParamSet<R>,
        mounted: &mut Mounted,
        image: Var,
        frame_index: usize,
    ) -> DiffResult<FeaturePyramid> {
        let shape = tape.value(image).shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(DiffError::InvalidConfig {
                op: "encode_frame",
                message: format!("expected (3, H, W), got {shape:?}"),
            });
        }
        let div = self.cfg.required_divisor();
        if shape[1] % div != 0 || shape[2] % div != 0 {
            return Err(DiffError::InvalidConfig {
                op: "encode_frame",
                message: format!(
                    "frame extents {}x{} must be divisible by k·2^(S−1) = {div}",
                    shape[1], shape[2]
                ),
            });
        }
        let eps = R::from_f64(self.norm_eps);
        let pad = self.cfg.pad_mode;
        let mut x = self.stem.apply(tape, params, mounted, image, pad)?;
        x = tape.instance_norm(x, eps)?;
        x = tape.gelu(x)?;
        for block in &self.blocks {
            let mut y = block.conv1.apply(tape, params, mounted, x, pad)?;
            y = tape.instance_norm(y, eps)?;
            y = tape.gelu(y)?;
            y = block.conv2.apply(tape, params, mounted, y, pad)?;
            y = tape.instance_norm(y, eps)?;
            let shortcut = match &block.skip {
                Some(conv) => conv.apply(tape, params, mounted, x, pad)?,
                None => x,
            };
            x = tape.add(y, shortcut)?;
            x = tape.gelu(x)?;
        }
        let mut y = self.final3.apply(tape, params, mounted, x, pad)?;
        y = tape.instance_norm(y, eps)?;
        y = tape.gelu(y)?;
        let base = self.final1.apply(tape, params, mounted, y, pad)?;

        let mut levels = Vec::with_capacity(self.cfg.scales);
        let mut level = tape.chw_to_hwc(base)?;
        levels.push(level);
        for _ in 1..self.cfg.scales {
            level = tape.avg_pool2_hwc(level)?;
            levels.push(level);
        }
        Ok(FeaturePyramid { levels, frame_index })
    }
}
