//! Convolutional feature extractor and the squeeze-and-excitation attention
//! module that refines its output.
//!
//! The extractor is a VGG-style stack: each block runs `convs_per_block`
//! same-padded 3×3 convolutions with ReLU, then a 2×2 max-pool. The attention
//! module is a 1×1-convolution autoencoder over the extractor's channels:
//! reduction layers (ReLU, the last one sigmoid) each followed by an SE block,
//! then linear expansion layers back to `C` channels. The resulting mask
//! gates the features elementwise, `A = F ⊙ M`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{glorot_uniform, Binding, ConvLayer};
use crate::tensor::{Parameter, PoolMode, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub block_channel_widths: Vec<usize>,
    pub convs_per_block: usize,
    /// Leading blocks whose parameters are frozen during training.
    pub frozen_blocks: usize,
    /// Network input `[height, width, channels]`.
    pub input_size: [usize; 3],
    pub se_reduction_ratio: usize,
    /// Whether the SE attention module is present at all.
    pub attention: bool,
    /// Channel widths of the attention autoencoder, input to output.
    /// Empty means the default `[C, C/2, C/4, C/2, C]`.
    #[serde(default)]
    pub attention_filter_schedule: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            block_channel_widths: vec![8, 16, 32],
            convs_per_block: 2,
            frozen_blocks: 0,
            input_size: [224, 224, 3],
            se_reduction_ratio: 4,
            attention: true,
            attention_filter_schedule: Vec::new(),
        }
    }
}

impl BackboneConfig {
    /// Channels of the extractor output.
    pub fn feature_channels(&self) -> usize {
        *self.block_channel_widths.last().unwrap_or(&0)
    }

    /// Spatial size `(H, W)` of the extractor output.
    pub fn feature_hw(&self) -> (usize, usize) {
        let f = 1 << self.block_channel_widths.len();
        (self.input_size[0] / f, self.input_size[1] / f)
    }

    pub fn schedule(&self) -> Vec<usize> {
        if !self.attention_filter_schedule.is_empty() {
            return self.attention_filter_schedule.clone();
        }
        let c = self.feature_channels();
        vec![c, c / 2, c / 4, c / 2, c]
    }

    /// Number of reduction layers in the attention schedule.
    pub fn reduction_layers(&self) -> usize {
        let s = self.schedule();
        s.windows(2).take_while(|w| w[1] < w[0]).count()
    }

    pub fn validate(&self) -> Result<()> {
        let blocks = self.block_channel_widths.len();
        if blocks == 0 || self.block_channel_widths.contains(&0) {
            return Err(Error::config("backbone needs at least one block of non-zero width"));
        }
        if self.convs_per_block == 0 {
            return Err(Error::config("convs_per_block must be ≥ 1"));
        }
        if self.frozen_blocks >= blocks {
            return Err(Error::config(format!(
                "frozen_blocks = {} must be < number of blocks ({blocks})",
                self.frozen_blocks
            )));
        }
        let f = 1usize << blocks;
        let [h, w, d] = self.input_size;
        if h == 0 || w == 0 || d == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::config(format!(
                "input size {h}×{w}×{d} must be non-empty with spatial size divisible by 2^{blocks}"
            )));
        }
        if !self.attention {
            return Ok(());
        }
        let r = self.se_reduction_ratio;
        if r == 0 {
            return Err(Error::config("se_reduction_ratio must be ≥ 1"));
        }
        let s = self.schedule();
        let c = self.feature_channels();
        if s.len() < 3 || s[0] != c || *s.last().unwrap() != c {
            return Err(Error::config(format!(
                "attention schedule {s:?} must start and end at the extractor width {c}"
            )));
        }
        let n_red = self.reduction_layers();
        let rest = &s[n_red..];
        if n_red == 0 || rest.len() < 2 || !rest.windows(2).all(|w| w[1] > w[0]) {
            return Err(Error::config(format!(
                "attention schedule {s:?} must strictly decrease then strictly increase"
            )));
        }
        for &width in &s[1..=n_red] {
            if width == 0 || width % r != 0 {
                return Err(Error::config(format!(
                    "SE reduction ratio {r} does not divide reduction width {width} in {s:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Spatial feature map `H×W×C`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume(pub Tensor);

impl FeatureVolume {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 3 {
            return Err(Error::dim("feature volume", format!("expected H×W×C, got {:?}", t.shape())));
        }
        Ok(FeatureVolume(t))
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.0.shape();
        (s[0], s[1], s[2])
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Value at row `y`, column `x`, channel `c`.
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        let (_, w, ch) = self.dims();
        self.0.data()[(y * w + x) * ch + c]
    }
}

/// Extractor parameters, one list of conv layers per block.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub blocks: Vec<Vec<ConvLayer>>,
}

impl FeatureExtractor {
    pub fn init(config: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let mut cin = config.input_size[2];
        let blocks = config
            .block_channel_widths
            .iter()
            .enumerate()
            .map(|(b, &width)| {
                (0..config.convs_per_block)
                    .map(|i| {
                        let layer = ConvLayer::he(rng, &format!("extractor.block{b}.conv{i}"), 3, cin, width);
                        cin = width;
                        layer
                    })
                    .collect()
            })
            .collect();
        FeatureExtractor { blocks }
    }

    pub fn forward<'t>(&self, b: &mut Binding<'t>, image: Var<'t>) -> Result<Var<'t>> {
        let tape = b.tape();
        let mut x = image;
        for block in &self.blocks {
            for conv in block {
                x = tape.relu(conv.forward(b, x)?);
            }
            x = tape.max_pool2(x)?;
        }
        Ok(x)
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        self.blocks.iter().flatten().flat_map(|l| l.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.blocks.iter_mut().flatten().flat_map(|l| l.params_mut())
    }

    /// Marks the first `n` blocks frozen and the rest trainable.
    pub fn freeze_blocks(&mut self, n: usize) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            for p in block.iter_mut().flat_map(|l| l.params_mut()) {
                p.frozen = i < n;
            }
        }
    }
}

/// Squeeze-and-excitation weights. `w1` is `R×(R/r)` and `w2` is `(R/r)×R`,
/// both stored input-major as for [`Tape::dense`].
#[derive(Debug, Clone, PartialEq)]
pub struct SeBlock {
    pub w1: Parameter,
    pub w2: Parameter,
}

impl SeBlock {
    pub fn init(rng: &mut impl Rng, name: &str, channels: usize, ratio: usize) -> Self {
        let hidden = channels / ratio;
        SeBlock {
            w1: Parameter::new(format!("{name}.w1"), glorot_uniform(rng, &[channels, hidden], channels, hidden)),
            w2: Parameter::new(format!("{name}.w2"), glorot_uniform(rng, &[hidden, channels], hidden, channels)),
        }
    }

    pub fn forward<'t>(&self, b: &mut Binding<'t>, g: Var<'t>) -> Result<Var<'t>> {
        let w1 = b.var(&self.w1);
        let w2 = b.var(&self.w2);
        se_block(b.tape(), g, w1, w2)
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.w1, &mut self.w2]
    }
}

/// Channel recalibration: `s = GAP(G)`, `ŝ = sigmoid(relu(s·W1)·W2)`,
/// output channel `c` is `ŝ_c · G_c`.
pub fn se_block<'t>(tape: &'t Tape, g: Var<'t>, w1: Var<'t>, w2: Var<'t>) -> Result<Var<'t>> {
    let shape = g.shape();
    let r = shape[shape.len() - 1];
    let (w1s, w2s) = (w1.shape(), w2.shape());
    if w1s.len() != 2 || w2s.len() != 2 || w1s[0] != r || w2s[1] != r || w1s[1] != w2s[0] {
        return Err(Error::dim(
            "se_block",
            format!("W1 {w1s:?} / W2 {w2s:?} do not fit {r} channels"),
        ));
    }
    let s = tape.global_pool(g, PoolMode::Avg)?;
    let s = tape.reshape(s, &[1, r])?;
    let hidden = tape.relu(tape.matmul(s, w1)?);
    let gate = tape.sigmoid(tape.matmul(hidden, w2)?);
    tape.scale_channels(g, gate)
}

/// Attention autoencoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionModule {
    pub reductions: Vec<ConvLayer>,
    pub se_blocks: Vec<SeBlock>,
    pub expansions: Vec<ConvLayer>,
}

impl AttentionModule {
    pub fn init(config: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let s = config.schedule();
        let n_red = config.reduction_layers();
        let mut reductions = Vec::new();
        let mut se_blocks = Vec::new();
        let mut expansions = Vec::new();
        for (i, w) in s.windows(2).enumerate() {
            if i < n_red {
                reductions.push(ConvLayer::he(rng, &format!("attention.reduce{i}"), 1, w[0], w[1]));
                se_blocks.push(SeBlock::init(rng, &format!("attention.se{i}"), w[1], config.se_reduction_ratio));
            } else {
                let j = i - n_red;
                expansions.push(ConvLayer::he(rng, &format!("attention.expand{j}"), 1, w[0], w[1]));
            }
        }
        AttentionModule {
            reductions,
            se_blocks,
            expansions,
        }
    }

    /// The gating mask `M`, same shape as `features`.
    pub fn mask<'t>(&self, b: &mut Binding<'t>, features: Var<'t>) -> Result<Var<'t>> {
        let tape = b.tape();
        let expected = self.reductions.first().map(|l| l.in_channels()).unwrap_or(0);
        let shape = features.shape();
        if shape.len() != 3 || shape[2] != expected {
            return Err(Error::config(format!(
                "attention module expects {expected} channels, features are {shape:?}"
            )));
        }
        let last = self.reductions.len() - 1;
        let mut x = features;
        for (i, (conv, se)) in self.reductions.iter().zip(&self.se_blocks).enumerate() {
            let pre = conv.forward(b, x)?;
            x = if i == last { tape.sigmoid(pre) } else { tape.relu(pre) };
            x = se.forward(b, x)?;
        }
        for conv in &self.expansions {
            x = conv.forward(b, x)?;
        }
        Ok(x)
    }

    /// `A = F ⊙ M`.
    pub fn refine<'t>(&self, b: &mut Binding<'t>, features: Var<'t>) -> Result<Var<'t>> {
        let m = self.mask(b, features)?;
        b.tape().mul(features, m)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out: Vec<&Parameter> = Vec::new();
        for (conv, se) in self.reductions.iter().zip(&self.se_blocks) {
            out.extend(conv.params());
            out.push(&se.w1);
            out.push(&se.w2);
        }
        out.extend(self.expansions.iter().flat_map(|l| l.params()));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = Vec::new();
        for (conv, se) in self.reductions.iter_mut().zip(self.se_blocks.iter_mut()) {
            out.extend(conv.params_mut());
            out.extend(se.params_mut());
        }
        out.extend(self.expansions.iter_mut().flat_map(|l| l.params_mut()));
        out
    }
}

/// Extractor plus optional attention refinement: `x → F → A`.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub extractor: FeatureExtractor,
    pub attention: Option<AttentionModule>,
}

impl Backbone {
    pub fn init(config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut extractor = FeatureExtractor::init(&config, rng);
        extractor.freeze_blocks(config.frozen_blocks);
        let attention = config.attention.then(|| AttentionModule::init(&config, rng));
        Ok(Backbone {
            config,
            extractor,
            attention,
        })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape != self.config.input_size {
            return Err(Error::dim(
                "extract_features",
                format!("input {shape:?}, network expects {:?}", self.config.input_size),
            ));
        }
        Ok(())
    }

    /// Returns `(F, A)`; without attention `A` is `F`.
    pub fn forward<'t>(&self, b: &mut Binding<'t>, image: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        self.check_input(&image.shape())?;
        let f = self.extractor.forward(b, image)?;
        let a = match &self.attention {
            Some(att) => att.refine(b, f)?,
            None => f,
        };
        Ok((f, a))
    }

    /// `F = G_f(x)` evaluated without recording gradients.
    pub fn extract_features(&self, image: &Tensor) -> Result<FeatureVolume> {
        self.check_input(image.shape())?;
        let tape = Tape::new();
        let mut b = Binding::inference(&tape);
        let x = tape.constant(image);
        FeatureVolume::new(self.extractor.forward(&mut b, x)?.to_tensor())
    }

    /// `A = G_A(F)`; identity when the attention module is disabled.
    pub fn attention_refine(&self, features: &FeatureVolume) -> Result<FeatureVolume> {
        let Some(att) = &self.attention else {
            return Ok(features.clone());
        };
        let tape = Tape::new();
        let mut b = Binding::inference(&tape);
        let f = tape.constant(features.tensor());
        FeatureVolume::new(att.refine(&mut b, f)?.to_tensor())
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out: Vec<&Parameter> = self.extractor.params().collect();
        if let Some(att) = &self.attention {
            out.extend(att.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = self.extractor.params_mut().collect();
        if let Some(att) = &mut self.attention {
            out.extend(att.params_mut());
        }
        out
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for p in self.params_mut() {
            p.frozen = frozen;
        }
        if !frozen {
            self.extractor.freeze_blocks(self.config.frozen_blocks);
        }
    }
}
