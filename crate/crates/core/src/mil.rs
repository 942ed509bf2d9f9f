//! Attention-based multiple instance learning over bags of patch instances.
//!
//! Each instance is embedded with the transferred backbone and projection
//! head, the embeddings are pooled into one bag vector, and a single
//! sigmoid neuron predicts the bag label. The attention pooling scores
//! instance `i` as `wᵀ tanh(V h_i)` and normalises the scores with a softmax
//! over the bag.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::model::{Architecture, SourceModel};
use crate::nn::{glorot_uniform, Binding, DenseLayer};
use crate::heads::ProjectionHead;
use crate::tensor::{Parameter, PoolMode, Tape, Tensor, Var};

pub const MAX_BAG_SIZE: usize = 300;
pub const DEFAULT_ATTENTION_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiopsyLabel {
    Benign,
    Malignant,
}

impl BiopsyLabel {
    pub fn as_f64(self) -> f64 {
        match self {
            BiopsyLabel::Benign => 0.0,
            BiopsyLabel::Malignant => 1.0,
        }
    }

    pub fn is_positive(self) -> bool {
        self == BiopsyLabel::Malignant
    }
}

impl fmt::Display for BiopsyLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BiopsyLabel::Benign => "benign",
            BiopsyLabel::Malignant => "malignant",
        })
    }
}

/// One slide's instances with its biopsy-level label.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag<T> {
    pub slide_id: String,
    pub instances: Vec<T>,
    pub label: BiopsyLabel,
    pub instance_tile_ids: Vec<String>,
}

impl<T> Bag<T> {
    pub fn new(
        slide_id: impl Into<String>,
        instances: Vec<T>,
        label: BiopsyLabel,
        instance_tile_ids: Vec<String>,
    ) -> Result<Self> {
        let slide_id = slide_id.into();
        if instances.is_empty() || instances.len() > MAX_BAG_SIZE {
            return Err(Error::contract(format!(
                "bag '{slide_id}' has {} instances, must be 1..={MAX_BAG_SIZE}",
                instances.len()
            )));
        }
        if instance_tile_ids.len() != instances.len() {
            return Err(Error::contract(format!(
                "bag '{slide_id}': {} tile ids for {} instances",
                instance_tile_ids.len(),
                instances.len()
            )));
        }
        Ok(Bag {
            slide_id,
            instances,
            label,
            instance_tile_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn try_map<U>(self, f: impl FnMut(T) -> Result<U>) -> Result<Bag<U>> {
        let instances = self.instances.into_iter().map(f).collect::<Result<Vec<_>>>()?;
        Ok(Bag {
            slide_id: self.slide_id,
            instances,
            label: self.label,
            instance_tile_ids: self.instance_tile_ids,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Attention-weighted sum.
    Bgas,
    /// Column mean over instances.
    Bgap,
    /// Column max over instances.
    Bgmp,
}

impl FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bgas" => Ok(Aggregation::Bgas),
            "bgap" => Ok(Aggregation::Bgap),
            "bgmp" => Ok(Aggregation::Bgmp),
            other => Err(Error::config(format!("unknown aggregation mode '{other}'"))),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Bgas => "bgas",
            Aggregation::Bgap => "bgap",
            Aggregation::Bgmp => "bgmp",
        })
    }
}

/// Trainable attention pooling: `V` is `L×C`, `w` is `L×1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionAggregator {
    pub v: Parameter,
    pub w: Parameter,
}

impl AttentionAggregator {
    pub fn init(attention_dim: usize, channels: usize, rng: &mut impl Rng) -> Self {
        AttentionAggregator {
            v: Parameter::new(
                "aggregator.v",
                glorot_uniform(rng, &[attention_dim, channels], channels, attention_dim),
            ),
            w: Parameter::new("aggregator.w", glorot_uniform(rng, &[attention_dim, 1], attention_dim, 1)),
        }
    }

    pub fn attention_dim(&self) -> usize {
        self.v.shape()[0]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.v, &mut self.w]
    }
}

/// Softmax-normalised instance weights `a` (`1×I`) for embeddings `h` (`I×C`).
pub fn attention_weights<'t>(tape: &'t Tape, h: Var<'t>, v: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    let hs = h.shape();
    let (vs, ws) = (v.shape(), w.shape());
    if hs.len() != 2 || vs.len() != 2 || vs[1] != hs[1] || ws != [vs[0], 1] {
        return Err(Error::dim(
            "attention_weights",
            format!("embeddings {hs:?}, V {vs:?}, w {ws:?}"),
        ));
    }
    let vt = tape.transpose(v)?;
    let hidden = tape.tanh(tape.matmul(h, vt)?);
    let scores = tape.matmul(hidden, w)?;
    let scores = tape.reshape(scores, &[1, hs[0]])?;
    Ok(tape.softmax(scores))
}

/// Pools `h` (`I×C`) into a `1×C` bag embedding. For [`Aggregation::Bgas`]
/// the attention weights are returned as well.
pub fn aggregate<'t>(
    tape: &'t Tape,
    h: Var<'t>,
    mode: Aggregation,
    attention: Option<(Var<'t>, Var<'t>)>,
) -> Result<(Var<'t>, Option<Var<'t>>)> {
    let hs = h.shape();
    let [rows, cols] = hs[..] else {
        return Err(Error::dim("aggregate", format!("embeddings must be I×C, got {hs:?}")));
    };
    match mode {
        Aggregation::Bgas => {
            let (v, w) = attention
                .ok_or_else(|| Error::config("bgas aggregation needs attention parameters"))?;
            let a = attention_weights(tape, h, v, w)?;
            Ok((tape.matmul(a, h)?, Some(a)))
        }
        Aggregation::Bgap | Aggregation::Bgmp => {
            let pool = if mode == Aggregation::Bgap { PoolMode::Avg } else { PoolMode::Max };
            let vol = tape.reshape(h, &[rows, 1, cols])?;
            let z = tape.global_pool(vol, pool)?;
            Ok((tape.reshape(z, &[1, cols])?, None))
        }
    }
}

/// Bag-level prediction from the target model.
#[derive(Debug, Clone, PartialEq)]
pub struct BagPrediction {
    pub probability: f64,
    /// Per-instance attention, only for [`Aggregation::Bgas`].
    pub attention: Option<Vec<f64>>,
}

impl BagPrediction {
    /// Threshold 0.5; a tie counts as malignant.
    pub fn label(&self) -> BiopsyLabel {
        if self.probability >= 0.5 {
            BiopsyLabel::Malignant
        } else {
            BiopsyLabel::Benign
        }
    }
}

/// Target model weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetModel {
    pub backbone: Backbone,
    pub head: ProjectionHead,
    pub mode: Aggregation,
    /// Present for every mode so checkpoints share one layout; only BGAS uses it.
    pub aggregator: AttentionAggregator,
    /// Sigmoid bag classifier, `C×1`.
    pub classifier: DenseLayer,
}

impl TargetModel {
    pub fn init(arch: &Architecture, mode: Aggregation, attention_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let source = SourceModel::init(arch, rng)?;
        Self::from_source(&source, mode, attention_dim, rng)
    }

    /// Copies the backbone and head of a trained source model; the source
    /// classifier is dropped and the pooling and bag classifier start fresh.
    pub fn from_source(
        source: &SourceModel,
        mode: Aggregation,
        attention_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if attention_dim == 0 {
            return Err(Error::config("attention dimension L must be ≥ 1"));
        }
        let dim = source.head.out_dim();
        Ok(TargetModel {
            backbone: source.backbone.clone(),
            head: source.head.clone(),
            mode,
            aggregator: AttentionAggregator::init(attention_dim, dim, rng),
            classifier: DenseLayer::glorot(rng, "bag_classifier", dim, 1),
        })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            backbone: self.backbone.config.clone(),
            head: self.head.kind,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.head.out_dim()
    }

    /// `h = G_h(G_A(G_f(x)))` as a `1×C` row.
    pub fn embed_instance<'t>(&self, b: &mut Binding<'t>, image: Var<'t>) -> Result<Var<'t>> {
        let (_, a) = self.backbone.forward(b, image)?;
        self.head.forward(b, a)
    }

    /// Pools embeddings `h` (`I×C`) and predicts. Returns `(Ŷ, attention)`.
    pub fn forward_embeddings<'t>(
        &self,
        b: &mut Binding<'t>,
        h: Var<'t>,
    ) -> Result<(Var<'t>, Option<Var<'t>>)> {
        let tape = b.tape();
        let att = match self.mode {
            Aggregation::Bgas => Some((b.var(&self.aggregator.v), b.var(&self.aggregator.w))),
            _ => None,
        };
        let (z, a) = aggregate(tape, h, self.mode, att)?;
        Ok((self.predict_bag(b, z)?, a))
    }

    /// `Ŷ = sigmoid(Z·c + b)`.
    pub fn predict_bag<'t>(&self, b: &mut Binding<'t>, z: Var<'t>) -> Result<Var<'t>> {
        if z.len() != self.classifier.inputs() {
            return Err(Error::dim(
                "predict_bag",
                format!("bag embedding length {} != {}", z.len(), self.classifier.inputs()),
            ));
        }
        let logit = self.classifier.forward(b, z)?;
        Ok(b.tape().sigmoid(logit))
    }

    /// Full forward over instance images.
    pub fn forward<'t>(
        &self,
        b: &mut Binding<'t>,
        instances: &[Var<'t>],
    ) -> Result<(Var<'t>, Option<Var<'t>>)> {
        if instances.is_empty() {
            return Err(Error::contract("cannot predict an empty bag"));
        }
        let rows = instances
            .iter()
            .map(|&x| self.embed_instance(b, x))
            .collect::<Result<Vec<_>>>()?;
        let h = b.tape().concat_rows(&rows)?;
        self.forward_embeddings(b, h)
    }

    /// Embedding matrix `I×C`, instances processed in parallel.
    pub fn embed_bag(&self, bag: &Bag<Tensor>) -> Result<Tensor> {
        self.embed_images(&bag.instances)
    }

    pub fn embed_images(&self, images: &[Tensor]) -> Result<Tensor> {
        if images.is_empty() {
            return Err(Error::contract("cannot embed an empty bag"));
        }
        let rows = images
            .par_iter()
            .map(|img| {
                let tape = Tape::new();
                let mut b = Binding::inference(&tape);
                let x = tape.constant(img);
                Ok(self.embed_instance(&mut b, x)?.data())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        let c = rows[0].len();
        Tensor::new(&[rows.len(), c], rows.concat())
    }

    /// Prediction from a precomputed embedding matrix.
    pub fn predict_embeddings(&self, h: &Tensor) -> Result<BagPrediction> {
        let tape = Tape::new();
        let mut b = Binding::inference(&tape);
        let hv = tape.constant(h);
        let (p, a) = self.forward_embeddings(&mut b, hv)?;
        Ok(BagPrediction {
            probability: p.item(),
            attention: a.map(|a| a.data()),
        })
    }

    pub fn predict(&self, bag: &Bag<Tensor>) -> Result<BagPrediction> {
        self.predict_embeddings(&self.embed_bag(bag)?)
    }

    /// Parameters in a fixed order: backbone, head, aggregator, classifier.
    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = self.backbone.params();
        out.extend(self.head.params());
        out.push(&self.aggregator.v);
        out.push(&self.aggregator.w);
        out.extend(self.classifier.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.backbone.params_mut();
        out.extend(self.head.params_mut());
        out.extend(self.aggregator.params_mut());
        out.extend(self.classifier.params_mut());
        out
    }

    /// Freezes (or unfreezes) backbone and head together.
    pub fn set_backbone_frozen(&mut self, frozen: bool) {
        self.backbone.set_frozen(frozen);
        for p in self.head.params_mut() {
            p.frozen = frozen;
        }
    }
}
