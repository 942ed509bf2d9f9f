//! Projection heads, the patch-level softmax classifier and class activation maps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureVolume;
use crate::error::{Error, Result};
use crate::nn::{Binding, DenseLayer};
use crate::raster::Raster;
use crate::tensor::{Parameter, PoolMode, Tape, Var};

/// Class index of the tumor (positive) class in patch predictions.
pub const TUMOR_CLASS: usize = 0;
/// Class index of the non-tumor class.
pub const NON_TUMOR_CLASS: usize = 1;
pub const MLP_HIDDEN: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Gap,
    Gmp,
    Mlp,
}

impl std::str::FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gap" => Ok(HeadKind::Gap),
            "gmp" => Ok(HeadKind::Gmp),
            "mlp" => Ok(HeadKind::Mlp),
            other => Err(Error::config(format!("unknown projection head '{other}'"))),
        }
    }
}

/// Maps a refined volume `A` to an embedding `Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub kind: HeadKind,
    /// Present only for [`HeadKind::Mlp`].
    pub mlp: Option<DenseLayer>,
    channels: usize,
}

impl ProjectionHead {
    pub fn init(kind: HeadKind, feature_dims: (usize, usize, usize), rng: &mut impl Rng) -> Self {
        let (h, w, c) = feature_dims;
        let mlp = (kind == HeadKind::Mlp).then(|| DenseLayer::glorot(rng, "head.mlp", h * w * c, MLP_HIDDEN));
        ProjectionHead { kind, mlp, channels: c }
    }

    /// Embedding length.
    pub fn out_dim(&self) -> usize {
        match &self.mlp {
            Some(l) => l.outputs(),
            None => self.channels,
        }
    }

    /// Returns a `1×D` embedding.
    pub fn forward<'t>(&self, b: &mut Binding<'t>, a: Var<'t>) -> Result<Var<'t>> {
        let tape = b.tape();
        match self.kind {
            HeadKind::Gap | HeadKind::Gmp => {
                let mode = if self.kind == HeadKind::Gap { PoolMode::Avg } else { PoolMode::Max };
                let z = tape.global_pool(a, mode)?;
                tape.reshape(z, &[1, self.channels])
            }
            HeadKind::Mlp => {
                let layer = self.mlp.as_ref().expect("mlp head has weights");
                if a.len() != layer.inputs() {
                    return Err(Error::dim(
                        "project",
                        format!("mlp head expects {} inputs, volume {:?}", layer.inputs(), a.shape()),
                    ));
                }
                Ok(tape.relu(layer.forward(b, a)?))
            }
        }
    }

    /// Eager embedding of one volume.
    pub fn project(&self, a: &FeatureVolume) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let mut b = Binding::inference(&tape);
        let v = tape.constant(a.tensor());
        Ok(self.forward(&mut b, v)?.data())
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.mlp.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.mlp.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// Tumor / non-tumor probabilities for one patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchPrediction {
    pub p_tumor: f64,
    pub p_non_tumor: f64,
}

impl PatchPrediction {
    /// Argmax; a tie counts as tumor.
    pub fn is_tumor(&self) -> bool {
        self.p_tumor >= self.p_non_tumor
    }
}

/// Softmax-activated dense layer `D → 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchClassifier {
    pub dense: DenseLayer,
}

impl PatchClassifier {
    pub fn init(dim: usize, rng: &mut impl Rng) -> Self {
        PatchClassifier {
            dense: DenseLayer::glorot(rng, "classifier", dim, 2),
        }
    }

    /// Class probabilities as a `1×2` value.
    pub fn forward<'t>(&self, b: &mut Binding<'t>, z: Var<'t>) -> Result<Var<'t>> {
        if z.len() != self.dense.inputs() {
            return Err(Error::dim(
                "classify_patch",
                format!("embedding length {} != classifier input {}", z.len(), self.dense.inputs()),
            ));
        }
        let logits = self.dense.forward(b, z)?;
        Ok(b.tape().softmax(logits))
    }

    pub fn classify(&self, z: &[f64]) -> Result<PatchPrediction> {
        let tape = Tape::new();
        let mut b = Binding::inference(&tape);
        let zv = tape.constant(&crate::tensor::Tensor::new(&[1, z.len()], z.to_vec())?);
        let p = self.forward(&mut b, zv)?.data();
        Ok(PatchPrediction {
            p_tumor: p[TUMOR_CLASS],
            p_non_tumor: p[NON_TUMOR_CLASS],
        })
    }

    pub fn params(&self) -> [&Parameter; 2] {
        self.dense.params()
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        self.dense.params_mut()
    }
}

/// Classic class activation map: `Σ_c w[c, class]·A_c`, min-max normalised
/// to `[0,1]` (a flat map becomes all 0.5), then bilinearly resized to
/// `out_width × out_height`.
pub fn compute_cam(
    a: &FeatureVolume,
    head: HeadKind,
    clf: &PatchClassifier,
    class_index: usize,
    out_width: usize,
    out_height: usize,
) -> Result<Raster> {
    if head == HeadKind::Mlp {
        return Err(Error::config(
            "CAM needs a channel-aligned head (gap or gmp); the mlp head has no channel correspondence",
        ));
    }
    let (h, w, c) = a.dims();
    if clf.dense.inputs() != c {
        return Err(Error::dim(
            "compute_cam",
            format!("classifier expects {} channels, volume has {c}", clf.dense.inputs()),
        ));
    }
    if class_index > 1 {
        return Err(Error::contract(format!("class index {class_index} not in {{0, 1}}")));
    }
    let weights = clf.dense.weights.data();
    let values: Vec<f64> = a
        .tensor()
        .data()
        .chunks(c)
        .map(|px| px.iter().enumerate().map(|(ch, v)| weights[ch * 2 + class_index] * v).sum())
        .collect();
    let mut raw = Raster::new(w, h, values)?;
    let (lo, hi) = raw.min_max();
    if hi > lo {
        raw.values.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    } else {
        raw.values.iter_mut().for_each(|v| *v = 0.5);
    }
    Ok(raw.resize_bilinear(out_width, out_height))
}
