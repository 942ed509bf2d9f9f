//! The patch-level source model: backbone, projection head, softmax classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, FeatureVolume};
use crate::error::Result;
use crate::heads::{HeadKind, PatchClassifier, PatchPrediction, ProjectionHead, NON_TUMOR_CLASS, TUMOR_CLASS};
use crate::nn::Binding;
use crate::tensor::{Parameter, Tape, Tensor, Var};

/// Architecture shared by the source and target models.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub backbone: BackboneConfig,
    pub head: HeadKind,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            backbone: BackboneConfig::default(),
            head: HeadKind::Gmp,
        }
    }
}

impl Architecture {
    pub fn feature_dims(&self) -> (usize, usize, usize) {
        let (h, w) = self.backbone.feature_hw();
        (h, w, self.backbone.feature_channels())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceModel {
    pub backbone: Backbone,
    pub head: ProjectionHead,
    pub classifier: PatchClassifier,
}

impl SourceModel {
    pub fn init(arch: &Architecture, rng: &mut impl Rng) -> Result<Self> {
        let backbone = Backbone::init(arch.backbone.clone(), rng)?;
        let head = ProjectionHead::init(arch.head, arch.feature_dims(), rng);
        let classifier = PatchClassifier::init(head.out_dim(), rng);
        Ok(SourceModel {
            backbone,
            head,
            classifier,
        })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            backbone: self.backbone.config.clone(),
            head: self.head.kind,
        }
    }

    /// Class probabilities (`1×2`, tumor first) for one image.
    pub fn forward<'t>(&self, b: &mut Binding<'t>, image: Var<'t>) -> Result<Var<'t>> {
        let (_, a) = self.backbone.forward(b, image)?;
        let z = self.head.forward(b, a)?;
        self.classifier.forward(b, z)
    }

    /// BCE of the tumor-class probability against `is_tumor`.
    pub fn loss<'t>(&self, b: &mut Binding<'t>, image: Var<'t>, is_tumor: bool) -> Result<Var<'t>> {
        let probs = self.forward(b, image)?;
        let tape = b.tape();
        let p = tape.select(probs, TUMOR_CLASS)?;
        tape.bce(p, if is_tumor { 1.0 } else { 0.0 })
    }

    pub fn predict(&self, image: &Tensor) -> Result<PatchPrediction> {
        let tape = Tape::new();
        let mut b = Binding::inference(&tape);
        let x = tape.constant(image);
        let p = self.forward(&mut b, x)?.data();
        Ok(PatchPrediction {
            p_tumor: p[TUMOR_CLASS],
            p_non_tumor: p[NON_TUMOR_CLASS],
        })
    }

    /// The refined feature volume `A` for an image.
    pub fn refined_features(&self, image: &Tensor) -> Result<FeatureVolume> {
        let tape = Tape::new();
        let mut b = Binding::inference(&tape);
        let x = tape.constant(image);
        let (_, a) = self.backbone.forward(&mut b, x)?;
        FeatureVolume::new(a.to_tensor())
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = self.backbone.params();
        out.extend(self.head.params());
        out.extend(self.classifier.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.backbone.params_mut();
        out.extend(self.head.params_mut());
        out.extend(self.classifier.params_mut());
        out
    }
}
