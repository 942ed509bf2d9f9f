//! Weakly-supervised whole-slide image classification.
//!
//! A patch-level tumor-region model (convolutional feature extractor,
//! squeeze-and-excitation attention refinement, projection head, softmax
//! classifier) selects regions of interest; an attention-based multiple
//! instance learning model aggregates those regions into a slide-level
//! benign/malignant prediction.

pub mod backbone;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod heads;
pub mod mil;
pub mod model;
pub mod nn;
pub mod raster;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod tiling;
pub mod training;

pub use checkpoint::{Checkpoint, ModelKind};
pub use backbone::{Backbone, BackboneConfig, FeatureVolume};
pub use evaluation::{HeatmapRaster, Metric, MetricReport};
pub use error::{CheckpointError, Error, Result};
pub use heads::{HeadKind, PatchClassifier, PatchPrediction, ProjectionHead};
pub use mil::{Aggregation, Bag, BagPrediction, BiopsyLabel, TargetModel};
pub use model::{Architecture, SourceModel};
pub use tensor::{Parameter, Tape, Tensor, Var};
pub use tiling::{RegionLabel, SlideRaster, TileRecord, TissueMask};
pub use dataset::{FoldSplit, ManifestRecord};
