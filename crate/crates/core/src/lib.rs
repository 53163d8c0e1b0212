pub mod backbone;
pub mod config;
pub mod data;
pub mod drm;
pub mod fim;
pub mod frame;
pub mod model;
pub mod nn;
pub mod pgm;
pub mod pipeline;
pub mod tensor;
pub mod tracker;

pub use config::{Precision, RunConfig, ShiftFill, Variant};
pub use data::{Branch, MetricsReport, ResultRow, SequenceRecord, SynthSpec};
pub use frame::FramePair;
pub use model::{FeatureNet, FrameFeatures};
pub use pgm::PgmStudent;
pub use tensor::{Real, Tensor};
pub use tracker::BBox;
