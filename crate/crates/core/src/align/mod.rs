//! Downsampler, projector, and template composition: the bridge between the
//! frozen speech encoder and the frozen LM.

pub mod compose;
pub mod downsample;
pub mod projector;

pub use compose::{compose, ComposeMode, ComposedSequence, Segment, SegmentKind, Template};
pub use downsample::{downsample, downsample_var};
pub use projector::{count_projector_params, ProjectorConfig, ProjectorParams, ProjectorVars};
