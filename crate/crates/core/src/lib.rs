//! Streaming voice conversion runtime: causal convolutional encoders and
//! decoder with frame-by-frame execution, Yin side features, and the tools
//! around them.

pub mod evalcli;
pub mod model;
pub mod pipeline;
pub mod pitch;
pub mod streaming;
pub mod tensor;

pub use model::{ArchitectureConfig, ModelWeights, SpeakerLatent};
pub use pipeline::{AudioBuffer, ConversionStream, LatencyBudget, VoiceConverter};
pub use streaming::{CompiledGraph, GraphPlan, StreamState};
pub use tensor::FeatureMap;
