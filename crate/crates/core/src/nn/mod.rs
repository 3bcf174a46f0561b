//! Network blocks: attention inputs, soft attention units, pre-activation
//! bottlenecks, backbone assembly and the classification head.

pub mod attention;
pub mod bottleneck;
pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod model;
pub mod params;

pub use attention::{build_attention_input, hard_attention_input, image_tensor, AttentionUnit};
pub use bottleneck::Bottleneck;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use config::{AttentionMode, BackbonePlan, BlockPlan, ModelConfig, Placement};
pub use model::{encode_one, predict_pair, Forward, Head, Inputs, Model};
pub use params::{Ctx, ParamId, ParamStore, StatsId};
