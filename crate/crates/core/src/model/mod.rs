//! The diffusion transformer shared by teacher, fake score and student.

pub mod cache;
pub mod config;
pub mod dit;
pub mod mask;
pub mod weights;

pub use cache::{commit_chunk, forward_incremental, KVCache};
pub use config::ModelConfig;
pub use dit::{dit_forward, patchify, predict, predict_at, unpatchify, Attend, DitOutput, DitVars, FrameConditioning};
pub use mask::{BlockCausalMask, ChunkLayout};
pub use weights::{ModelWeights, ParamLayout};
