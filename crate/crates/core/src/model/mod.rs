pub mod attention;
pub mod condition;
pub mod config;
pub mod dit;
pub mod patch;

pub use attention::{
    cross_attention, dca_forward, multi_head_attention, shared_attention_forward,
    shared_attention_forward_ordered, CondStream, DcaWeights, EmbeddedConditions, SharedWeights,
    MASKED,
};
pub use condition::{ConditionBatch, ConditionSet, Modality};
pub use config::{CrossAttnVariant, ModelConfig};
pub use dit::{
    sincos_2d, timestep_features, BlockActivations, Denoiser, DenoiserOutput, ForwardOptions,
    Injection,
};
pub use patch::{patchify, unpatchify};
