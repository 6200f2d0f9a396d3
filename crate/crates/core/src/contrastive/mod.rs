//! Contrastive pretraining of the volumetric encoder.

mod encoder;
mod ntxent;
mod pretrain;

pub use encoder::{
    encoder_forward, head_forward, is_encoder_param, DropoutPlan, EncoderOutput, EncoderSpec, ProjectionHeadSpec,
    KERNEL, POOL,
};
pub use ntxent::{cosine_sim, ntxent_loss, partner, ContrastiveBatch};
pub use pretrain::{build_contrastive_batch, init_pretrain_params, pretrain, PretrainConfig, PretrainOutcome};
