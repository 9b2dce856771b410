//! Encoders, task heads, masked-LM pre-training and the optimizer, built on a
//! small reverse-mode autodiff tape over dense matrices.

mod checkpoint;
mod embeddings;
mod encoder;
mod heads;
mod mlm;
mod optim;
mod tape;

pub use checkpoint::{encoder_shapes, Checkpoint, FORMAT_VERSION};
pub use embeddings::load_embeddings;
pub use encoder::{
    attention_maps, encode, encode_on_tape, init_encoder, Dropout, Encoded, EncoderConfig,
    EncoderKind,
};
pub use heads::{
    crf_params, funnel_sizes, init_crf, init_si_head, init_tc_head, si_emissions_on_tape,
    si_head, si_loss_on_tape, tc_head, tc_logits_on_tape,
};
pub use mlm::{
    init_mlm_head, mask_count, mask_for_mlm, mlm_loss, mlm_loss_on_tape, pretrain_from,
    pretrain_mlm, MlmBatch, PretrainConfig, PretrainRun, DEFAULT_CHECKPOINT_FRACTIONS,
    MASK_FRACTION,
};
pub use optim::{warmup_steps, RAdam};
pub use tape::{Grads, ParamSet, Tape, Var};
