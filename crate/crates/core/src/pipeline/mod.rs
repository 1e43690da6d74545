//! Toy pretraining, mimic training, reconstruction and embedding
//! replacement.

mod embfile;
mod mimic;
pub(crate) mod pretrain;
mod replace;
pub(crate) mod train;

pub use embfile::{embeddings_from_bytes, embeddings_to_bytes, load_embeddings, save_embeddings, EMB_MAGIC};
pub use mimic::{
    build_mimic_examples, embedding_matrix, per_token_mse, reconstruct, reconstruct_all, reconstruct_token,
    train_mimic, MimicConfig, MimicOutput, Reconstruction,
};
pub use pretrain::{corpus_windows, pretrain_toy_plm, PretrainConfig, PretrainOutput, MLM_PROB};
pub use replace::{
    apply_plan, build_replacement_plan, ApplyReport, ReplacementConfig, ReplacementLock, ReplacementPlan, SkipReason,
    Strategy, TOP_MIN_INDEX,
};
pub use train::{window_means, TrainConfig};
