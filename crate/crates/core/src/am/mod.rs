//! HMM-GMM acoustic models: graphs, Viterbi alignment and staged training.

pub mod align;
pub mod gmm;
pub mod graph;
pub mod model;
pub mod sat;
pub mod train;
pub mod viterbi;

pub use align::{align_corpus, alignment_tier, with_hypothesis_tiers, CorpusAlignment};
pub use graph::{compile_training_graph, Neighbor, Segment, TrainingGraph, SILENCE_PHONE};
pub use model::{AcousticModel, ContextKey, Ctx, HmmPhoneModel, HmmState, ModelKey, SpeakerTransform, Stage};
pub use sat::estimate_speaker_transform;
pub use train::{
    em_iteration, flat_start, prepare_training_set, split_gaussians, train_corpus, train_lda_stage, train_monophone,
    train_pipeline, train_sat, train_triphone, PipelineResult, StageLog, TrainOptions, TrainSchedule, TrainingSet,
};
pub use viterbi::{viterbi_align, AlignedPhone, Alignment};
