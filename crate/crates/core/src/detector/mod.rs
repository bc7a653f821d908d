//! Two-stream oriented-box detector: model, training, inference and the
//! modality ablation.

pub mod ablation;
pub mod batch;
pub mod config;
pub mod gradcheck;
pub mod infer;
pub mod model;
pub mod train;

pub use ablation::{format_ablation_csv, load_splits, mean_ap, modalities, run_ablation, AblationConfig, AblationRow};
pub use batch::{flip_annotation, flip_tensor, make_batch, prepare_sample, prepare_samples, Batch, PreparedSample};
pub use config::{DetectorConfig, FusionConfig, Variant};
pub use gradcheck::{gradient_suite, micro_model_gradcheck, sampled_param_check, GradReport, GRAD_TOLERANCE};
pub use infer::{evaluate, head_outputs, infer, infer_all, infer_batch, HeadOutputs};
pub use model::{BoundDetector, Detector, ForwardOutput};
pub use train::{build_objective, compute_step, init_model, load_model, objective_value, save_model, sgd_update, train, EpochLog, StepResult, TrainReport};
