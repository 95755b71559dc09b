//! ADAM, early stopping, stratified folds and the training loops.

pub mod adam;
pub mod cv;
pub mod early_stop;
pub mod fit;
pub mod folds;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use cv::{cross_validate, fold_seed, CvFailure, CvReport, FoldResult};
pub use early_stop::{
    epochs_from_csv, epochs_to_csv, run_with_early_stopping, Decision, EarlyStopping, EpochRecord, EpochRunner,
    StopOutcome,
};
pub use fit::{
    INIT_STREAM, TRAIN_STREAM,
    checkpoint_id, evaluate_dataset, fit_with_early_stopping, initial_weights, load_checkpoint_meta, CheckpointMeta,
    Evaluation, TrainConfig, TrainOutcome, TrainReport, CHECKPOINT_FILE, CHECKPOINT_META_FILE, EPOCHS_FILE,
};
pub use folds::{make_folds, Fold, FoldPlan};
