pub mod losses;
pub mod sgd;
pub mod stage;

pub use losses::{combined_loss, multilabel_bce_loss, multilabel_bce_soft, softmax_nll_loss, LossReport};
pub use sgd::sgd_step;
pub use stage::{train_samples, train_stage, write_log_csv, Sample, Stage, TrainLogRow, TrainOutcome};
