//! Two-stage optimisation of the latent graph model.

mod checkpoint;
mod data;
mod fit;
mod losses;
mod model;
mod perturb;

pub use checkpoint::{load_checkpoint, restore_vars, save_checkpoint, CheckpointMeta};
pub use data::{chunks, epoch_order, AugmentConfig, Batch, Dataset, Example};
pub use fit::{
    evaluate, fit_baseline, fit_stage1, fit_stage2, graph_triplets, predict_dataset, read_log, report, triplet_recall,
    BaselineModel, BaselineTrainConfig, FitOptions, FitSummary, LogRecord, Predictions, Stage1Config, Stage2Config,
    RECALL_K,
};
pub use losses::{
    bce_with_logits, cross_entropy, inverse_freq_weights, recon_loss, scalar, ssim, weighted_bce, ReconLoss,
    PERCEPTUAL_LEVELS,
};
pub use model::{
    LayoutSource, LgCvsModel, ModelConfig, Stage1Loss, Stage1Weights, Stage2Loss, Stage2Settings, CVS_PREFIX,
    DETECTOR_PREFIX, ENCODER_PREFIX, LG_BACKBONE_PREFIX, RECON_PREFIX,
};
pub use perturb::{edge_union_boxes, perturb_boxes};
