//! Reconstruction drivers: neural field fitting and the SART / ASD-POCS
//! baselines.

mod convergence;
mod sart;
mod train;

pub use convergence::{convergence_epoch, convergence_epoch_of};
pub use sart::{
    asd_pocs, asd_pocs_observed, projection_residual_rms, sart, sart_pass, total_variation, tv_descent, tv_gradient,
    AsdPocsConfig, SartConfig, SartNormalization, TV_EPS,
};
pub use train::{
    batch_loss_and_grad, build_batch, extract_volume, finite_difference_check, initial_params, reconstruct_field, reconstruct_from,
    sample_pixels, BatchWork, FieldInit, GradientCheck, LogRecord, RayBatch, TrainConfig, TrainLog, Trainer,
};
