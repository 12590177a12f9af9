//! Inner-loop optimizers and the outer meta-initialization loop.

mod adam;
mod meta;

pub use adam::{adam_step, AdamHyper, AdamState, OptimizerKind};
pub use meta::{
    load_corpus, meta_train, meta_train_bundles, reptile_outer_step, MetaConfig, MetaLog, MetaRecord, OuterSign,
};
