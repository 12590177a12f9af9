//! Neural attenuation field: multiresolution hash encoding followed by a
//! small MLP, with coarse-to-fine level masking.

mod checkpoint;
mod config;
mod encoding;
mod mask;
mod network;
mod params;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, read_checkpoint_header, save_checkpoint, CheckpointHeader,
    CHECKPOINT_VERSION, MAGIC,
};
pub use config::{default_init_mu, FieldConfig, HashGridConfig, Layout};
pub use encoding::{encode, spatial_hash, vertex_entry, Encoding, HASH_PRIMES};
pub use mask::{level_mask, visible_levels, MaskSchedule};
pub use network::{
    field_backward, field_forward, render_ray, BatchTape, render_ray_backward, FieldEvaluator, FieldTape, RayTape, RayWorkspace,
};
pub(crate) use network::{render_backward_mlp, render_into, scatter_ray};
pub use params::{FieldGradients, FieldParams, TABLE_INIT};
