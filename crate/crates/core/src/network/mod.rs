//! The four-level encoder-decoder assembled from the blocks.

mod config;
mod cost;
mod model;
mod pad;

pub use config::{NetworkConfig, LEVELS};
pub use cost::{cost_report, count_flops, CostReport, CostRow};
pub use model::{
    build_model, downsample, forward, forward_traced, skip_fuse, upsample, Layout, Model, Stage,
    SIZE_MULTIPLE,
};
pub use pad::{crop_top_left, reflect_pad, restore};
