//! The segmentation network: point MLP, sparse encoder/decoder with
//! asymmetric residual blocks, a bottleneck context module, a voxel logits
//! head and point-wise refinement.

pub mod blocks;
pub mod config;
pub mod features;
pub mod model;
pub mod params;

pub use blocks::{
    asym1d_res_block, asym_down_block, asym_res_block, asym_up_block, ddcm, point_refine,
    regular_res_block, StageRules,
};
pub use config::{BlockVariant, NetworkConfig};
pub use features::{point_input_features, point_mlp, POINT_FEATURES};
pub use model::{forward, ForwardOutput, Network, Scene, Tape, Topology};
pub use params::{ModelParams, ParamSet, Slot};

/// Whether normalization uses batch statistics (train) or running statistics (infer).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

impl Mode {
    pub fn is_training(self) -> bool {
        self == Mode::Train
    }
}
