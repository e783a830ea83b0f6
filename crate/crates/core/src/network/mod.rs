//! Toy dual-pathway 3D CNN with dense-CRF refinement.

mod crf;
mod infer;
mod io;
mod model;
pub mod ops;
mod train;

pub use crf::{crf_marginals, crf_refine, crf_refine_local, pairwise_kernel, CrfParams, CRF_MAX_VOXELS, PROB_FLOOR};
pub use infer::{infer_dense, infer_dense_tiled, ProbabilityMap};
pub use io::{load_network, payload_sha256, save_network};
pub use model::{
    batch_loss_and_gradients, build_network, check_pathway_coverage, forward_patch, patch_index_maps, ConvLayer,
    NetConfig, Network, UpsamplePolicy, CONV_LAYERS,
};
pub use ops::{ConvWeights, FeatureMap};
pub use train::{train, train_with_monitor, TrainReport};
