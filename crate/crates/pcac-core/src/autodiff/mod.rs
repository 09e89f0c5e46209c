//! Minimal reverse-mode differentiation for sparse 3D convolutional networks.

mod adam;
mod ops;
mod param;
mod sparse;
mod tape;

pub use adam::Adam;
pub use ops::{
    masked_sparse_conv, residual_block, sparse_conv, sparse_relu, sparse_transpose_conv,
    ResBlockParams, SparseVar,
};
pub use param::{ParamId, ParamStore, ParameterTensor};
pub use sparse::{
    downsample_coords, kernel_offsets, CoordIndex, KernelMap, Mask, SparseTensor,
};
pub use tape::{NodeGrads, Tape, Var};

pub(crate) use param::read_u32;
pub(crate) use sparse::accumulate_row;
