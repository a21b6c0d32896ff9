//! Non-learned point-set kernels: sampling, neighbour search, grouping and
//! feature interpolation. Everything here is a pure function of its inputs.

mod cloud;
mod neighbors;
mod sampling;

pub use cloud::{Point, PointCloud};
pub use neighbors::{
    group_local_frame, interpolate_features, interpolation_weights, knn_group, sample_and_group, InterpolationWeights,
    NeighborTable, SampleGrouping,
};
pub use sampling::farthest_point_sample;
