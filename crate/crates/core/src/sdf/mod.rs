//! Ground-truth generation: analytic shapes, baked grids, training point
//! sets, depth rendering and the completion point sets.

mod depth;
mod grid;
mod nn;
mod points;
mod shape;

pub use depth::{
    completion_point_sets, ground_truth, render_depth, trace_ray, Camera, CameraSpec, DepthObservation, Visibility,
    FREE_SPACE_FRACTION, VISIBILITY_TOLERANCE,
};
pub use grid::{bake_grid, ScalarGrid3};
pub use nn::{brute_force_nearest, nn_distance, NearestNeighbors};
pub use points::{
    sample_near_surface, sample_uniform, truncated_sdf, PointBatch, PointRole, MAX_REJECTIONS, NEAR_SURFACE_BAND,
    NEAR_SURFACE_JITTER,
};
pub use shape::{random_shape, Shape, Vec3};
