//! Scan alignment by rendering labeled free-space interface meshes and
//! scoring the rendered depth against a scan, with ICP baselines and an
//! evaluation pipeline.
//!
//! Everything is generic over the scalar type ([`scalar::Real`]); the
//! aliases below fix it to `f64` (or `f32` where that is useful).

pub mod cost;
pub mod depth;
pub mod filter;
pub mod geometry;
pub mod icp;
pub mod io;
pub mod meshify;
pub mod normals;
pub mod optimize;
pub mod pipeline;
pub mod raster;
pub mod scalar;
pub mod scene;

pub use scalar::Real;

pub type Pose = geometry::Pose6D<f64>;
pub type Transform = geometry::RigidTransform<f64>;
pub type Camera = geometry::CameraModel<f64>;
pub type Depth = depth::DepthImage<f64>;
pub type Mesh = meshify::LabeledMesh<f64>;
pub type Render = raster::LabeledRender<f64>;
pub type Normals = normals::NormalImage<f64>;
pub type Scene = scene::SceneSpec<f64>;
pub type Trajectory = io::Trajectory<f64>;
pub type Alignment = optimize::AlignmentResult<f64>;
pub type Record = pipeline::MatchRecord<f64>;

pub type Pose32 = geometry::Pose6D<f32>;
pub type Transform32 = geometry::RigidTransform<f32>;
pub type Camera32 = geometry::CameraModel<f32>;
pub type Depth32 = depth::DepthImage<f32>;
pub type Mesh32 = meshify::LabeledMesh<f32>;
pub type Render32 = raster::LabeledRender<f32>;
