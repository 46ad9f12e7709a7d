pub mod exporter;
pub mod fields;
pub mod evaluate;
pub mod geometry;
pub mod lumigraph;
pub mod mesh;
pub mod objective;
pub mod real;
pub mod render;
pub mod scene_io;
pub mod sdf;
pub mod tracer;
pub mod trainer;
