pub mod adam;
pub mod camera;
pub mod cli;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod format;
pub mod gradcheck;
pub mod img;
pub mod loss;
pub mod metrics;
pub mod raster;
pub mod scene;
pub mod service;
pub mod trainer;
