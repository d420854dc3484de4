#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diff;
pub mod error;
mod fft;
pub mod gradient_mapper;
pub mod io;
pub mod kv;
pub mod palm_control;
pub mod proximity;
pub mod raster;
pub mod scene_sim;
pub mod surface_recon;
pub mod tactile_calib;
pub mod tactile_render;
pub mod texture;

pub use error::{Error, Result};
pub use raster::{DepthMap, GradientField, HeightMap, RasterImage, ScalarField, SegMask};
