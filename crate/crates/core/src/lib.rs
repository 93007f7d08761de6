//! Differentiable inverse rendering of hybrid scenes: a dense grid SDF
//! unioned with two analytic eyeball spheres, a grid-backed reflectance
//! field and a co-located flash plus SH ambient light.

pub mod brdf;
pub mod dataset;
pub mod camera;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod evaluate;
pub mod export;
pub mod geometry;
pub mod gradcheck;
pub mod grid;
pub mod image;
pub mod lighting;
pub mod losses;
pub mod math;
pub mod objective;
pub mod optimizer;
pub mod relight;
pub mod rendering;
pub mod scene;

pub use error::{Error, Result};
pub use math::DVec3;
