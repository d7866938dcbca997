// `!(x > 0.0)` also rejects NaN in config validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod config;
pub mod dataset;
pub mod discovery;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod nn;
pub mod objectness;
pub mod patches;
pub mod pipeline;
pub mod render;
pub mod synth;
pub mod util;

pub use error::{Error, Result};
pub use geometry::{iou, Rect};
