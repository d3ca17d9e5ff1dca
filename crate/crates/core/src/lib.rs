//! RGB-thermal crowd counting with count-token-guided multi-scale token
//! fusion and deformable count enhancement, trained with a
//! distribution-matching loss and evaluated with GAME/RMSE.
//!
//! Everything runs in `f64` on the CPU on a small reverse-mode autodiff tape
//! ([`autodiff`]). [`synth`] generates RGB-T scenes with point labels so the
//! whole pipeline can be trained and tested without external data.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod deform;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod mst;
pub mod nn;
pub mod params;
pub mod render;
pub mod synth;
pub mod train;

pub use autodiff::{Graph, Tensor, Var};
pub use checkpoint::Checkpoint;
pub use config::{RunConfig, Variant};
pub use error::{Error, Result};
pub use head::DensityMap;
pub use losses::{LossConfig, LossReport};
pub use metrics::MetricReport;
pub use model::{CrowdCounter, Prediction};
pub use params::ParamStore;
pub use synth::{Point, Sample, ScenePair};
