//! Saliency maps as spatial point processes.
//!
//! Raw saliency maps are converted into per-pixel fixation densities and
//! scored by log-likelihood in bits per fixation, relative to a uniform
//! model. Reference models bound the scale from below (an
//! image-independent histogram) and from above (a leave-one-subject-out
//! kernel density estimate), per-pixel information-gain maps show where a
//! model loses information, and a self-exciting extension conditions each
//! fixation on its predecessor.

pub mod baselines;
pub mod calibration;
pub mod density;
pub mod domain;
pub mod error;
pub mod grid;
pub mod io;
pub mod maps;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod reporting;
pub mod synth;
pub mod temporal;

pub use density::DensityGrid;
pub use domain::{Dataset, Fixation, FixationTrain, ImageFrame, SaliencyMap};
pub use error::{Error, Result};
pub use grid::Grid;
