//! canopy-ledger: mapping shade-tree cover and above-ground biomass from
//! multispectral raster inputs, with carbon-sequestration scenario accounting
//! and agro-climatic zoning.
//!
//! The crate is organized by pipeline stage:
//!
//! * [`raster`] — georeferenced float grids, the CGRD container format,
//!   resampling and windowed access.
//! * [`ingest`] — scene catalogs, image selection, per-pixel validity masks.
//! * [`groundtruth`] — drone DSM/DTM to canopy height, shade masks, per-cell
//!   shade fractions, threshold calibration.
//! * [`features`] — spectral indices and 425-dimensional neighborhood
//!   feature vectors.
//! * [`boosting`] — decision-tree core, gradient-boosted regression with
//!   Huber loss, random forests with proximity.
//! * [`shademap`] — shade model training/evaluation and map production.
//! * [`agbdnet`] — footprint filtering and the convolutional biomass network.
//! * [`carbon`] — map pairing, Bayesian quadratic regression by MCMC,
//!   sequestration scenarios, land-use carbon accounting.
//! * [`agroclim`] — bioclimatic variables, VIF selection, forest-dissimilarity
//!   clustering and zone classification.
//! * [`synth`] — deterministic synthetic-world generator for end-to-end runs.
//! * [`render`] — minimal PNG heatmap / bar-chart rasterizer.

pub mod agbdnet;
pub mod agroclim;
pub mod boosting;
pub mod carbon;
pub mod features;
pub mod groundtruth;
pub mod ingest;
pub mod raster;
pub mod render;
pub mod shademap;
pub mod synth;

mod error;

pub use error::{Error, Result};
