//! Tree-ensemble learners.
//!
//! A CART-style regression-tree core backs two ensembles: sequential
//! gradient boosting with Huber loss for the shade model, and bagged random
//! forests (with proximity matrices) for agro-climatic zoning.
//!
//! Splits are exact: every midpoint between consecutive distinct sorted
//! feature values is a candidate, scored by weighted squared-error reduction
//! (class-count reduction for classification). All training is deterministic
//! given data, config and seed; split-search ties resolve to the lowest
//! feature index, then the lowest threshold.

mod forest;
mod gbr;
mod io;
mod tree;

pub use forest::{
    rf_fit, rf_predict, rf_predict_row, rf_proximity, rf_votes, ForestModel, ForestTask, RfConfig,
};
pub use gbr::{
    cross_validate, gbr_fit, gbr_predict, gbr_predict_row, huber_loss, CvResult, GbrConfig,
    GbrModel, Loss,
};
pub use io::{read_cgbm, write_cgbm};
pub use tree::{fit_tree, Dataset, Tree, TreeNode, TreeParams};
