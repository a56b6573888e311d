//! Causal effect estimation for sponsored-search ad placement when the
//! click on one ad depends on the placement and features of the other ads
//! on the same page.
//!
//! Modules follow the pipeline: [`sem`] simulates pageviews and provides
//! ground truth, [`graph`] checks identification, [`models`] fits the
//! nuisance regressions, [`estimators`] turns them into counterfactual
//! means and effects, and [`discovery`] recovers each outcome's parents.

// numeric kernels index several parallel arrays by the same loop variable
#![allow(clippy::needless_range_loop)]

pub mod allocation;
pub mod dataset;
pub mod discovery;
pub mod error;
pub mod estimators;
pub mod graph;
pub mod math;
pub mod models;
pub mod rng;
pub mod sem;

pub use allocation::{enumerate_valid_rules, is_valid, AllocationRule};
pub use dataset::{Dataset, FeatureMatrix, Pageview};
pub use error::{Error, Result};
pub use sem::SemConfig;
