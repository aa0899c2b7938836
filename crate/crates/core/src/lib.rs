//! Weighted GEE estimation for longitudinal clustered SMARTs, plus a trial
//! simulator whose marginal law matches a target mean/covariance structure.

pub mod data;
pub mod design;
pub mod mean_model;
pub mod working_cov;
pub mod gee;
pub mod sim;
