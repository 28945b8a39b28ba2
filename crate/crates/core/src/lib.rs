//! Driving-style classification at roundabouts from trajectory data.
//!
//! The stages are independent and file-composable: [`ingest`] loads and
//! validates tracks, [`features`] computes the thirteen volatility measures,
//! [`cluster`] standardizes and runs K-means, [`label`] names the clusters,
//! [`interact`] finds vehicle-VRU encounters and [`report`] writes the
//! tables. [`pipeline`] chains them.

pub mod cluster;
pub mod config;
pub mod csvio;
pub mod features;
pub mod ingest;
pub mod interact;
pub mod label;
pub mod matrix;
pub mod pipeline;
pub mod report;
pub mod synthgen;
