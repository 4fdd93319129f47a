//! Simulation and learned joint optimization for an integrated sensing and
//! communication downlink whose transmitter uses pinching antennas on
//! dielectric waveguides and whose users carry movable antennas.
//!
//! Layers, bottom up:
//! - [`linalg`]: complex algebra on real matrices (widening, block log-det, real-only inversion)
//! - [`scenario`]: geometry, random scenarios and channel synthesis
//! - [`metrics`]: rates, sensing covariance, optimal combiner, SINR, training loss
//! - [`autodiff`]: reverse-mode differentiation over dense real tensors
//! - [`network`]: the three-block convolutional policy
//! - [`trainer`]: datasets, penalty-loss training with Adam, evaluation, checkpoints
//! - [`experiment`]: config files, sweeps and CSV reports

pub mod autodiff;
pub mod experiment;
pub mod linalg;
pub mod metrics;
pub mod network;
pub mod scenario;
pub mod trainer;
