//! Point-cloud anomaly detection by group-center-preserving down-sampling
//! and multi-scale up-sampling reconstruction.
//!
//! A cloud is normalized, split into FPS-centered patches, corrupted with
//! Gaussian noise and passed through the Down-Net, which predicts the clean
//! patch centers. The Up-Net densifies those centers into a reconstruction,
//! and per-point anomaly scores are nearest-neighbor distances from the
//! input to that reconstruction.

pub mod config;
pub mod down_net;
pub mod error;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod noise;
pub mod nn;
pub mod pipeline;
pub mod scoring;
pub mod synth;
pub mod up_net;

pub use down_net::{down_forward, train_down, CenterPrediction, DownNetConfig, DownNetModel};
pub use error::{Error, Result};
pub use geometry::{fps, group, knn, normalize, NormalizationParams, Patch, PatchSet, Point3, PointCloud};
pub use noise::{inject, NoiseKind, NoiseParams, NoisyPatchSet};
pub use scoring::{infer, AnomalyReport};
pub use up_net::{tri_interpolate, up_forward, train_up, UpNetConfig, UpNetModel, UpOutput};
