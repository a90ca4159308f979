//! SfM-supervised local feature learning toolkit.
//!
//! The pipeline: read a COLMAP sparse reconstruction, reproject its 3D points
//! into every frame to obtain reliable tracks, build training batches with a
//! detection + tracking loss, train a small detector/descriptor network, and
//! evaluate features through brute-force / guided matching and a set of
//! reconstruction quality metrics. A synthetic tubular-scene generator
//! provides ground truth for end-to-end verification.

pub mod colmap;
pub mod geometry;
pub mod loss;
pub mod matching;
pub mod metrics;
pub mod refnet;
pub mod supervision;
pub mod synth;
pub mod tracks;
