//! Photometric single-view depth reconstruction for endoscope-like
//! camera/light rigs.
//!
//! The crate covers the full pipeline:
//!
//! * [`camera`] — fisheye geometry (projection, unprojection, undistortion).
//! * [`photometry`] — the calibrated image-formation model.
//! * [`render`] — analytic synthetic scenes and forward rendering.
//! * [`calibration`] — joint recovery of spread, gamma, per-frame gains and
//!   an optional sampled BRDF from point observations.
//! * [`depth`] — variational single-view depth estimation with
//!   edge-aware smoothness and three depth parameterizations.
//! * [`preprocess`] — illumination compensation, highlight detection and
//!   harmonic inpainting.
//! * [`metrics`] — depth and normal accuracy evaluation.
//! * [`io`] — the text, CSV, PNG and float-grid file formats shared with
//!   the command-line tools.

pub mod calibration;
pub mod camera;
pub mod depth;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod photometry;
pub mod preprocess;
pub mod render;

pub use camera::{CameraIntrinsics, PinholeIntrinsics, RayGrid};
pub use grid::{Grid, Image, Mask};
pub use photometry::{Brdf, BrdfTable, PhotometricModel};
