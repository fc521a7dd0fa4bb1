//! Stereo RoI matching for LiDAR frustum segmentation.
//!
//! Given 2D detections in the left and right views of a calibrated stereo
//! rig and a LiDAR scan, the matchers in [`matcher`] pair left and right
//! RoIs using epipolar geometry plus either a point-set 3D IoU cost or a
//! normalized cross-correlation cost. Each accepted pair is turned into a
//! segment: the LiDAR points that fall inside both view frustums.
//!
//! Module map:
//!
//! * [`kitti_io`] - calibration, velodyne, detection and output formats
//! * [`calib`] - intrinsics, stereo translation, fundamental matrix, projection
//! * [`frustum`] - box enlargement, frustum inliers, set costs
//! * [`patch`] - RoI patches, alignment and ZNCC
//! * [`matcher`] - 3DCES, 3DCME, RSC and RSCCC
//! * [`synth`] - seeded synthetic scenes with ground-truth pairs
//! * [`eval`] - precision/recall, point filtering ratio, phase benchmarks
//! * [`cli`] - the `sfmatch` command line

pub mod calib;
pub mod cli;
pub mod error;
pub mod eval;
pub mod frustum;
pub mod kitti_io;
pub mod matcher;
pub mod patch;
pub mod synth;

pub use calib::{CalibrationSet, EpipolarLine};
pub use error::{Error, Result};
pub use frustum::{BBox2D, FrustumInliers, MatchConfig};
pub use kitti_io::{Detection2D, PointCloud, RawCalibration, View};
pub use matcher::{Algorithm, CostKind, MatchPair, MatchSet, Segment, StereoFrame};
