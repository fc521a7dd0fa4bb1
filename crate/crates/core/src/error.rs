use thiserror::Error;

use crate::calib::GeometryError;
use crate::eval::EvalError;
use crate::frustum::FrustumError;
use crate::kitti_io::FormatError;
use crate::patch::PatchError;
use crate::synth::SynthError;

/// Crate-level error; every module error converts into it.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Frustum(#[from] FrustumError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Usage(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
