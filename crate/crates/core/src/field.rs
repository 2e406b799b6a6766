//! The query interface shared by every distance field in the crate.

use thiserror::Error;

use crate::geometry::{GeometryError, Point3};
use crate::gp::{FieldSample, GpError, LocalGpModel};

#[derive(Debug, Error)]
pub enum FieldError {
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Anything that answers continuous distance and gradient queries.
pub trait DistanceField {
    fn query(&self, x: &Point3) -> FieldSample;

    /// Order-preserving batch query.
    fn query_batch(&self, xs: &[Point3]) -> Vec<FieldSample> {
        xs.iter().map(|x| self.query(x)).collect()
    }
}

impl DistanceField for LocalGpModel {
    fn query(&self, x: &Point3) -> FieldSample {
        LocalGpModel::query(self, x)
    }
}

impl<T: DistanceField + ?Sized> DistanceField for &T {
    fn query(&self, x: &Point3) -> FieldSample {
        (**self).query(x)
    }

    fn query_batch(&self, xs: &[Point3]) -> Vec<FieldSample> {
        (**self).query_batch(xs)
    }
}

/// A field with no surfaces: every query returns the far sentinel.
#[derive(Debug, Clone, Copy, Default)]
pub struct EmptyField {
    pub params: crate::gp::KernelParams,
}

impl DistanceField for EmptyField {
    fn query(&self, _x: &Point3) -> FieldSample {
        FieldSample::far(&self.params)
    }
}
