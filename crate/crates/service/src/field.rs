//! Vector-field and variance rasters over a planar slice, recomputed from
//! the live policy on every request.

use pickteach::policy::{MudsPolicy, PolicyError};
use pickteach::sim::Vec3;

use crate::protocol::{FieldPoint, Slice};

/// Largest accepted grid, points per axis.
pub const MAX_RESOLUTION: usize = 400;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RasterError {
    #[error("slice.resolution must be between 1 and {MAX_RESOLUTION} per axis")]
    Resolution,
    #[error("slice.size must be finite and non-negative")]
    Size,
    #[error("slice.center must be finite")]
    Center,
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Grid positions in row order: the second in-plane axis is the outer loop.
/// Endpoints are included, a single point sits at the center.
pub fn grid(slice: &Slice) -> Result<Vec<Vec3>, RasterError> {
    let [nu, nv] = slice.resolution;
    if !(1..=MAX_RESOLUTION).contains(&nu) || !(1..=MAX_RESOLUTION).contains(&nv) {
        return Err(RasterError::Resolution);
    }
    if !slice.size.iter().all(|s| s.is_finite() && *s >= 0.0) {
        return Err(RasterError::Size);
    }
    if !slice.center.iter().all(|c| c.is_finite()) {
        return Err(RasterError::Center);
    }
    let (a, b) = slice.plane.axes();
    let coord = |n: usize, k: usize, size: f64| {
        if n == 1 {
            0.0
        } else {
            -0.5 * size + size * k as f64 / (n - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(nu * nv);
    for j in 0..nv {
        for i in 0..nu {
            let mut p = slice.center;
            p[a] += coord(nu, i, slice.size[0]);
            p[b] += coord(nv, j, slice.size[1]);
            out.push(p);
        }
    }
    Ok(out)
}

/// Evaluates the attractor at every grid point of the slice.
pub fn raster(
    policy: &MudsPolicy,
    slice: &Slice,
    stiffness: &Vec3,
) -> Result<Vec<FieldPoint>, RasterError> {
    let frame = slice.frame.unwrap_or_else(|| policy.select_frame(false));
    grid(slice)?
        .into_iter()
        .map(|x| {
            let cmd = policy.compute_attractor(frame, &x, stiffness)?;
            let step = cmd.x_des - x;
            let magnitude = step.norm();
            let direction = if magnitude > 0.0 {
                step / magnitude
            } else {
                Vec3::zeros()
            };
            Ok(FieldPoint {
                position: x,
                direction,
                magnitude,
                variance: cmd.diagnostics.variance,
                confidence_ok: cmd.confidence_ok,
            })
        })
        .collect()
}
