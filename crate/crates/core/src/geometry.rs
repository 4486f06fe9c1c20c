//! Gaze representations and the angular-error metric.
//!
//! Gaze is carried as a yaw/pitch pair in radians (`f32`, the storage type
//! of every label in the pipeline) and converted to a unit direction vector
//! (`f64`) for anything geometric. Conversions run in `f64` so that
//! round-trips stay within `1e-5` even close to the poles.

use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gaze as yaw (horizontal) and pitch (vertical) angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SphericalGaze {
    pub yaw: f32,
    pub pitch: f32,
}

impl SphericalGaze {
    pub const fn new(yaw: f32, pitch: f32) -> Self {
        Self { yaw, pitch }
    }

    pub fn is_finite(&self) -> bool {
        self.yaw.is_finite() && self.pitch.is_finite()
    }
}

/// A 3-vector in the normalized camera frame; unit-norm when produced by
/// [`to_direction`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DirectionVector {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl DirectionVector {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.dot(self))
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    fn normalized(self) -> Result<Self> {
        let n = self.norm();
        if !n.is_finite() {
            return Err(Error::invalid("direction vector is not finite"));
        }
        if n == 0.0 {
            return Err(Error::invalid("zero direction vector"));
        }
        Ok(Self::new(self.x / n, self.y / n, self.z / n))
    }
}

/// Angular distance between two directions, in degrees, within `[0, 180]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct AngularErrorDeg(pub f64);

impl AngularErrorDeg {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Spherical-to-Cartesian conversion: `(cos ψ sin θ, sin ψ, cos ψ cos θ)`.
pub fn to_direction(g: SphericalGaze) -> Result<DirectionVector> {
    if !g.is_finite() {
        return Err(Error::invalid("non-finite gaze angles"));
    }
    Ok(direction_unchecked(g))
}

pub(crate) fn direction_unchecked(g: SphericalGaze) -> DirectionVector {
    let (yaw, pitch) = (g.yaw as f64, g.pitch as f64);
    let cp = libm::cos(pitch);
    DirectionVector::new(cp * libm::sin(yaw), libm::sin(pitch), cp * libm::cos(yaw))
}

/// Inverse of [`to_direction`]. The input is normalized first; at the poles
/// yaw is not identifiable and is reported as 0.
pub fn to_spherical(v: DirectionVector) -> Result<SphericalGaze> {
    let v = v.normalized()?;
    let pitch = libm::asin(v.y.clamp(-1.0, 1.0));
    let horizontal = libm::hypot(v.x, v.z);
    let mut yaw = if horizontal <= 1e-12 {
        0.0
    } else {
        libm::atan2(v.x, v.z)
    };
    if yaw >= PI {
        yaw -= 2.0 * PI;
    }
    Ok(SphericalGaze::new(yaw as f32, pitch as f32))
}

/// Angle between the two directions in degrees, as `atan2(‖a×b‖, a·b)`
/// (well conditioned near 0° and 180°, exactly 0 for equal inputs).
pub fn angular_error(a: DirectionVector, b: DirectionVector) -> Result<AngularErrorDeg> {
    let [ax, ay, az] = a.normalized()?.to_array();
    let [bx, by, bz] = b.normalized()?.to_array();
    let cross = [ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx];
    let sin = libm::sqrt(cross.iter().map(|c| c * c).sum::<f64>());
    let cos = ax * bx + ay * by + az * bz;
    Ok(AngularErrorDeg(libm::atan2(sin, cos).to_degrees()))
}

/// Angular error between two yaw/pitch gazes, in degrees.
pub fn gaze_error_deg(a: SphericalGaze, b: SphericalGaze) -> Result<f64> {
    Ok(angular_error(to_direction(a)?, to_direction(b)?)?.value())
}

/// Cosine similarity of the two gaze directions, clamped to `[-1, 1]`.
pub fn cosine_sim(a: SphericalGaze, b: SphericalGaze) -> Result<f64> {
    let da = to_direction(a)?;
    let db = to_direction(b)?;
    Ok(da.dot(&db).clamp(-1.0, 1.0))
}
