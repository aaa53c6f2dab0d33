//! Sinusoidal pose encoding.
//!
//! Each angle θ is expanded into `sin(kθ)` followed by `cos(kθ)` for integer
//! frequencies `k = 1..=dim/2`. Integer frequencies make the encoding exactly
//! 360°-periodic.

use ndarray::{s, Array1};

use crate::pose::EulerAngles;
use crate::{Error, Result};

pub type AngleEmbedding = Array1<f64>;

pub fn encode_angle(angle_deg: f64, dim: usize) -> Result<Array1<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "angle encoding dimension must be positive and even, got {dim}"
        )));
    }
    let mut out = Array1::zeros(dim);
    write_angle(angle_deg, out.as_slice_mut().expect("contiguous"));
    Ok(out)
}

fn write_angle(angle_deg: f64, out: &mut [f64]) {
    let half = out.len() / 2;
    let theta = angle_deg.to_radians();
    for k in 0..half {
        let (s, c) = (theta * (k + 1) as f64).sin_cos();
        out[k] = s;
        out[half + k] = c;
    }
}

/// Pitch, yaw and roll encodings concatenated, `dim / 3` slots each.
pub fn encode_euler(e: &EulerAngles, dim: usize) -> Result<AngleEmbedding> {
    if dim == 0 || dim % 6 != 0 {
        return Err(Error::InvalidArgument(format!(
            "euler encoding dimension must be a positive multiple of 6, got {dim}"
        )));
    }
    encode_euler_padded(e, dim)
}

/// Like [`encode_euler`] for any `dim >= 6`: each angle gets the largest even
/// budget `b` with `3b <= dim`, and the trailing `dim - 3b` slots stay zero.
pub fn encode_euler_padded(e: &EulerAngles, dim: usize) -> Result<AngleEmbedding> {
    if dim < 6 {
        return Err(Error::InvalidArgument(format!(
            "euler encoding needs at least 6 dimensions, got {dim}"
        )));
    }
    let budget = 2 * (dim / 6);
    let mut out = Array1::zeros(dim);
    for (axis, angle) in e.as_array().into_iter().enumerate() {
        let mut slot = out.slice_mut(s![axis * budget..(axis + 1) * budget]);
        write_angle(angle, slot.as_slice_mut().expect("contiguous"));
    }
    Ok(out)
}
