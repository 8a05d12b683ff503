use super::{c, Matrix, Real};
use crate::error::{Error, Result};

/// RMSNorm epsilon used everywhere in the model.
pub const RMS_EPS: f64 = 1e-6;

/// `y_i = gain_i · x_i / sqrt(mean(x²) + eps)`.
pub fn rms_norm<T: Real>(x: &[T], gain: &[T], eps: T) -> Result<Vec<T>> {
    if x.len() != gain.len() || x.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "rms_norm",
            left: (1, x.len()),
            right: (1, gain.len()),
        });
    }
    if !(eps > T::zero()) {
        return Err(Error::config("rms_norm eps must be positive"));
    }
    if x.iter().chain(gain).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rms_norm input"));
    }
    let inv = inv_rms(x, eps);
    Ok(x.iter().zip(gain).map(|(&v, &g)| g * v * inv).collect())
}

#[inline]
fn inv_rms<T: Real>(x: &[T], eps: T) -> T {
    let n = T::from_usize(x.len()).expect("length fits");
    let ms = x.iter().map(|&v| v * v).sum::<T>() / n;
    T::one() / (ms + eps).sqrt()
}

/// Row-wise RMSNorm; returns the normalized rows and each row's `1/rms`.
pub(crate) fn rms_norm_rows<T: Real>(x: &Matrix<T>, gain: &Matrix<T>) -> (Matrix<T>, Vec<T>) {
    let eps = c::<T>(RMS_EPS);
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut invs = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let inv = inv_rms(row, eps);
        for ((o, &v), &g) in out.row_mut(i).iter_mut().zip(row).zip(gain.data()) {
            *o = g * v * inv;
        }
        invs.push(inv);
    }
    (out, invs)
}

/// Backward of [`rms_norm_rows`]. Accumulates into `dgain`, returns `dx`.
pub(crate) fn rms_norm_rows_backward<T: Real>(
    x: &Matrix<T>,
    gain: &Matrix<T>,
    inv_rms: &[T],
    dy: &Matrix<T>,
    dgain: &mut Matrix<T>,
) -> Matrix<T> {
    let d = T::from_usize(x.cols()).expect("width fits");
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let (xr, dyr, r) = (x.row(i), dy.row(i), inv_rms[i]);
        let mut dot = T::zero();
        for j in 0..xr.len() {
            let gdy = gain.data()[j] * dyr[j];
            dot += gdy * xr[j];
            dgain.data_mut()[j] += dyr[j] * xr[j] * r;
        }
        let k = r * r * r * dot / d;
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = r * gain.data()[j] * dyr[j] - k * xr[j];
        }
    }
    dx
}

/// Softmax over the positions where `mask` is true; masked positions are
/// exactly zero.
pub fn softmax_masked<T: Real>(scores: &[T], mask: &[bool]) -> Result<Vec<T>> {
    if scores.len() != mask.len() {
        return Err(Error::ShapeMismatch {
            op: "softmax_masked",
            left: (1, scores.len()),
            right: (1, mask.len()),
        });
    }
    if scores.iter().zip(mask).any(|(s, &m)| m && !s.is_finite()) {
        return Err(Error::NonFinite("softmax scores"));
    }
    let max = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&s, _)| s)
        .fold(None, |acc: Option<T>, s| Some(acc.map_or(s, |a| a.max(s))))
        .ok_or(Error::AllMasked)?;
    let mut out: Vec<T> = scores
        .iter()
        .zip(mask)
        .map(|(&s, &m)| if m { (s - max).exp() } else { T::zero() })
        .collect();
    let sum: T = out.iter().copied().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// In-place softmax over `row[..limit]`; the rest of the row is zeroed.
/// Every attention mask in the model is a per-row prefix.
#[inline]
pub(crate) fn softmax_prefix_in_place<T: Real>(row: &mut [T], limit: usize) -> Result<()> {
    if limit == 0 {
        return Err(Error::AllMasked);
    }
    let (live, dead) = row.split_at_mut(limit);
    let max = live.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in live.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in live.iter_mut() {
        *v /= sum;
    }
    dead.fill(T::zero());
    Ok(())
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

/// d/dx of `x·σ(x)`.
#[inline]
pub fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
