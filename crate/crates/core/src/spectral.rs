//! Multi-axis real discrete Fourier transforms.
//!
//! Conventions used everywhere in the crate:
//!
//! * forward transforms are unnormalized, `X_n = sum_k x_k exp(-2 pi i k n / N)`;
//! * inverse transforms carry the `1/N` factor for every transformed axis;
//! * the highest-numbered transformed axis is stored as a half spectrum of
//!   `N/2 + 1` bins, all other transformed axes keep their full extent.
//!
//! The inverse follows the usual complex-to-real semantics: imaginary parts
//! of self-conjugate bins (DC and, for even `N`, Nyquist) along the halved
//! axis are ignored. Under that rule `irdft(Z)` equals the real part of the
//! full complex inverse of the Hermitian extension of `Z`.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{arg_err, shape_err, Result};
use crate::field::{ComplexField, Field};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// Number of retained bins for a real transform of length `n`.
pub fn half_len(n: usize) -> usize {
    n / 2 + 1
}

/// Whether bin `k` of a length-`n` half spectrum is its own conjugate mirror.
pub fn self_conjugate(k: usize, n: usize) -> bool {
    k == 0 || (n % 2 == 0 && k == n / 2)
}

/// Sorted, deduplicated, range-checked transform axes.
fn normalize_axes(axes: &[usize], rank: usize) -> Result<Vec<usize>> {
    if axes.is_empty() {
        return arg_err("transform needs at least one axis");
    }
    let mut a = axes.to_vec();
    a.sort_unstable();
    a.dedup();
    if let Some(&bad) = a.iter().find(|&&x| x >= rank) {
        return arg_err(format!("axis {bad} out of range for rank {rank}"));
    }
    Ok(a)
}

/// Shape of `rdft(f, axes)` for a real input of shape `shape`.
pub fn half_spectrum_shape(shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    let axes = normalize_axes(axes, shape.len())?;
    let last = *axes.last().unwrap();
    let mut out = shape.to_vec();
    out[last] = half_len(shape[last]);
    Ok(out)
}

/// Runs a complex FFT along every lane of `axis` in interleaved storage.
fn fft_axis(shape: &[usize], data: &mut [f64], axis: usize, inverse: bool) {
    let n = shape[axis];
    if n <= 1 {
        return;
    }
    let fft = plan(n, inverse);
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut lane = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| 2 * ((o * n + k) * inner + i);
            for (k, z) in lane.iter_mut().enumerate() {
                let p = at(k);
                *z = Complex64::new(data[p], data[p + 1]);
            }
            fft.process_with_scratch(&mut lane, &mut scratch);
            for (k, z) in lane.iter().enumerate() {
                let p = at(k);
                data[p] = z.re;
                data[p + 1] = z.im;
            }
        }
    }
}

/// Forward real transform over `axes`.
pub fn rdft(f: &Field, axes: &[usize]) -> Result<ComplexField> {
    let axes = normalize_axes(axes, f.rank())?;
    let shape = f.shape();
    let last = *axes.last().unwrap();
    let n = shape[last];
    if axes.iter().any(|&a| shape[a] == 0) {
        return shape_err("transform over an empty axis");
    }
    let nh = half_len(n);
    let mut out_shape = shape.to_vec();
    out_shape[last] = nh;
    let mut out = ComplexField::zeros(&out_shape);
    let inner: usize = shape[last + 1..].iter().product();
    let outer: usize = shape[..last].iter().product();
    let fft = plan(n, false);
    let mut lane = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let src = f.data();
    let dst = out.raw_mut();
    for o in 0..outer {
        for i in 0..inner {
            for (k, z) in lane.iter_mut().enumerate() {
                *z = Complex64::new(src[(o * n + k) * inner + i], 0.0);
            }
            fft.process_with_scratch(&mut lane, &mut scratch);
            for (k, z) in lane.iter().take(nh).enumerate() {
                let p = 2 * ((o * nh + k) * inner + i);
                dst[p] = z.re;
                dst[p + 1] = z.im;
            }
        }
    }
    for &a in axes.iter().rev().skip(1) {
        fft_axis(&out_shape, dst, a, false);
    }
    Ok(out)
}

/// Inverse of [`rdft`]; `extents` is the shape of the original real field.
pub fn irdft(cf: &ComplexField, axes: &[usize], extents: &[usize]) -> Result<Field> {
    let axes = normalize_axes(axes, extents.len())?;
    let expected = half_spectrum_shape(extents, &axes)?;
    if cf.shape() != expected.as_slice() {
        return shape_err(format!(
            "half spectrum {:?} does not match extents {extents:?} (expected {expected:?})",
            cf.shape()
        ));
    }
    let last = *axes.last().unwrap();
    let n = extents[last];
    let nh = half_len(n);
    let mut work = cf.raw().to_vec();
    for &a in axes.iter().rev().skip(1) {
        fft_axis(&expected, &mut work, a, true);
    }
    let inner: usize = extents[last + 1..].iter().product();
    let outer: usize = extents[..last].iter().product();
    let fft = plan(n, true);
    let mut lane = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut out = vec![0.0; extents.iter().product()];
    let norm: f64 = 1.0 / axes.iter().map(|&a| extents[a] as f64).product::<f64>();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| 2 * ((o * nh + k) * inner + i);
            for k in 0..nh {
                let p = at(k);
                let im = if self_conjugate(k, n) { 0.0 } else { work[p + 1] };
                lane[k] = Complex64::new(work[p], im);
            }
            for k in nh..n {
                lane[k] = lane[n - k].conj();
            }
            fft.process_with_scratch(&mut lane, &mut scratch);
            for (k, z) in lane.iter().enumerate() {
                out[(o * n + k) * inner + i] = z.re * norm;
            }
        }
    }
    Field::new(extents.to_vec(), out)
}

/// Rescales the non-self-conjugate bins of the halved axis by `factor`.
fn scale_mirrored_bins(cf: &mut ComplexField, last: usize, n: usize, factor: f64) {
    let shape = cf.shape().to_vec();
    let nh = shape[last];
    let inner: usize = shape[last + 1..].iter().product();
    let outer: usize = shape[..last].iter().product();
    let raw = cf.raw_mut();
    for o in 0..outer {
        for k in 0..nh {
            if self_conjugate(k, n) {
                continue;
            }
            let start = 2 * ((o * nh + k) * inner);
            for v in &mut raw[start..start + 2 * inner] {
                *v *= factor;
            }
        }
    }
}

/// Adjoint (transpose) of [`rdft`] viewed as a real-linear map from the
/// input field to the interleaved half spectrum.
pub fn rdft_adjoint(grad: &ComplexField, axes: &[usize], extents: &[usize]) -> Result<Field> {
    let axes = normalize_axes(axes, extents.len())?;
    let last = *axes.last().unwrap();
    let mut g = grad.clone();
    scale_mirrored_bins(&mut g, last, extents[last], 0.5);
    let total: f64 = axes.iter().map(|&a| extents[a] as f64).product();
    Ok(irdft(&g, &axes, extents)?.scale(total))
}

/// Adjoint of [`irdft`]: maps a gradient on the real output back onto the
/// interleaved half spectrum.
pub fn irdft_adjoint(grad: &Field, axes: &[usize]) -> Result<ComplexField> {
    let axes = normalize_axes(axes, grad.rank())?;
    let last = *axes.last().unwrap();
    let total: f64 = axes.iter().map(|&a| grad.shape()[a] as f64).product();
    let mut s = rdft(grad, &axes)?;
    scale_mirrored_bins(&mut s, last, grad.shape()[last], 2.0);
    for v in s.raw_mut() {
        *v /= total;
    }
    Ok(s)
}

/// Brute-force circular convolution over `axes` by direct summation:
/// `out[i] = sum_j f[j] * kernel[(i - j) mod N]`. The kernel is shaped like
/// the convolved axes and is shared across every other axis.
pub fn circular_convolve_oracle(f: &Field, kernel: &Field, axes: &[usize]) -> Result<Field> {
    let axes = normalize_axes(axes, f.rank())?;
    let conv_ext: Vec<usize> = axes.iter().map(|&a| f.shape()[a]).collect();
    if kernel.shape() != conv_ext.as_slice() {
        return shape_err(format!(
            "kernel {:?} does not match convolved extents {conv_ext:?}",
            kernel.shape()
        ));
    }
    let shape = f.shape().to_vec();
    let mut out = Field::zeros(&shape);
    let mut src = vec![0usize; shape.len()];
    let mut kidx = vec![0usize; axes.len()];
    let mut jidx = vec![0usize; axes.len()];
    crate::field::for_each_index(&shape, |i| {
        let mut acc = 0.0;
        jidx.iter_mut().for_each(|v| *v = 0);
        loop {
            src.copy_from_slice(i);
            for (q, &a) in axes.iter().enumerate() {
                src[a] = jidx[q];
                let n = conv_ext[q];
                kidx[q] = (i[a] + n - jidx[q]) % n;
            }
            acc += f.get(&src) * kernel.get(&kidx);
            if !crate::field::next_index(&mut jidx, &conv_ext) {
                break;
            }
        }
        out.set(i, acc);
    });
    Ok(out)
}
