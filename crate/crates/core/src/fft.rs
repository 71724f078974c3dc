//! Cached-plan 2D FFT helpers on square grids.
//!
//! All transforms are unscaled in the forward direction; the inverse applies
//! the 1/n² factor so that `ifft2(fft2(x)) == x`.

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

/// Planned forward/inverse FFTs for an n×n grid.
///
/// The plan itself is immutable and shareable; callers provide a [`FftScratch`]
/// so concurrent users do not contend on buffers.
#[derive(Clone)]
pub struct Fft2 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

/// Reusable working memory for [`Fft2`] calls.
pub struct FftScratch {
    transpose: Vec<Complex64>,
    inner: Vec<Complex64>,
}

impl Fft2 {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn make_scratch(&self) -> FftScratch {
        let inner_len = self
            .fwd
            .get_inplace_scratch_len()
            .max(self.inv.get_inplace_scratch_len());
        FftScratch {
            transpose: vec![Complex64::default(); self.n * self.n],
            inner: vec![Complex64::default(); inner_len],
        }
    }

    /// In-place forward 2D FFT of row-major `data` (length n²).
    pub fn forward(&self, data: &mut [Complex64], scratch: &mut FftScratch) {
        self.transform(data, scratch, true);
    }

    /// In-place inverse 2D FFT (scaled by 1/n²).
    pub fn inverse(&self, data: &mut [Complex64], scratch: &mut FftScratch) {
        self.transform(data, scratch, false);
        let scale = 1.0 / (self.n * self.n) as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }

    fn transform(&self, data: &mut [Complex64], scratch: &mut FftScratch, forward: bool) {
        let n = self.n;
        assert_eq!(data.len(), n * n, "fft2 buffer must be n*n");
        let plan = if forward { &self.fwd } else { &self.inv };
        // rows
        plan.process_with_scratch(data, &mut scratch.inner);
        // columns via transpose
        transpose(data, &mut scratch.transpose, n);
        plan.process_with_scratch(&mut scratch.transpose, &mut scratch.inner);
        transpose(&scratch.transpose, data, n);
    }
}

fn transpose(src: &[Complex64], dst: &mut [Complex64], n: usize) {
    for i in 0..n {
        for j in 0..n {
            dst[j * n + i] = src[i * n + j];
        }
    }
}

/// Circularly shift so the centered origin moves to index 0 (numpy `ifftshift`).
pub fn ifftshift(src: &[Complex64], dst: &mut [Complex64], n: usize) {
    shift_by(src, dst, n, n / 2);
}

/// Circularly shift so index 0 moves to the centered origin (numpy `fftshift`).
pub fn fftshift(src: &[Complex64], dst: &mut [Complex64], n: usize) {
    shift_by(src, dst, n, n.div_ceil(2));
}

fn shift_by(src: &[Complex64], dst: &mut [Complex64], n: usize, s: usize) {
    assert_eq!(src.len(), n * n);
    assert_eq!(dst.len(), n * n);
    for i in 0..n {
        let si = (i + s) % n;
        for j in 0..n {
            let sj = (j + s) % n;
            dst[i * n + j] = src[si * n + sj];
        }
    }
}
