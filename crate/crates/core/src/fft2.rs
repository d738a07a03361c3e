//! Two-dimensional complex FFT on row-major buffers.
//!
//! The forward transform leaves the spectrum transposed (`cols × rows`); the
//! inverse expects that layout. Pointwise spectral products do not care, and
//! skipping the second transpose halves the memory traffic.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub struct Fft2 {
    rows: usize,
    cols: usize,
    fwd_rows: Arc<dyn Fft<f64>>,
    fwd_cols: Arc<dyn Fft<f64>>,
    inv_rows: Arc<dyn Fft<f64>>,
    inv_cols: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(rows: usize, cols: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            rows,
            cols,
            // a "row" transform runs along a row, i.e. has length `cols`
            fwd_rows: planner.plan_fft_forward(cols),
            fwd_cols: planner.plan_fft_forward(rows),
            inv_rows: planner.plan_fft_inverse(cols),
            inv_cols: planner.plan_fft_inverse(rows),
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Spatial `rows × cols` buffer in, transposed spectrum out.
    pub fn forward(&self, buf: &mut [Complex64], tmp: &mut [Complex64]) {
        debug_assert_eq!(buf.len(), self.len());
        self.fwd_rows.process(buf);
        transpose(buf, tmp, self.rows, self.cols);
        self.fwd_cols.process(tmp);
        buf.copy_from_slice(tmp);
    }

    /// Transposed spectrum in, spatial buffer out (normalized).
    pub fn inverse(&self, buf: &mut [Complex64], tmp: &mut [Complex64]) {
        debug_assert_eq!(buf.len(), self.len());
        self.inv_cols.process(buf);
        transpose(buf, tmp, self.cols, self.rows);
        self.inv_rows.process(tmp);
        let scale = 1.0 / self.len() as f64;
        for (b, t) in buf.iter_mut().zip(tmp.iter()) {
            *b = t * scale;
        }
    }
}

fn transpose(src: &[Complex64], dst: &mut [Complex64], rows: usize, cols: usize) {
    const BLOCK: usize = 16;
    for rb in (0..rows).step_by(BLOCK) {
        for cb in (0..cols).step_by(BLOCK) {
            for r in rb..(rb + BLOCK).min(rows) {
                for c in cb..(cb + BLOCK).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}
