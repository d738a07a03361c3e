//! Imaging operator `X ↦ T(A∗X) + b`, its adjoint, and the noise channels.
//!
//! Each depth plane of the volume is convolved with its PSF slice and the
//! planes are summed. Convolution is linear (zero-padded) and cropped to the
//! image, so sources near the border lose the part of their PSF that falls
//! outside the frame. The slice origin is its centre pixel `(H/2, W/2)`.
//!
//! Two real planes are packed into one complex transform: with
//! `S = FFT(k_a − i k_b)`, the forward image is `Re IFFT(Σ FFT(x_a + i x_b)·S)`
//! and the adjoint pair is `IFFT(Y·conj(S)) = u_a + i u_b`.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft2::Fft2;
use crate::numeric::fast_len;
use crate::optics::PsfDictionary;

/// Nonnegative source-flux volume, stored plane-major as `(D, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    data: Array3<f64>,
}

impl Volume {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Domain(format!("volume entry {v} is not a nonnegative number")));
        }
        Ok(Volume { data })
    }

    /// `grid` is `(H, W, D)`.
    pub fn zeros(grid: (usize, usize, usize)) -> Self {
        let (h, w, d) = grid;
        Volume {
            data: Array3::zeros((d, h, w)),
        }
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn view(&self) -> ArrayView3<'_, f64> {
        self.data.view()
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.data
    }

    /// `(H, W, D)`.
    pub fn grid(&self) -> (usize, usize, usize) {
        let (d, h, w) = self.data.dim();
        (h, w, d)
    }

    pub fn total(&self) -> f64 {
        self.data.sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageKind {
    Clean,
    Observed,
}

/// How the Gaussian standard deviation is specified.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sigma {
    Absolute(f64),
    /// Fraction of the clean image's maximum pixel (`σ = f·I_max`).
    FractionOfMax(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum NoiseKind {
    Gaussian { sigma: Sigma },
    Poisson,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    #[serde(flatten)]
    pub kind: NoiseKind,
    /// Constant background photon level `b`.
    pub background: f64,
}

impl NoiseModel {
    pub fn poisson(background: f64) -> Self {
        NoiseModel {
            kind: NoiseKind::Poisson,
            background,
        }
    }

    pub fn gaussian(sigma: Sigma, background: f64) -> Self {
        NoiseModel {
            kind: NoiseKind::Gaussian { sigma },
            background,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.background >= 0.0) || !self.background.is_finite() {
            return Err(Error::Config(format!(
                "background must be nonnegative, got {}",
                self.background
            )));
        }
        if let NoiseKind::Gaussian { sigma } = self.kind {
            let v = match sigma {
                Sigma::Absolute(s) | Sigma::FractionOfMax(s) => s,
            };
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("Gaussian sigma must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            NoiseKind::Gaussian { .. } => "gaussian",
            NoiseKind::Poisson => "poisson",
        }
    }

    /// The scalar reported as "noise level": the σ setting for
    /// Gaussian noise, the background for Poisson noise.
    pub fn level(&self) -> f64 {
        match self.kind {
            NoiseKind::Gaussian {
                sigma: Sigma::Absolute(s) | Sigma::FractionOfMax(s),
            } => s,
            NoiseKind::Poisson => self.background,
        }
    }
}

/// Provenance carried alongside an image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub noise: Option<NoiseModel>,
    /// Resolved Gaussian standard deviation.
    pub sigma: Option<f64>,
    /// Maximum of the clean image σ was derived from.
    pub i_max: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub data: Array2<f64>,
    pub kind: ImageKind,
    pub meta: ImageMeta,
}

impl Image {
    pub fn clean(data: Array2<f64>) -> Self {
        Image {
            data,
            kind: ImageKind::Clean,
            meta: ImageMeta::default(),
        }
    }

    pub fn observed(data: Array2<f64>) -> Self {
        Image {
            data,
            kind: ImageKind::Observed,
            meta: ImageMeta::default(),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Precomputed spectral form of a PSF dictionary.
pub struct ForwardOperator {
    h: usize,
    w: usize,
    d: usize,
    fft: Fft2,
    /// Transposed spectra of the packed kernels, one per pair of planes.
    packed: Vec<Vec<Complex64>>,
    column_norms: Array3<f64>,
}

impl ForwardOperator {
    pub fn new(dict: &PsfDictionary) -> Self {
        let slices = dict.slices();
        let (d, h, w) = slices.dim();
        let (cr, cc) = (h / 2, w / 2);
        let pr = fast_len((h + cr).max(2 * h - 1 - cr));
        let pc = fast_len((w + cc).max(2 * w - 1 - cc));
        let fft = Fft2::new(pr, pc);
        let mut tmp = vec![Complex64::new(0.0, 0.0); pr * pc];

        let mut packed = Vec::with_capacity(d.div_ceil(2));
        for pair in 0..d.div_ceil(2) {
            let mut buf = vec![Complex64::new(0.0, 0.0); pr * pc];
            for (part, k) in [(1.0, 2 * pair), (-1.0, 2 * pair + 1)] {
                if k >= d {
                    continue;
                }
                let slice = slices.index_axis(Axis(0), k);
                for ((m, n), &v) in slice.indexed_iter() {
                    // kernel offset (m − cr, n − cc), wrapped onto the padded grid
                    let r = (m + pr - cr) % pr;
                    let c = (n + pc - cc) % pc;
                    if part > 0.0 {
                        buf[r * pc + c].re += v;
                    } else {
                        buf[r * pc + c].im -= v;
                    }
                }
            }
            fft.forward(&mut buf, &mut tmp);
            packed.push(buf);
        }

        ForwardOperator {
            h,
            w,
            d,
            fft,
            packed,
            column_norms: column_norms_direct(slices.view()),
        }
    }

    /// `(H, W, D)`.
    pub fn grid(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.d)
    }

    /// Padded transform size `(rows, cols)`.
    pub fn padded(&self) -> (usize, usize) {
        (self.fft.rows(), self.fft.cols())
    }

    fn check_volume(&self, x: &ArrayView3<'_, f64>) -> Result<()> {
        if x.dim() != (self.d, self.h, self.w) {
            return Err(Error::shape((self.d, self.h, self.w), x.dim()));
        }
        Ok(())
    }

    fn check_image(&self, y: &ArrayView2<'_, f64>) -> Result<()> {
        if y.dim() != (self.h, self.w) {
            return Err(Error::shape((self.h, self.w), y.dim()));
        }
        Ok(())
    }

    /// Linear part `T(A∗x)` for any (possibly signed) `x`.
    pub fn apply(&self, x: ArrayView3<'_, f64>) -> Result<Array2<f64>> {
        self.check_volume(&x)?;
        let (pr, pc) = self.padded();
        let n = pr * pc;
        let zero = Complex64::new(0.0, 0.0);
        let mut acc = vec![zero; n];
        let mut buf = vec![zero; n];
        let mut tmp = vec![zero; n];
        for (pair, spectrum) in self.packed.iter().enumerate() {
            buf.fill(zero);
            let a = x.index_axis(Axis(0), 2 * pair);
            for ((r, c), &v) in a.indexed_iter() {
                buf[r * pc + c].re = v;
            }
            if 2 * pair + 1 < self.d {
                let b = x.index_axis(Axis(0), 2 * pair + 1);
                for ((r, c), &v) in b.indexed_iter() {
                    buf[r * pc + c].im = v;
                }
            }
            self.fft.forward(&mut buf, &mut tmp);
            for ((s, k), b) in acc.iter_mut().zip(spectrum.iter()).zip(buf.iter()) {
                *s += b * k;
            }
        }
        self.fft.inverse(&mut acc, &mut tmp);
        Ok(Array2::from_shape_fn((self.h, self.w), |(r, c)| acc[r * pc + c].re))
    }

    /// Clean image `T(A∗x) + b`.
    pub fn forward(&self, x: &Volume, background: f64) -> Result<Image> {
        let mut img = self.apply(x.view())?;
        img.mapv_inplace(|v| v + background);
        Ok(Image::clean(img))
    }

    /// Adjoint of [`apply`](Self::apply).
    pub fn adjoint(&self, y: ArrayView2<'_, f64>) -> Result<Array3<f64>> {
        self.check_image(&y)?;
        let (pr, pc) = self.padded();
        let n = pr * pc;
        let zero = Complex64::new(0.0, 0.0);
        let mut spec = vec![zero; n];
        let mut buf = vec![zero; n];
        let mut tmp = vec![zero; n];
        for ((r, c), &v) in y.indexed_iter() {
            spec[r * pc + c].re = v;
        }
        self.fft.forward(&mut spec, &mut tmp);
        let mut out = Array3::zeros((self.d, self.h, self.w));
        for (pair, kernel) in self.packed.iter().enumerate() {
            for ((b, s), k) in buf.iter_mut().zip(spec.iter()).zip(kernel.iter()) {
                *b = s * k.conj();
            }
            self.fft.inverse(&mut buf, &mut tmp);
            let k = 2 * pair;
            for r in 0..self.h {
                for c in 0..self.w {
                    out[[k, r, c]] = buf[r * pc + c].re;
                }
            }
            if k + 1 < self.d {
                for r in 0..self.h {
                    for c in 0..self.w {
                        out[[k + 1, r, c]] = buf[r * pc + c].im;
                    }
                }
            }
        }
        Ok(out)
    }

    /// `‖T(A∗δ_ijk)‖_F` for every voxel, `(D, H, W)`.
    pub fn column_norms(&self) -> &Array3<f64> {
        &self.column_norms
    }

    /// Upper bound on `‖T(A∗·)‖²`: the largest `Σ_k |K̂_k(ω)|²` over the padded
    /// frequency grid, which is the exact norm of the circular operator.
    pub fn norm_bound_sq(&self) -> f64 {
        let n = self.fft.len();
        let mut best = 0.0f64;
        // Unpack Σ_k |K_k|² from the packed spectra: with S = K_a − iK_b and
        // S'(ω) = conj(S(−ω)) = K_a + iK_b, |K_a|²+|K_b|² = (|S|²+|S'|²)/2.
        let (pr, pc) = self.padded();
        for idx in 0..n {
            // transposed layout: idx = c * pr + r
            let (c, r) = (idx / pr, idx % pr);
            let neg = ((pc - c) % pc) * pr + (pr - r) % pr;
            let total: f64 = self
                .packed
                .iter()
                .map(|s| 0.5 * (s[idx].norm_sqr() + s[neg].norm_sqr()))
                .sum();
            best = best.max(total);
        }
        best
    }
}

/// Column norms from summed-area tables of the squared slices.
fn column_norms_direct(slices: ArrayView3<'_, f64>) -> Array3<f64> {
    let (d, h, w) = slices.dim();
    let (cr, cc) = (h / 2, w / 2);
    let mut out = Array3::zeros((d, h, w));
    for k in 0..d {
        let s = slices.index_axis(Axis(0), k);
        // sat[r][c] = Σ_{m<r, n<c} s²
        let mut sat = vec![0.0f64; (h + 1) * (w + 1)];
        for r in 0..h {
            let mut row = 0.0;
            for c in 0..w {
                row += s[[r, c]] * s[[r, c]];
                sat[(r + 1) * (w + 1) + c + 1] = sat[r * (w + 1) + c + 1] + row;
            }
        }
        let span = |q: usize, centre: usize, len: usize| {
            // slice rows m = p − q + centre for p in [0, len)
            let lo = centre.saturating_sub(q);
            let hi = (centre + len).saturating_sub(q).min(len);
            (lo, hi)
        };
        for i in 0..h {
            let (r0, r1) = span(i, cr, h);
            for j in 0..w {
                let (c0, c1) = span(j, cc, w);
                let e = sat[r1 * (w + 1) + c1] - sat[r0 * (w + 1) + c1] - sat[r1 * (w + 1) + c0]
                    + sat[r0 * (w + 1) + c0];
                out[[k, i, j]] = e.max(0.0).sqrt();
            }
        }
    }
    out
}

/// `T(A∗x) + b` for a dictionary without a cached operator.
pub fn apply_forward(dict: &PsfDictionary, x: &Volume, background: f64) -> Result<Image> {
    ForwardOperator::new(dict).forward(x, background)
}

pub fn adjoint_apply(dict: &PsfDictionary, y: ArrayView2<'_, f64>) -> Result<Array3<f64>> {
    ForwardOperator::new(dict).adjoint(y)
}

pub fn psf_column_norms(dict: &PsfDictionary) -> Array3<f64> {
    column_norms_direct(dict.slices().view())
}

/// Below this mean, Poisson variates are drawn by sequential inversion.
pub const POISSON_INVERSION_LIMIT: f64 = 30.0;

/// Draw one Poisson variate with mean `lambda`.
///
/// Inversion for small means, Hörmann's transformed rejection with squeeze
/// (PTRS) otherwise.
pub fn sample_poisson<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    if lambda < POISSON_INVERSION_LIMIT {
        let mut k = 0u64;
        let mut p = (-lambda).exp();
        let mut cdf = p;
        let u: f64 = rng.random();
        while u > cdf {
            k += 1;
            p *= lambda / k as f64;
            cdf += p;
            if p < 1e-300 && cdf < u {
                // lost to rounding in the far tail; restart
                return sample_poisson(rng, lambda);
            }
        }
        return k;
    }
    let slam = lambda.sqrt();
    let loglam = lambda.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u: f64 = rng.random::<f64>() - 0.5;
        let v: f64 = rng.random();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + lambda + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        let lhs = v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln();
        let rhs = -lambda + k * loglam - ln_factorial(k as u64);
        if lhs <= rhs {
            return k as u64;
        }
    }
}

pub(crate) fn ln_factorial(k: u64) -> f64 {
    if k < 20 {
        return (2..=k).map(|i| (i as f64).ln()).sum();
    }
    let x = k as f64;
    let x2 = x * x;
    x * x.ln() - x + 0.5 * (std::f64::consts::TAU * x).ln() + 1.0 / (12.0 * x)
        - 1.0 / (360.0 * x * x2)
        + 1.0 / (1260.0 * x2 * x2 * x)
}

/// Per-pixel random stream: pixel `index` of an image drawn with `seed`.
/// Streams are addressed by counter, so the draw for a pixel does not depend
/// on the order pixels are visited.
pub fn pixel_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Sample an observed image from a clean expectation image (background
/// already included). Gaussian samples are clamped at zero.
pub fn add_noise(clean: &Image, model: &NoiseModel, seed: u64) -> Result<Image> {
    model.validate()?;
    let (_, w) = clean.dim();
    let mut meta = ImageMeta {
        noise: Some(*model),
        sigma: None,
        i_max: None,
        seed: Some(seed),
    };
    let data = match model.kind {
        NoiseKind::Poisson => {
            if let Some(v) = clean.data.iter().find(|v| !(**v >= 0.0)) {
                return Err(Error::Domain(format!(
                    "Poisson channel needs a nonnegative expectation, found {v}"
                )));
            }
            Array2::from_shape_fn(clean.dim(), |(r, c)| {
                let mut rng = pixel_rng(seed, (r * w + c) as u64);
                sample_poisson(&mut rng, clean.data[[r, c]]) as f64
            })
        }
        NoiseKind::Gaussian { sigma } => {
            let i_max = clean.max();
            let s = match sigma {
                Sigma::Absolute(s) => s,
                Sigma::FractionOfMax(f) => f * i_max,
            };
            meta.sigma = Some(s);
            meta.i_max = Some(i_max);
            Array2::from_shape_fn(clean.dim(), |(r, c)| {
                let mut rng = pixel_rng(seed, (r * w + c) as u64);
                let z: f64 = rng.sample(StandardNormal);
                (clean.data[[r, c]] + s * z).max(0.0)
            })
        }
    };
    Ok(Image {
        data,
        kind: ImageKind::Observed,
        meta,
    })
}
