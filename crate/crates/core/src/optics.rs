//! Single-lobe rotating PSF synthesis.
//!
//! The pupil is split into `L` equal-area annular zones; zone `l` carries a
//! spiral phase with `l` full cycles. Adding the defocus phase `ζu²` makes the
//! bright lobe turn about the Gaussian image point at a rate close to `ζ/L`
//! radians, over the usable range `ζ ∈ [−πL, πL]`.
//!
//! The slice for defocus `ζ` is `|∫ exp[i(2π u·s + ζu² − ψ(u))] du|²` over the
//! unit disk, evaluated on the image grid (`s` in Rayleigh units) with an
//! explicit separable DFT and normalized to unit sum.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::neumaier_sum;

/// Default number of annular zones.
pub const DEFAULT_ZONES: usize = 7;
/// Default number of depth planes.
pub const DEFAULT_DEPTHS: usize = 21;
pub const DEFAULT_PUPIL_SAMPLES: usize = 256;
/// Image-plane sampling, Rayleigh units per pixel.
pub const DEFAULT_PIXEL_PITCH: f64 = 0.5;
pub const MIN_PUPIL_SAMPLES: usize = 64;

/// Optical and sampling parameters of the PSF model.
///
/// Wavelength, pupil radius and the object/image distances only enter through
/// the dimensionless defocus `ζ` and the pixel pitch, so they are not stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpticalConfig {
    pub num_zones: usize,
    pub pupil_samples: usize,
    /// `(H, W)` in pixels.
    pub image_size: (usize, usize),
    pub pixel_pitch: f64,
    pub zeta_grid: Vec<f64>,
}

impl Default for OpticalConfig {
    fn default() -> Self {
        OpticalConfig::new(DEFAULT_ZONES, DEFAULT_DEPTHS, (96, 96))
    }
}

impl OpticalConfig {
    /// Config with `depths` planes spread uniformly over the rotation range.
    pub fn new(num_zones: usize, depths: usize, image_size: (usize, usize)) -> Self {
        OpticalConfig {
            num_zones,
            pupil_samples: DEFAULT_PUPIL_SAMPLES,
            image_size,
            pixel_pitch: DEFAULT_PIXEL_PITCH,
            zeta_grid: uniform_zeta_grid(num_zones, depths),
        }
    }

    pub fn zeta_max(&self) -> f64 {
        PI * self.num_zones as f64
    }

    pub fn depth(&self) -> usize {
        self.zeta_grid.len()
    }

    /// `(H, W, D)`.
    pub fn grid(&self) -> (usize, usize, usize) {
        (self.image_size.0, self.image_size.1, self.depth())
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_zones == 0 {
            return Err(Error::Config("num_zones must be at least 1".into()));
        }
        if self.pupil_samples < MIN_PUPIL_SAMPLES {
            return Err(Error::Config(format!(
                "pupil_samples must be >= {MIN_PUPIL_SAMPLES}, got {}",
                self.pupil_samples
            )));
        }
        let (h, w) = self.image_size;
        if h == 0 || w == 0 {
            return Err(Error::Config("image_size must be positive".into()));
        }
        if !(self.pixel_pitch.is_finite() && self.pixel_pitch > 0.0) {
            return Err(Error::Config(format!(
                "pixel_pitch must be positive, got {}",
                self.pixel_pitch
            )));
        }
        // The sampled pupil repeats its far field every pupil_samples/2 Rayleigh units.
        let extent = h.max(w) as f64 * self.pixel_pitch;
        if extent > self.pupil_samples as f64 / 2.0 {
            return Err(Error::Config(format!(
                "image extent {extent} Rayleigh units aliases with {} pupil samples",
                self.pupil_samples
            )));
        }
        if self.zeta_grid.is_empty() {
            return Err(Error::Config("zeta_grid is empty".into()));
        }
        if self.zeta_grid.windows(2).any(|p| !(p[1] > p[0])) {
            return Err(Error::Config("zeta_grid must be strictly increasing".into()));
        }
        for &z in &self.zeta_grid {
            check_zeta(z, self.num_zones)?;
        }
        Ok(())
    }
}

/// `depths` values uniformly covering `[−πL, πL]`, endpoints included.
/// A single plane sits at focus.
pub fn uniform_zeta_grid(num_zones: usize, depths: usize) -> Vec<f64> {
    let zmax = PI * num_zones as f64;
    match depths {
        0 => Vec::new(),
        1 => vec![0.0],
        n => (0..n)
            .map(|k| {
                if k == n - 1 {
                    zmax
                } else {
                    -zmax + 2.0 * zmax * k as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

fn check_zeta(zeta: f64, num_zones: usize) -> Result<()> {
    let zmax = PI * num_zones as f64;
    if !zeta.is_finite() || zeta.abs() > zmax * (1.0 + 1e-12) {
        return Err(Error::Range(format!(
            "defocus {zeta} outside the rotation range [-{zmax}, {zmax}]"
        )));
    }
    Ok(())
}

/// Index (1-based) of the Fresnel zone containing radius `u`; zone `l` spans
/// `(√((l−1)/L), √(l/L)]`.
pub fn zone_index(u: f64, num_zones: usize) -> usize {
    let l = num_zones as f64;
    let mut zone = ((u * u * l).ceil() as usize).clamp(1, num_zones);
    // Guard the ceil against rounding at the boundaries.
    while zone < num_zones && u > (zone as f64 / l).sqrt() {
        zone += 1;
    }
    while zone > 1 && u <= ((zone - 1) as f64 / l).sqrt() {
        zone -= 1;
    }
    zone
}

/// Spiral pupil phase `l·φ_u` for a point at radius `u` and azimuth `phi_u`.
pub fn spiral_phase(u: f64, phi_u: f64, num_zones: usize) -> Result<f64> {
    if num_zones == 0 {
        return Err(Error::Domain("zone count must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::Domain(format!("pupil radius {u} outside [0, 1]")));
    }
    Ok(zone_index(u, num_zones) as f64 * phi_u)
}

/// Sampled pupil `exp[i(ζu² − ψ)]` restricted to the disk, with the part that
/// does not depend on `ζ` cached.
struct Pupil {
    n: usize,
    coords: Vec<f64>,
    /// `(row, col, u², ψ)` for every sample inside the disk.
    samples: Vec<(usize, usize, f64, f64)>,
}

impl Pupil {
    fn new(n: usize, num_zones: usize) -> Self {
        let coords: Vec<f64> = (0..n).map(|m| (m as f64 + 0.5) / n as f64 * 2.0 - 1.0).collect();
        let mut samples = Vec::new();
        for (row, &down) in coords.iter().enumerate() {
            for (col, &right) in coords.iter().enumerate() {
                let u2 = right * right + down * down;
                if u2 > 1.0 {
                    continue;
                }
                // Azimuth is referenced to the upward image axis so the in-focus
                // lobe lies on the horizontal axis.
                let alpha = (-down).atan2(right);
                let phi = (FRAC_PI_2 - alpha).rem_euclid(TAU);
                let psi = zone_index(u2.sqrt(), num_zones) as f64 * phi;
                samples.push((row, col, u2, psi));
            }
        }
        Pupil { n, coords, samples }
    }

    fn field(&self, zeta: f64) -> Array2<Complex64> {
        let mut p = Array2::<Complex64>::zeros((self.n, self.n));
        for &(row, col, u2, psi) in &self.samples {
            p[[row, col]] = Complex64::from_polar(1.0, zeta * u2 - psi);
        }
        p
    }
}

/// `exp(2πi s_r u_m)` for image coordinate `s_r = (r − len/2)·pitch`.
fn dft_matrix(len: usize, pitch: f64, coords: &[f64]) -> Array2<Complex64> {
    let centre = (len / 2) as f64;
    Array2::from_shape_fn((len, coords.len()), |(r, m)| {
        let s = (r as f64 - centre) * pitch;
        Complex64::from_polar(1.0, TAU * s * coords[m])
    })
}

struct Renderer {
    pupil: Pupil,
    rows: Array2<Complex64>,
    cols: Array2<Complex64>,
}

impl Renderer {
    fn new(cfg: &OpticalConfig) -> Self {
        let pupil = Pupil::new(cfg.pupil_samples, cfg.num_zones);
        let rows = dft_matrix(cfg.image_size.0, cfg.pixel_pitch, &pupil.coords);
        let cols = dft_matrix(cfg.image_size.1, cfg.pixel_pitch, &pupil.coords);
        Renderer { pupil, rows, cols }
    }

    fn render(&self, zeta: f64) -> Result<Array2<f64>> {
        let p = self.pupil.field(zeta);
        // field = rows · p · colsᵀ
        let tmp = p.dot(&self.cols.t());
        let field = self.rows.dot(&tmp);
        let mut intensity = field.mapv(|c| c.norm_sqr());
        let total = neumaier_sum(intensity.iter().copied());
        if !(total > 0.0) {
            return Err(Error::Degenerate(format!("PSF at defocus {zeta} has no energy")));
        }
        intensity.mapv_inplace(|v| v / total);
        Ok(intensity)
    }
}

/// Render one unit-flux PSF slice at defocus `zeta`.
pub fn render_psf_slice(cfg: &OpticalConfig, zeta: f64) -> Result<Array2<f64>> {
    check_zeta(zeta, cfg.num_zones)?;
    let mut one = cfg.clone();
    one.zeta_grid = vec![zeta];
    one.validate()?;
    Renderer::new(cfg).render(zeta)
}

/// Stack of unit-flux PSF slices, one per depth plane.
#[derive(Clone, Debug, PartialEq)]
pub struct PsfDictionary {
    config: OpticalConfig,
    /// `(D, H, W)`.
    slices: Array3<f64>,
}

impl PsfDictionary {
    /// Wrap precomputed slices, checking the dictionary invariants.
    pub fn from_parts(config: OpticalConfig, slices: Array3<f64>) -> Result<Self> {
        config.validate()?;
        let (h, w, d) = config.grid();
        if slices.dim() != (d, h, w) {
            return Err(Error::shape((d, h, w), slices.dim()));
        }
        for (k, slice) in slices.outer_iter().enumerate() {
            if slice.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::Domain(format!("slice {k} has negative or non-finite entries")));
            }
            let sum = neumaier_sum(slice.iter().copied());
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Domain(format!("slice {k} sums to {sum}, expected 1")));
            }
        }
        Ok(PsfDictionary { config, slices })
    }

    pub fn config(&self) -> &OpticalConfig {
        &self.config
    }

    pub fn zeta_grid(&self) -> &[f64] {
        &self.config.zeta_grid
    }

    pub fn slices(&self) -> &Array3<f64> {
        &self.slices
    }

    pub fn slice(&self, k: usize) -> ArrayView2<'_, f64> {
        self.slices.index_axis(Axis(0), k)
    }

    /// `(H, W, D)`.
    pub fn grid(&self) -> (usize, usize, usize) {
        self.config.grid()
    }

    pub fn depth(&self) -> usize {
        self.slices.dim().0
    }
}

/// Render every slice of the dictionary described by `cfg`.
pub fn build_dictionary(cfg: &OpticalConfig) -> Result<PsfDictionary> {
    cfg.validate()?;
    let renderer = Renderer::new(cfg);
    let planes = cfg
        .zeta_grid
        .par_iter()
        .map(|&z| renderer.render(z))
        .collect::<Result<Vec<_>>>()?;
    let (h, w, d) = cfg.grid();
    let mut slices = Array3::zeros((d, h, w));
    for (k, plane) in planes.into_iter().enumerate() {
        slices.index_axis_mut(Axis(0), k).assign(&plane);
    }
    Ok(PsfDictionary {
        config: cfg.clone(),
        slices,
    })
}

/// Fraction of the peak above which pixels count towards the lobe centroid.
pub const LOBE_LEVEL: f64 = 0.75;

/// Angle of the bright lobe about the image centre, in `(−π, π]`.
///
/// Only pixels in the top quartile of the intensity range (at least 75% of
/// the peak) are centroided, which keeps the faint ring out of the estimate.
/// Angles are measured counter-clockwise from the rightward axis with "up"
/// meaning decreasing row index.
pub fn lobe_centroid_angle(img: ArrayView2<'_, f64>) -> Result<f64> {
    let peak = img.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(peak > 0.0) {
        return Err(Error::Degenerate("image has no positive mass".into()));
    }
    let (h, w) = img.dim();
    let (cr, cc) = ((h / 2) as f64, (w / 2) as f64);
    let level = LOBE_LEVEL * peak;
    let (mut up, mut right) = (0.0, 0.0);
    for ((r, c), &v) in img.indexed_iter() {
        if v >= level {
            up -= v * (r as f64 - cr);
            right += v * (c as f64 - cc);
        }
    }
    let angle = up.atan2(right);
    Ok(if angle <= -PI { PI } else { angle })
}
