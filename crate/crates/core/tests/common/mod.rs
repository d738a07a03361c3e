#![allow(dead_code)]

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rpsf_core::optics::uniform_zeta_grid;
use rpsf_core::{build_dictionary, OpticalConfig, PsfDictionary};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_dict(zones: usize, depths: usize, size: (usize, usize)) -> PsfDictionary {
    let cfg = OpticalConfig {
        num_zones: zones,
        pupil_samples: 64,
        image_size: size,
        pixel_pitch: 0.5,
        zeta_grid: uniform_zeta_grid(zones, depths),
    };
    build_dictionary(&cfg).unwrap()
}

/// Reference forward model: `y[p] = Σ_k Σ_q x[k, q] · A_k[p − q + c]`,
/// zero outside the slice, with `c = (H/2, W/2)`.
pub fn direct_forward(slices: &Array3<f64>, x: &Array3<f64>) -> Array2<f64> {
    let (d, h, w) = x.dim();
    let (ch, cw) = ((h / 2) as isize, (w / 2) as isize);
    let mut y = Array2::zeros((h, w));
    for k in 0..d {
        for qi in 0..h {
            for qj in 0..w {
                let v = x[[k, qi, qj]];
                if v == 0.0 {
                    continue;
                }
                for pi in 0..h {
                    let m = pi as isize - qi as isize + ch;
                    if m < 0 || m >= h as isize {
                        continue;
                    }
                    for pj in 0..w {
                        let n = pj as isize - qj as isize + cw;
                        if n < 0 || n >= w as isize {
                            continue;
                        }
                        y[[pi, pj]] += v * slices[[k, m as usize, n as usize]];
                    }
                }
            }
        }
    }
    y
}

pub fn random_volume(rng: &mut impl Rng, dim: (usize, usize, usize), lo: f64, hi: f64) -> Array3<f64> {
    Array3::from_shape_fn(dim, |_| rng.random_range(lo..hi))
}

pub fn random_image(rng: &mut impl Rng, dim: (usize, usize), lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn(dim, |_| rng.random_range(lo..hi))
}

pub fn max_abs_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
