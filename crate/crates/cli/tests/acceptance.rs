//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits nonzero if any fails.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ndarray::{Array2, Array3, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use rpsf_core::eval::{match_points, precision_recall, Metrics, DEFAULT_MATCH_THRESHOLD};
use rpsf_core::losses::*;
use rpsf_core::optics::uniform_zeta_grid;
use rpsf_core::postproc::{extract_points, ExtractParams, Metric};
use rpsf_core::scene::{rasterize, sample_scene, substream_seed, Density, DatasetSpec, Purpose, Source, SourceList};
use rpsf_core::solvers::*;
use rpsf_core::{
    add_noise, build_dictionary, lobe_centroid_angle, render_psf_slice, ForwardOperator, Image, NoiseModel,
    OpticalConfig, PsfDictionary, Sigma, Volume,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_dict(zones: usize, depths: usize, size: (usize, usize)) -> PsfDictionary {
    let cfg = OpticalConfig {
        num_zones: zones,
        pupil_samples: 64,
        image_size: size,
        pixel_pitch: 0.5,
        zeta_grid: uniform_zeta_grid(zones, depths),
    };
    build_dictionary(&cfg).unwrap()
}

fn dot<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm<'a>(a: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn nonincreasing_violation(trace: &[f64]) -> f64 {
    trace
        .windows(2)
        .map(|w| (w[1] - w[0]) / w[0].abs().max(1.0))
        .fold(f64::NEG_INFINITY, f64::max)
}

// ---------------------------------------------------------------- operator

fn adjoint_dot_product() -> Outcome {
    let dict = build_dictionary(&OpticalConfig::new(7, 11, (48, 48))).unwrap();
    let t = Instant::now();
    let op = ForwardOperator::new(&dict);
    let mut r = rng(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x = Array3::from_shape_fn((11, 48, 48), |_| r.random_range(0.0..1.0));
        let y = Array2::from_shape_fn((48, 48), |_| r.random_range(-1.0..1.0));
        let ax = op.apply(x.view()).unwrap();
        let aty = op.adjoint(y.view()).unwrap();
        let err = (dot(&ax, &y) - dot(&x, &aty)).abs() / (norm(&ax) * norm(&y));
        worst = worst.max(err);
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-10 && secs < 10.0,
        format!("max rel err {worst:.2e} over 100 pairs, {secs:.2} s"),
    )
}

/// `y[p] = Σ_k Σ_q x[k, q] · A_k[p − q + (H/2, W/2)]`, zero outside the slice.
fn direct_forward(slices: &Array3<f64>, x: &Array3<f64>) -> Array2<f64> {
    let (d, h, w) = x.dim();
    let (ch, cw) = ((h / 2) as isize, (w / 2) as isize);
    let mut y = Array2::zeros((h, w));
    for k in 0..d {
        for qi in 0..h {
            for qj in 0..w {
                let v = x[[k, qi, qj]];
                for pi in 0..h {
                    let m = pi as isize - qi as isize + ch;
                    if !(0..h as isize).contains(&m) {
                        continue;
                    }
                    for pj in 0..w {
                        let n = pj as isize - qj as isize + cw;
                        if (0..w as isize).contains(&n) {
                            y[[pi, pj]] += v * slices[[k, m as usize, n as usize]];
                        }
                    }
                }
            }
        }
    }
    y
}

fn convolution_equivalence() -> Outcome {
    let dict = build_dictionary(&OpticalConfig::new(3, 5, (16, 16))).unwrap();
    let op = ForwardOperator::new(&dict);
    let mut r = rng(102);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x = Array3::from_shape_fn((5, 16, 16), |_| r.random_range(0.0..1.0));
        let fast = op.apply(x.view()).unwrap();
        let slow = direct_forward(dict.slices(), &x);
        let diff = &fast - &slow;
        worst = worst.max(norm(&diff) / norm(&slow));
    }
    outcome(worst <= 1e-9, format!("max rel err {worst:.2e} over 20 volumes"))
}

// ---------------------------------------------------------------- losses

fn fd_rel_err(x: &Array3<f64>, grad: &Array3<f64>, mut f: impl FnMut(ArrayView3<'_, f64>) -> f64) -> f64 {
    let h = 1e-5;
    let mut probe = x.clone();
    let mut num = 0.0;
    for idx in 0..x.len() {
        let v = probe.as_slice().unwrap()[idx];
        probe.as_slice_mut().unwrap()[idx] = v + h;
        let up = f(probe.view());
        probe.as_slice_mut().unwrap()[idx] = v - h;
        let down = f(probe.view());
        probe.as_slice_mut().unwrap()[idx] = v;
        let fd = (up - down) / (2.0 * h);
        num += (fd - grad.as_slice().unwrap()[idx]).powi(2);
    }
    num.sqrt() / norm(grad)
}

fn gradient_checks() -> Outcome {
    let t = Instant::now();
    let dict = small_dict(3, 3, (8, 8));
    let op = ForwardOperator::new(&dict);
    let norms = op.column_norms().clone();
    let dim = (3, 8, 8);
    let mean_norm = norms.iter().sum::<f64>() / norms.len() as f64;
    // θ ≈ 0.5 puts voxels on both sides of the CEL0 threshold
    let mu = 0.5 * (0.5 * mean_norm).powi(2);
    let thresholds = norms.mapv(|a| cel0_threshold(a, mu));
    let mut r = rng(103);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };
    for _ in 0..20 {
        // unit-scale, bounded away from 0 and from every CEL0 threshold
        let mut x = Array3::zeros(dim);
        for (v, &th) in x.iter_mut().zip(&thresholds) {
            *v = loop {
                let c: f64 = r.random_range(0.05..1.0);
                if (c - th).abs() > 1e-3 {
                    break c;
                }
            };
        }
        let gt = Array3::from_shape_fn(dim, |_| r.random_range(0.0..1.0));
        let g = Array2::from_shape_fn((8, 8), |_| r.random_range(0.5..3.0));
        let b = 0.5;

        let t = gaussian_fidelity(&op, x.view(), b, g.view(), true).unwrap();
        note(
            "gaussian_fidelity",
            fd_rel_err(&x, t.gradient.as_ref().unwrap(), |v| {
                gaussian_fidelity(&op, v, b, g.view(), false).unwrap().value
            }),
        );

        let t = kl_fidelity(&op, x.view(), b, g.view(), true).unwrap();
        note(
            "kl_fidelity",
            fd_rel_err(&x, t.gradient.as_ref().unwrap(), |v| {
                kl_fidelity(&op, v, b, g.view(), false).unwrap().objective
            }),
        );

        let a = 0.8;
        note("nc_penalty", fd_rel_err(&x, &nc_gradient(x.view(), a), |v| nc_value(v, a)));

        let kernel = GaussianKernel3::new(1.0, 2);
        let t = mse_smoothed(x.view(), gt.view(), &kernel, true).unwrap();
        note(
            "mse_smoothed",
            fd_rel_err(&x, t.gradient.as_ref().unwrap(), |v| {
                mse_smoothed(v, gt.view(), &kernel, false).unwrap().value
            }),
        );

        for cfg in [LossConfig::gaussian_defaults(mu, b), LossConfig::poisson_defaults(a, b)] {
            let t = composite_loss(&op, x.view(), gt.view(), g.view(), &cfg, true).unwrap();
            note(
                "composite_loss",
                fd_rel_err(&x, t.gradient.as_ref().unwrap(), |v| {
                    composite_loss(&op, v, gt.view(), g.view(), &cfg, false).unwrap().total
                }),
            );
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let all = worst.values().all(|&e| e <= 1e-5);
    let detail = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ");
    outcome(all && secs < 30.0, format!("{detail}; {secs:.2} s"))
}

fn cel0_prox_oracle() -> Outcome {
    let mut r = rng(104);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let a = r.random_range(0.1..5.0);
        let mu = r.random_range(0.01..10.0);
        let step = r.random_range(0.01..5.0);
        let th = cel0_threshold(a, mu);
        let u = r.random_range(-2.0..3.0 * th + 2.0);
        let h = |v: f64| (v - u) * (v - u) / (2.0 * step) + cel0_phi(a, mu, v);
        // the minimizer lies in [0, max(u, θ)]
        let hi = u.max(th);
        let grid = (0..10_000)
            .map(|i| h(hi * i as f64 / 9_999.0))
            .fold(f64::INFINITY, f64::min);
        let p = cel0_prox_scalar(a, mu, step, u);
        worst = worst.max(h(p) - grid);
    }
    outcome(
        worst <= 1e-6,
        format!("max excess over grid search {worst:.2e} on 1000 tuples"),
    )
}

// ---------------------------------------------------------------- optics

fn psf_rotation() -> Outcome {
    let t = Instant::now();
    let cfg = OpticalConfig::new(7, 21, (96, 96));
    let zmax = 0.6 * PI * 7.0;
    let zetas: Vec<f64> = (0..11).map(|i| -zmax + 2.0 * zmax * i as f64 / 10.0).collect();
    let mut angles: Vec<f64> = zetas
        .iter()
        .map(|&z| lobe_centroid_angle(render_psf_slice(&cfg, z).unwrap().view()).unwrap())
        .collect();
    for i in 1..angles.len() {
        while angles[i] - angles[i - 1] > PI {
            angles[i] -= 2.0 * PI;
        }
        while angles[i] - angles[i - 1] < -PI {
            angles[i] += 2.0 * PI;
        }
    }
    let n = zetas.len() as f64;
    let (mz, ma) = (zetas.iter().sum::<f64>() / n, angles.iter().sum::<f64>() / n);
    let sxy: f64 = zetas.iter().zip(&angles).map(|(z, a)| (z - mz) * (a - ma)).sum();
    let sxx: f64 = zetas.iter().map(|z| (z - mz).powi(2)).sum();
    let syy: f64 = angles.iter().map(|a| (a - ma).powi(2)).sum();
    let r2 = sxy * sxy / (sxx * syy);
    let slope = sxy / sxx;
    // pairs ζ_i, ζ_{10−i}
    let anti = (0..5)
        .map(|i| {
            let s = angles[i] + angles[10 - i];
            let s = (s + PI).rem_euclid(2.0 * PI) - PI;
            s.abs().to_degrees()
        })
        .fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    outcome(
        r2 >= 0.99 && anti <= 5.0 && secs < 60.0,
        format!("R² {r2:.5}, slope {slope:.4} rad per unit ζ, max ±ζ asymmetry {anti:.2}°, {secs:.1} s"),
    )
}

fn unit_flux() -> Outcome {
    let mut worst = 0.0f64;
    let mut count = 0;
    for cfg in [OpticalConfig::default(), OpticalConfig::new(7, 11, (48, 48)), OpticalConfig::new(3, 1, (16, 16))] {
        let dict = build_dictionary(&cfg).unwrap();
        for k in 0..dict.depth() {
            worst = worst.max((dict.slice(k).sum() - 1.0).abs());
            count += 1;
        }
    }
    outcome(worst <= 1e-12, format!("max |sum − 1| {worst:.1e} over {count} slices"))
}

// ---------------------------------------------------------------- noise

fn noise_statistics() -> Outcome {
    let lambda = 2000.0;
    let n = 1e4;
    let clean = Image::clean(Array2::from_elem((100, 100), lambda));
    let p = add_noise(&clean, &NoiseModel::poisson(0.0), 7).unwrap();
    let mean = p.data.sum() / n;
    let var = p.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    // Var(s²) ≈ (μ₄ − σ⁴)/n with μ₄ = λ(1 + 3λ) for a Poisson law
    let var_sd = ((lambda + 2.0 * lambda * lambda) / n).sqrt();
    let mean_ok = (mean - lambda).abs() <= 4.0 * (lambda / n).sqrt();
    let var_ok = (var - lambda).abs() <= 4.0 * var_sd;

    let g_clean = Image::clean(Array2::from_elem((100, 100), 1000.0));
    let sigma = 10.0;
    let gm = NoiseModel::gaussian(Sigma::Absolute(sigma), 0.0);
    let g = add_noise(&g_clean, &gm, 8).unwrap();
    let gmean = g.data.sum() / n;
    let gsd = (g.data.iter().map(|v| (v - gmean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let sd_ok = (gsd / sigma - 1.0).abs() <= 0.02;

    let same = add_noise(&clean, &NoiseModel::poisson(0.0), 7).unwrap().data == p.data
        && add_noise(&g_clean, &gm, 8).unwrap().data == g.data;
    outcome(
        mean_ok && var_ok && sd_ok && same,
        format!(
            "Poisson mean {mean:.2} var {var:.1}; Gaussian σ̂/σ {:.4}; repeat-seed identical: {same}",
            gsd / sigma
        ),
    )
}

// ---------------------------------------------------------------- solvers

fn random_sources(r: &mut ChaCha8Rng, grid: (usize, usize, usize), n: usize) -> Volume {
    let (h, w, d) = grid;
    let mut x = Array3::zeros((d, h, w));
    for _ in 0..n {
        x[[r.random_range(0..d), r.random_range(4..h - 4), r.random_range(4..w - 4)]] += r.random_range(1000.0..3000.0);
    }
    Volume::new(x).unwrap()
}

fn solver_monotonicity() -> Outcome {
    let dict = build_dictionary(&OpticalConfig::new(7, 11, (48, 48))).unwrap();
    let op = ForwardOperator::new(&dict);
    let results: Vec<(f64, f64)> = (0..10u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng(200 + i);
            let x = random_sources(&mut r, op.grid(), 6);
            let clean = op.forward(&x, 5.0).unwrap();

            let g = add_noise(&clean, &NoiseModel::gaussian(Sigma::FractionOfMax(0.1), 5.0), i).unwrap();
            let mut p = SolverParams::l2_cel0();
            p.max_inner = 200;
            p.tolerance = 1e-300;
            let rep = solve_l2_cel0(&g, &op, &p).unwrap();
            let cel0 = nonincreasing_violation(&rep.objective_trace);

            let g = add_noise(&clean, &NoiseModel::poisson(5.0), i).unwrap();
            let mut p = SolverParams::kl_nc();
            p.max_outer = 4;
            p.max_inner = 50;
            p.tolerance = 1e-300;
            let rep = solve_kl_nc(&g, &op, &p).unwrap();
            let kl = rep
                .inner_traces
                .iter()
                .map(|t| nonincreasing_violation(t))
                .fold(nonincreasing_violation(&rep.objective_trace), f64::max);
            (cel0, kl)
        })
        .collect();
    let cel0 = results.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
    let kl = results.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    outcome(
        cel0 <= 1e-10 && kl <= 1e-10,
        format!("largest relative increase: ℓ2-CEL0 {cel0:.1e}, KL-NC {kl:.1e} (10 instances × 200 iterations)"),
    )
}

fn noiseless_recovery() -> Outcome {
    let dict = build_dictionary(&OpticalConfig::default()).unwrap();
    let op = ForwardOperator::new(&dict);
    let truth = Source {
        x: 45.0,
        y: 52.0,
        z: 8.0,
        flux: 2000.0,
    };
    let vol = rasterize(&SourceList(vec![truth]), op.grid()).unwrap();
    let b = 5.0;
    let g = op.forward(&vol, b).unwrap();

    let mut cel0 = SolverParams::l2_cel0();
    cel0.mu = Some(1.0);
    cel0.b = Some(b);
    let mut kl = SolverParams::kl_nc();
    kl.b = Some(b);

    let mut ok = true;
    let mut parts = Vec::new();
    for (name, run) in [
        ("ℓ2-CEL0", Box::new(|| solve_l2_cel0(&g, &op, &cel0)) as Box<dyn Fn() -> rpsf_core::Result<SolveReport>>),
        ("KL-NC", Box::new(|| solve_kl_nc(&g, &op, &kl))),
    ] {
        let t = Instant::now();
        let rep = run().unwrap();
        let secs = t.elapsed().as_secs_f64();
        let pts = extract_points(&rep.volume, &ExtractParams::default()).unwrap();
        let good = pts.len() == 1 && {
            let p = pts.0[0];
            Metric::Euclidean3d.distance((p.x, p.y, p.z), (truth.x, truth.y, truth.z)) <= 1.0
                && (p.weight / truth.flux - 1.0).abs() <= 0.05
        };
        ok &= good && secs < 60.0;
        let desc = match pts.0.first() {
            Some(p) => format!("{} pt(s), first at ({:.2}, {:.2}, {:.2}) flux {:.1}", pts.len(), p.x, p.y, p.z, p.weight),
            None => "no points".into(),
        };
        parts.push(format!("{name}: {desc}, {secs:.1} s"));
    }
    outcome(ok, parts.join("; "))
}

/// Exact minimum of the ℓ2-CEL0 objective over supports of size ≤ 2.
///
/// On a fixed support each coordinate lies either below its threshold, where
/// `φ` is a concave quadratic (the objective stays convex because the column
/// norm bounds the curvature it removes), or above it, where `φ` is constant.
/// For every region choice the minimum over the box is found by enumerating
/// which bounds are active and solving the stationary system of the rest.
fn tiny_oracle(cols: &[Vec<f64>], norms: &[f64], r: &[f64], mu: f64) -> f64 {
    let objective = |sup: &[usize], c: &[f64]| -> f64 {
        let mut res = r.to_vec();
        for (k, &v) in sup.iter().enumerate() {
            for (q, a) in res.iter_mut().zip(&cols[v]) {
                *q -= c[k] * a;
            }
        }
        dot(&res, &res) + sup.iter().zip(c).map(|(&v, &ck)| cel0_phi(norms[v], mu, ck)).sum::<f64>()
    };
    let n = cols.len();
    let mut supports: Vec<Vec<usize>> = (0..n).map(|a| vec![a]).collect();
    for a in 0..n {
        for b in a + 1..n {
            supports.push(vec![a, b]);
        }
    }
    let mut best = objective(&[], &[]);
    for sup in &supports {
        let m = sup.len();
        let th: Vec<f64> = sup.iter().map(|&v| cel0_threshold(norms[v], mu)).collect();
        for region in 0..(1usize << m) {
            // (lower, upper, below-threshold piece)
            let bounds: Vec<(f64, f64, bool)> = (0..m)
                .map(|k| {
                    if region >> k & 1 == 1 {
                        (th[k], f64::INFINITY, false)
                    } else {
                        (0.0, th[k], true)
                    }
                })
                .collect();
            let hess = |k: usize, l: usize| {
                let v = dot(&cols[sup[k]], &cols[sup[l]]);
                if k == l && bounds[k].2 {
                    v - norms[sup[k]].powi(2) / 2.0
                } else {
                    v
                }
            };
            let rhs = |k: usize| {
                let v = dot(&cols[sup[k]], r);
                if bounds[k].2 {
                    v - norms[sup[k]].powi(2) * th[k] / 2.0
                } else {
                    v
                }
            };
            // each coordinate free, at its lower bound, or at its upper bound
            'face: for code in 0..3usize.pow(m as u32) {
                let mut c = vec![0.0; m];
                let mut free = Vec::new();
                let mut rest = code;
                for k in 0..m {
                    match rest % 3 {
                        0 => free.push(k),
                        1 => c[k] = bounds[k].0,
                        _ if bounds[k].1.is_finite() => c[k] = bounds[k].1,
                        _ => continue 'face,
                    }
                    rest /= 3;
                }
                let fixed: Vec<usize> = (0..m).filter(|k| !free.contains(k)).collect();
                let b: Vec<f64> = free
                    .iter()
                    .map(|&k| rhs(k) - fixed.iter().map(|&l| hess(k, l) * c[l]).sum::<f64>())
                    .collect();
                match free.len() {
                    0 => {}
                    1 => {
                        let d = hess(free[0], free[0]);
                        if d.abs() < 1e-300 {
                            continue;
                        }
                        c[free[0]] = b[0] / d;
                    }
                    _ => {
                        let (a11, a12, a22) = (hess(free[0], free[0]), hess(free[0], free[1]), hess(free[1], free[1]));
                        let det = a11 * a22 - a12 * a12;
                        if det.abs() < 1e-300 {
                            continue;
                        }
                        c[free[0]] = (a22 * b[0] - a12 * b[1]) / det;
                        c[free[1]] = (a11 * b[1] - a12 * b[0]) / det;
                    }
                }
                if (0..m).all(|k| c[k] >= bounds[k].0 && c[k] <= bounds[k].1) {
                    best = best.min(objective(sup, &c));
                }
            }
        }
    }
    best
}

fn tiny_optimality() -> Outcome {
    let dict = small_dict(3, 2, (6, 6));
    let op = ForwardOperator::new(&dict);
    let norms: Vec<f64> = op.column_norms().iter().copied().collect();
    let cols: Vec<Vec<f64>> = (0..72)
        .map(|v| {
            let mut d = Array3::zeros((2, 6, 6));
            d.as_slice_mut().unwrap()[v] = 1.0;
            op.apply(d.view()).unwrap().iter().copied().collect()
        })
        .collect();
    let b = 5.0;
    let mut hits = 0;
    let mut worst = 0.0f64;
    for inst in 0..20u64 {
        let mut r = rng(300 + inst);
        let mut x = Array3::zeros((2, 6, 6));
        for _ in 0..r.random_range(1..=2) {
            x[[r.random_range(0..2), r.random_range(0..6), r.random_range(0..6)]] += r.random_range(1000.0..3000.0);
        }
        let clean = op.forward(&Volume::new(x).unwrap(), b).unwrap();
        let sigma = 0.02 * clean.max();
        let g = add_noise(&clean, &NoiseModel::gaussian(Sigma::Absolute(sigma), b), inst).unwrap();
        let mu = CEL0_MU_PER_VARIANCE * sigma * sigma;
        let resid: Vec<f64> = g.data.iter().map(|v| v - b).collect();
        let best = tiny_oracle(&cols, &norms, &resid, mu);

        let mut p = SolverParams::l2_cel0();
        p.mu = Some(mu);
        p.max_inner = 2000;
        p.tolerance = 1e-12;
        let rep = solve_l2_cel0(&g, &op, &p).unwrap();
        let rel = (rep.final_objective() - best) / best.abs().max(1.0);
        worst = worst.max(rel.abs());
        hits += (rel.abs() <= 1e-4) as usize;
    }
    outcome(
        hits >= 18,
        format!("{hits}/20 within 1e-4 of the exhaustive optimum (largest gap {worst:.1e})"),
    )
}

// ---------------------------------------------------------------- pipeline

struct Sample {
    truth: SourceList,
    volume: Volume,
    observed: Image,
}

fn simulate(op: &ForwardOperator, density: usize, count: usize, noise: NoiseModel, seed: u64) -> Vec<Sample> {
    let (h, w, d) = op.grid();
    let mut spec = DatasetSpec::new((h, w), d, Density::Fixed(density), seed);
    spec.num_images = count;
    (0..count)
        .map(|i| {
            let truth = sample_scene(&spec, i).unwrap();
            let volume = rasterize(&truth, spec.grid()).unwrap();
            let clean = op.forward(&volume, noise.background).unwrap();
            let observed = add_noise(&clean, &noise, substream_seed(seed, Purpose::Noise, i as u64)).unwrap();
            Sample {
                truth,
                volume,
                observed,
            }
        })
        .collect()
}

fn score(truth: &SourceList, rep: &SolveReport) -> Metrics {
    let pts = extract_points(&rep.volume, &ExtractParams::default()).unwrap();
    let m = match_points(truth, &pts, DEFAULT_MATCH_THRESHOLD, Metric::Euclidean3d).unwrap();
    precision_recall(&m, truth.len(), pts.len()).unwrap()
}

fn means(ms: &[Metrics]) -> (f64, f64) {
    let n = ms.len() as f64;
    (
        ms.iter().map(|m| m.recall).sum::<f64>() / n,
        ms.iter().map(|m| m.precision).sum::<f64>() / n,
    )
}

fn default_operator() -> ForwardOperator {
    ForwardOperator::new(&build_dictionary(&OpticalConfig::default()).unwrap())
}

fn kl_nc_table() -> Outcome {
    let op = default_operator();
    let data = simulate(&op, 10, 20, NoiseModel::poisson(5.0), 7);
    let t = Instant::now();
    let ms: Vec<Metrics> = data
        .iter()
        .map(|s| score(&s.truth, &solve_kl_nc(&s.observed, &op, &SolverParams::kl_nc()).unwrap()))
        .collect();
    let secs = t.elapsed().as_secs_f64();
    let (rc, pr) = means(&ms);
    outcome(
        rc >= 0.90 && pr >= 0.80 && secs < 900.0,
        format!("recall {rc:.4}, precision {pr:.4} on 20 images, {secs:.1} s single-threaded"),
    )
}

fn l2_cel0_table() -> Outcome {
    let op = default_operator();
    let data = simulate(&op, 10, 20, NoiseModel::gaussian(Sigma::FractionOfMax(0.1), 5.0), 7);
    let ms: Vec<Metrics> = data
        .par_iter()
        .map(|s| score(&s.truth, &solve_l2_cel0(&s.observed, &op, &SolverParams::l2_cel0()).unwrap()))
        .collect();
    let (rc, pr) = means(&ms);
    outcome(rc >= 0.85 && pr >= 0.65, format!("recall {rc:.4}, precision {pr:.4} on 20 images"))
}

fn ablation() -> Outcome {
    let op = default_operator();
    let data = simulate(&op, 25, 10, NoiseModel::gaussian(Sigma::FractionOfMax(0.1), 5.0), 13);
    let mut p = SolverParams::l2_cel0();
    p.max_inner = 100;
    p.init = Init::Zeros;
    // (w1, w2) for MSE-only, +R, +D, +D+R
    let configs = [(0.0, 0.0), (0.0, 700.0), (1.0, 0.0), (1.0, 700.0)];
    let per_config: Vec<Vec<Metrics>> = configs
        .iter()
        .map(|&(w1, w2)| {
            data.par_iter()
                .map(|s| {
                    let mu = default_cel0_mu(&s.observed);
                    let mut cfg = LossConfig::gaussian_defaults(mu, 5.0);
                    cfg.w1 = w1;
                    cfg.w2 = w2;
                    score(&s.truth, &refine_with_composite(&s.observed, &s.volume, &op, &cfg, &p).unwrap())
                })
                .collect()
        })
        .collect();
    let avg: Vec<(f64, f64)> = per_config.iter().map(|m| means(m)).collect();
    let (mse, r, d) = (avg[0], avg[1], avg[2]);
    let dominated = per_config[3]
        .iter()
        .zip(&per_config[0])
        .filter(|(both, base)| both.recall >= base.recall && both.precision >= base.precision)
        .count();
    let strict = (r.1 > mse.1) || (d.0 > mse.0);
    outcome(
        r.1 >= mse.1 && d.0 >= mse.0 && dominated >= 7,
        format!(
            "(recall, precision) MSE ({:.3}, {:.3}), +R ({:.3}, {:.3}), +D ({:.3}, {:.3}), +D+R ({:.3}, {:.3}); \
             both ≥ MSE-only in {dominated}/10 images{}",
            mse.0,
            mse.1,
            r.0,
            r.1,
            d.0,
            d.1,
            avg[3].0,
            avg[3].1,
            if strict { "" } else { "; all differences zero" }
        ),
    )
}

fn noise_sweep() -> Outcome {
    let op = default_operator();
    let levels = [0.05, 0.075, 0.1, 0.125, 0.15];
    let precision: Vec<f64> = levels
        .iter()
        .map(|&s| {
            let data = simulate(&op, 25, 10, NoiseModel::gaussian(Sigma::FractionOfMax(s), 5.0), 17);
            let ms: Vec<Metrics> = data
                .par_iter()
                .map(|x| score(&x.truth, &solve_l2_cel0(&x.observed, &op, &SolverParams::l2_cel0()).unwrap()))
                .collect();
            means(&ms).1
        })
        .collect();
    let rises: Vec<f64> = precision.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > 0.0).collect();
    let ok = rises.is_empty() || (rises.len() == 1 && rises[0] <= 0.02);
    let curve = levels
        .iter()
        .zip(&precision)
        .map(|(s, p)| format!("{s}:{p:.3}"))
        .collect::<Vec<_>>()
        .join(" ");
    outcome(ok, format!("precision by σ/I_max {curve}; {} inversion(s)", rises.len()))
}

// ---------------------------------------------------------------- CLI

fn rpsf(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_rpsf"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("rpsf {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn manifest_replay() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let at = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();
    let steps: Vec<(&str, Vec<String>)> = vec![
        ("psf", vec!["psf", "--zones", "3", "--depths", "3", "--size", "24", "--pupil-samples", "64", "--png", "--out", &at("psf")]
            .into_iter().map(String::from).collect()),
        ("sim_g", vec!["simulate", "--dictionary", &at("psf/dictionary.rpsf"), "--images", "2", "--density", "3",
            "--noise", "gaussian", "--margin", "3", "--seed", "5", "--out", &at("sim_g")]
            .into_iter().map(String::from).collect()),
        ("sim_p", vec!["simulate", "--dictionary", &at("psf/dictionary.rpsf"), "--images", "2", "--density", "3",
            "--noise", "poisson", "--margin", "3", "--seed", "6", "--out", &at("sim_p")]
            .into_iter().map(String::from).collect()),
        ("rec_c", vec!["reconstruct", "--dictionary", &at("psf/dictionary.rpsf"), "--dataset", &at("sim_g"),
            "--method", "l2-cel0", "--max-inner", "50", "--out", &at("rec_c")]
            .into_iter().map(String::from).collect()),
        ("rec_k", vec!["reconstruct", "--dictionary", &at("psf/dictionary.rpsf"), "--dataset", &at("sim_p"),
            "--method", "kl-nc", "--max-outer", "2", "--max-inner", "20", "--out", &at("rec_k")]
            .into_iter().map(String::from).collect()),
        ("ref", vec!["refine", "--dictionary", &at("psf/dictionary.rpsf"), "--dataset", &at("sim_g"),
            "--max-iter", "30", "--out", &at("ref")]
            .into_iter().map(String::from).collect()),
        ("eval", vec!["evaluate", "--runs", &at("rec_c"), &at("ref"), "--sweep", "noise-level", "--out", &at("eval")]
            .into_iter().map(String::from).collect()),
    ];
    let mut replayed = 0;
    let mut files = 0;
    for (name, args) in &steps {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        if let Err(e) = rpsf(&args) {
            return outcome(false, e);
        }
        let manifest = tmp.path().join(name).join("run_manifest.json");
        let again = at(&format!("{name}_replay"));
        if let Err(e) = rpsf(&["--from-manifest", &manifest.to_string_lossy(), "--out", &again]) {
            return outcome(false, e);
        }
        let a = snapshot(&tmp.path().join(name));
        let b = snapshot(Path::new(&again));
        if a != b {
            let differing: Vec<_> = a
                .keys()
                .chain(b.keys())
                .filter(|k| a.get(*k) != b.get(*k))
                .map(|k| k.display().to_string())
                .collect();
            return outcome(false, format!("{name}: replay differs in {differing:?}"));
        }
        replayed += 1;
        files += a.len();
    }
    outcome(
        true,
        format!("{replayed} runs (psf, simulate ×2, reconstruct ×2, refine, evaluate) replayed; {files} files byte-identical"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 15] = [
        ("adjoint dot-product test", adjoint_dot_product),
        ("FFT forward equals direct sum", convolution_equivalence),
        ("gradients match finite differences", gradient_checks),
        ("CEL0 prox beats grid search", cel0_prox_oracle),
        ("PSF rotation linear and antisymmetric", psf_rotation),
        ("dictionary slices have unit flux", unit_flux),
        ("noise moments and determinism", noise_statistics),
        ("solver objective traces nonincreasing", solver_monotonicity),
        ("noiseless single-source recovery", noiseless_recovery),
        ("tiny-grid exhaustive optimality", tiny_optimality),
        ("KL-NC recall/precision, Poisson density 10", kl_nc_table),
        ("l2-CEL0 recall/precision, Gaussian density 10", l2_cel0_table),
        ("composite-loss ablation directionality", ablation),
        ("precision falls with noise level", noise_sweep),
        ("manifest replay is byte-identical", manifest_replay),
    ];
    let filter: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (n, (name, check)) in criteria.iter().enumerate() {
        let id = n + 1;
        if filter.is_some_and(|f| f != id) {
            continue;
        }
        let t = Instant::now();
        let o = check();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        failed += !o.pass as usize;
        println!("{tag} [{id:02}] {name}: {} [{:.1} s]", o.detail, t.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
