//! Variational reconstruction: ℓ2-CEL0 for Gaussian data, reweighted-ℓ1
//! KL-NC for Poisson data, and a ground-truth-aided composite refinement.
//!
//! All three run the same engine: monotone FISTA with backtracking on
//! `f(x) + r(x)` over `x ≥ 0`. A candidate iterate is kept only if it does
//! not raise the objective; otherwise momentum is reset and the next step is a
//! plain proximal-gradient step, which cannot increase it either (the proximal
//! maps here are exact global minimizers).

use std::time::Instant;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{ForwardOperator, Image, Volume};
use crate::losses::{
    self, cel0_prox_scalar, cel0_value, kl_objective_image, nc_value, GaussianKernel3,
    LossConfig, NoiseFamily,
};
use crate::numeric::{inner, norm_sq};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StepRule {
    Fixed {
        step: f64,
    },
    /// `initial = None` starts from a Lipschitz estimate. The accepted step is
    /// multiplied by `growth` before each iteration and by `shrink` after
    /// each failed sufficient-decrease test.
    Backtracking {
        shrink: f64,
        initial: Option<f64>,
        growth: f64,
    },
}

impl Default for StepRule {
    fn default() -> Self {
        StepRule::Backtracking {
            shrink: 0.5,
            initial: None,
            growth: 1.25,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Zeros,
    /// `Aᵀ(g − b)` clipped at 0 and scaled to the image's total counts.
    #[default]
    Adjoint,
}

pub const DEFAULT_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_PATIENCE: usize = 5;
/// CEL0 `μ` in units of the noise variance when none is given.
pub const CEL0_MU_PER_VARIANCE: f64 = 120.0;
pub const KL_NC_MU: f64 = 50.0;
pub const KL_NC_A: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverParams {
    /// Reweighting rounds of the KL-NC solver; ignored by single-loop solvers.
    pub max_outer: usize,
    /// Iterations per reweighting round, or in total for single-loop solvers.
    pub max_inner: usize,
    pub step: StepRule,
    /// Stop once the relative objective change stays below this for
    /// `patience` consecutive iterations.
    pub tolerance: f64,
    pub patience: usize,
    /// `None` picks the solver's default (see [`default_cel0_mu`]).
    pub mu: Option<f64>,
    pub a: f64,
    /// Background; `None` reads it from the image metadata.
    pub b: Option<f64>,
    pub init: Init,
    /// Unused by the deterministic solvers; recorded for completeness.
    pub seed: Option<u64>,
}

impl SolverParams {
    pub fn l2_cel0() -> Self {
        SolverParams {
            max_outer: 1,
            max_inner: 300,
            step: StepRule::default(),
            tolerance: DEFAULT_TOLERANCE,
            patience: DEFAULT_PATIENCE,
            mu: None,
            a: KL_NC_A,
            b: None,
            init: Init::Adjoint,
            seed: None,
        }
    }

    pub fn kl_nc() -> Self {
        SolverParams {
            max_outer: 8,
            max_inner: 30,
            mu: Some(KL_NC_MU),
            ..Self::l2_cel0()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::Config("iteration counts must be positive".into()));
        }
        if !(self.tolerance > 0.0) || self.patience == 0 {
            return Err(Error::Config("tolerance and patience must be positive".into()));
        }
        match self.step {
            StepRule::Fixed { step } if !(step > 0.0) => {
                return Err(Error::Config("fixed step must be positive".into()))
            }
            StepRule::Backtracking { shrink, initial, growth } => {
                if !(shrink > 0.0 && shrink < 1.0) {
                    return Err(Error::Config(format!("shrink factor {shrink} must lie in (0, 1)")));
                }
                if !(growth >= 1.0) {
                    return Err(Error::Config(format!("growth factor {growth} must be at least 1")));
                }
                if initial.is_some_and(|s| !(s > 0.0)) {
                    return Err(Error::Config("initial step must be positive".into()));
                }
            }
            _ => {}
        }
        if self.mu.is_some_and(|m| !(m >= 0.0)) || !(self.a > 0.0) {
            return Err(Error::Config("mu must be nonnegative and a positive".into()));
        }
        if self.b.is_some_and(|b| !(b >= 0.0)) {
            return Err(Error::Config("background must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Tolerance,
    MaxIter,
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub method: String,
    pub volume: Volume,
    /// Objective at the start and after every iteration (every reweighting
    /// round for KL-NC).
    pub objective_trace: Vec<f64>,
    /// Surrogate objective of each reweighting round; empty for single-loop
    /// solvers.
    pub inner_traces: Vec<Vec<f64>>,
    pub iterations: usize,
    pub termination: Termination,
    pub fixed_point_residual: f64,
    pub mu: f64,
    pub b: f64,
    pub params: SolverParams,
    pub wall_time: f64,
}

/// JSON form of a report. Wall time is left out so that reports are a pure
/// function of their inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub method: String,
    pub iterations: usize,
    pub termination: Termination,
    pub final_objective: f64,
    pub fixed_point_residual: f64,
    pub mu: f64,
    pub b: f64,
    pub params: SolverParams,
    pub trace_stride: usize,
    pub objective_trace: Vec<f64>,
    pub inner_traces: Vec<Vec<f64>>,
}

pub const MAX_TRACE_POINTS: usize = 1000;

/// Every `stride`-th entry, always keeping the last, with at most `max` points.
pub fn downsample(trace: &[f64], max: usize) -> (usize, Vec<f64>) {
    if trace.len() <= max {
        return (1, trace.to_vec());
    }
    let stride = trace.len().div_ceil(max - 1);
    let mut out: Vec<f64> = trace.iter().step_by(stride).copied().collect();
    if (trace.len() - 1) % stride != 0 {
        out.push(*trace.last().unwrap());
    }
    (stride, out)
}

impl SolveReport {
    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().unwrap_or(&f64::NAN)
    }

    pub fn summary(&self) -> ReportSummary {
        let (stride, objective_trace) = downsample(&self.objective_trace, MAX_TRACE_POINTS);
        let inner_traces = self
            .inner_traces
            .iter()
            .map(|t| downsample(t, MAX_TRACE_POINTS).1)
            .collect();
        ReportSummary {
            method: self.method.clone(),
            iterations: self.iterations,
            termination: self.termination,
            final_objective: self.final_objective(),
            fixed_point_residual: self.fixed_point_residual,
            mu: self.mu,
            b: self.b,
            params: self.params.clone(),
            trace_stride: stride,
            objective_trace,
            inner_traces,
        }
    }
}

/// `f + r` split for the engine.
trait Objective {
    /// Smooth part and (optionally) its gradient.
    fn smooth(&self, x: ArrayView3<'_, f64>, grad: bool) -> Result<(f64, Option<Array3<f64>>)>;
    /// Nonsmooth part, including the indicator of `x ≥ 0` implicitly.
    fn nonsmooth(&self, x: ArrayView3<'_, f64>) -> f64;
    /// `argmin_{z ≥ 0} ‖z − v‖²/(2·step) + r(z)`, in place.
    fn prox(&self, v: &mut Array3<f64>, step: f64);
}

struct EngineOut {
    x: Array3<f64>,
    iterations: usize,
    termination: Termination,
    step: f64,
}

const MAX_BACKTRACKS: usize = 200;

fn rel_change(old: f64, new: f64) -> f64 {
    (old - new).abs() / new.abs().max(f64::MIN_POSITIVE)
}

/// Monotone FISTA. Appends `F` after each iteration to `trace` (whose last
/// entry must already be `F(x0)`).
fn mfista<P: Objective>(
    p: &P,
    x0: Array3<f64>,
    iters: usize,
    rule: StepRule,
    step0: f64,
    tolerance: f64,
    patience: usize,
    trace: &mut Vec<f64>,
) -> Result<EngineOut> {
    let mut x = x0;
    let mut fx_total = *trace.last().expect("trace starts with F(x0)");
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut step = step0;
    let mut calm = 0usize;
    let mut plain = true; // y == x

    for it in 1..=iters {
        let (fy, gy) = p.smooth(y.view(), true)?;
        let gy = gy.expect("gradient requested");
        let (z, fz) = match rule {
            StepRule::Fixed { step: s } => {
                step = s;
                let mut z = &y - &(&gy * s);
                p.prox(&mut z, s);
                let (fz, _) = p.smooth(z.view(), false)?;
                if !fz.is_finite() {
                    return Err(Error::Divergence {
                        iteration: it,
                        detail: format!("objective became {fz} with fixed step {s}"),
                    });
                }
                (z, fz)
            }
            StepRule::Backtracking { shrink, growth, .. } => {
                step *= growth;
                let mut tries = 0;
                loop {
                    let mut z = y.clone();
                    z.scaled_add(-step, &gy);
                    p.prox(&mut z, step);
                    let fz = match p.smooth(z.view(), false) {
                        Ok((v, _)) => v,
                        Err(Error::Domain(_)) => f64::INFINITY,
                        Err(e) => return Err(e),
                    };
                    let d = &z - &y;
                    let model = fy + inner(&gy, &d) + norm_sq(&d) / (2.0 * step);
                    if fz.is_finite() && fz <= model {
                        break (z, fz);
                    }
                    tries += 1;
                    if tries > MAX_BACKTRACKS {
                        return Err(Error::Divergence {
                            iteration: it,
                            detail: format!("no sufficient decrease down to step {step:e}"),
                        });
                    }
                    step *= shrink;
                }
            }
        };

        if plain && z == x {
            // fixed point of the proximal-gradient map
            return Ok(EngineOut {
                x,
                iterations: it - 1,
                termination: Termination::Tolerance,
                step,
            });
        }

        let fz_total = fz + p.nonsmooth(z.view());
        if fz_total <= fx_total {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            // y = z + β(z − x)
            let mut y_next = z.clone();
            y_next.scaled_add(beta, &(&z - &x));
            y_next.mapv_inplace(|v| v.max(0.0));
            plain = beta == 0.0;
            let change = rel_change(fx_total, fz_total);
            x = z;
            y = y_next;
            t = t_next;
            fx_total = fz_total;
            calm = if change < tolerance { calm + 1 } else { 0 };
        } else {
            // restart from the incumbent
            y = x.clone();
            t = 1.0;
            plain = true;
        }
        trace.push(fx_total);
        if calm >= patience {
            return Ok(EngineOut {
                x,
                iterations: it,
                termination: Termination::Tolerance,
                step,
            });
        }
    }
    Ok(EngineOut {
        x,
        iterations: iters,
        termination: Termination::MaxIter,
        step,
    })
}

/// `‖x − prox(x − s∇f(x), s)‖ / max(‖x‖, 1)`.
fn fixed_point_residual<P: Objective>(p: &P, x: &Array3<f64>, step: f64) -> Result<f64> {
    let (_, g) = p.smooth(x.view(), true)?;
    let mut z = x.clone();
    z.scaled_add(-step, &g.expect("gradient requested"));
    p.prox(&mut z, step);
    Ok(norm_sq(&(&z - x)).sqrt() / norm_sq(x).sqrt().max(1.0))
}

fn check_image(op: &ForwardOperator, g: &Image) -> Result<()> {
    let (h, w, _) = op.grid();
    if g.dim() != (h, w) {
        return Err(Error::shape((h, w), g.dim()));
    }
    if g.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("image contains non-finite values".into()));
    }
    Ok(())
}

fn background(g: &Image, params: &SolverParams) -> f64 {
    params
        .b
        .or_else(|| g.meta.noise.map(|n| n.background))
        .unwrap_or(0.0)
}

/// Robust noise level from horizontal pixel differences (median absolute
/// deviation, Gaussian-consistent).
pub fn estimate_sigma(g: ArrayView2<'_, f64>) -> f64 {
    let (h, w) = g.dim();
    let mut d: Vec<f64> = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 1..w {
            d.push((g[[r, c]] - g[[r, c - 1]]).abs());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    d[d.len() / 2] / (std::f64::consts::SQRT_2 * 0.674_489_750_196_081_7)
}

/// `μ = 120·σ²`, with `σ` from the image metadata when recorded, otherwise
/// estimated from the data. A source is kept only when it explains roughly
/// eleven noise standard deviations worth of signal.
pub fn default_cel0_mu(g: &Image) -> f64 {
    let sigma = g.meta.sigma.unwrap_or_else(|| estimate_sigma(g.data.view()));
    CEL0_MU_PER_VARIANCE * sigma * sigma
}

fn initial_volume(op: &ForwardOperator, g: &Image, b: f64, init: Init) -> Result<Array3<f64>> {
    let (h, w, d) = op.grid();
    match init {
        Init::Zeros => Ok(Array3::zeros((d, h, w))),
        Init::Adjoint => {
            let excess = g.data.mapv(|v| v - b);
            let mut x = op.adjoint(excess.view())?;
            x.mapv_inplace(|v| v.max(0.0));
            let model: f64 = op.apply(x.view())?.sum();
            let counts: f64 = excess.iter().map(|v| v.max(0.0)).sum();
            if model > 0.0 {
                x *= counts / model;
            }
            Ok(x)
        }
    }
}

fn initial_step(rule: StepRule, lipschitz: f64) -> f64 {
    match rule {
        StepRule::Fixed { step } => step,
        StepRule::Backtracking { initial, .. } => initial.unwrap_or(1.0 / lipschitz.max(1e-300)),
    }
}

struct L2Cel0<'a> {
    op: &'a ForwardOperator,
    g: ArrayView2<'a, f64>,
    b: f64,
    mu: f64,
}

impl Objective for L2Cel0<'_> {
    fn smooth(&self, x: ArrayView3<'_, f64>, grad: bool) -> Result<(f64, Option<Array3<f64>>)> {
        let t = losses::gaussian_fidelity(self.op, x, self.b, self.g, grad)?;
        Ok((t.value, t.gradient))
    }

    fn nonsmooth(&self, x: ArrayView3<'_, f64>) -> f64 {
        cel0_value(x, self.op.column_norms().view(), self.mu).expect("shapes checked")
    }

    fn prox(&self, v: &mut Array3<f64>, step: f64) {
        let mu = self.mu;
        Zip::from(v)
            .and(self.op.column_norms())
            .for_each(|v, &a| *v = cel0_prox_scalar(a, mu, step, *v));
    }
}

/// `min_{x ≥ 0} ‖Ax + b − g‖²_F + Σ φ(‖A δ_ijk‖, μ; x_ijk)`.
pub fn solve_l2_cel0(g: &Image, op: &ForwardOperator, params: &SolverParams) -> Result<SolveReport> {
    params.validate()?;
    check_image(op, g)?;
    let start = Instant::now();
    let b = background(g, params);
    let mu = params.mu.unwrap_or_else(|| default_cel0_mu(g));
    let problem = L2Cel0 {
        op,
        g: g.data.view(),
        b,
        mu,
    };
    let x0 = initial_volume(op, g, b, params.init)?;
    let (f0, _) = problem.smooth(x0.view(), false)?;
    let mut trace = vec![f0 + problem.nonsmooth(x0.view())];
    let step0 = initial_step(params.step, 2.0 * op.norm_bound_sq());
    let out = mfista(
        &problem,
        x0,
        params.max_inner,
        params.step,
        step0,
        params.tolerance,
        params.patience,
        &mut trace,
    )?;
    let residual = fixed_point_residual(&problem, &out.x, out.step)?;
    Ok(SolveReport {
        method: "l2-cel0".into(),
        volume: Volume::new(out.x)?,
        objective_trace: trace,
        inner_traces: Vec::new(),
        iterations: out.iterations,
        termination: out.termination,
        fixed_point_residual: residual,
        mu,
        b,
        params: params.clone(),
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Full KL-NC objective `Σ(z − g ln z) + μ Σ θ(a; x)`, `z = Ax + b`.
pub fn kl_nc_objective(
    op: &ForwardOperator,
    x: ArrayView3<'_, f64>,
    g: ArrayView2<'_, f64>,
    b: f64,
    mu: f64,
    a: f64,
) -> Result<f64> {
    let mut z = op.apply(x)?;
    z.mapv_inplace(|v| v + b);
    Ok(kl_objective_image(z.view(), g)? + mu * nc_value(x, a))
}

/// KL objective with a weighted ℓ1 term, the reweighted-ℓ1 surrogate.
struct KlWeighted<'a> {
    op: &'a ForwardOperator,
    g: ArrayView2<'a, f64>,
    b: f64,
    /// `μ·ω`.
    weights: Array3<f64>,
}

fn kl_smooth(
    op: &ForwardOperator,
    x: ArrayView3<'_, f64>,
    g: ArrayView2<'_, f64>,
    b: f64,
    grad: bool,
) -> Result<(f64, Option<Array3<f64>>, Array2<f64>)> {
    let mut z = op.apply(x)?;
    z.mapv_inplace(|v| v + b);
    let value = kl_objective_image(z.view(), g)?;
    let gradient = if grad {
        Some(op.adjoint(losses::kl_residual(z.view(), g).view())?)
    } else {
        None
    };
    Ok((value, gradient, z))
}

impl Objective for KlWeighted<'_> {
    fn smooth(&self, x: ArrayView3<'_, f64>, grad: bool) -> Result<(f64, Option<Array3<f64>>)> {
        let (v, g, _) = kl_smooth(self.op, x, self.g, self.b, grad)?;
        Ok((v, g))
    }

    fn nonsmooth(&self, x: ArrayView3<'_, f64>) -> f64 {
        inner(&self.weights, &x)
    }

    fn prox(&self, v: &mut Array3<f64>, step: f64) {
        Zip::from(v)
            .and(&self.weights)
            .for_each(|v, &w| *v = (*v - step * w).max(0.0));
    }
}

/// `min_{x ≥ 0} Σ(z − g ln z) + μ Σ x/(a + x)` by reweighted ℓ1: each round
/// freezes `ω = a/(a + x)²` and runs the engine on the weighted-ℓ1 surrogate,
/// warm-started from the previous round.
pub fn solve_kl_nc(g: &Image, op: &ForwardOperator, params: &SolverParams) -> Result<SolveReport> {
    params.validate()?;
    check_image(op, g)?;
    let b = background(g, params);
    if !(b > 0.0) {
        return Err(Error::Config(
            "KL-NC needs a positive background to keep the logarithm finite at x = 0".into(),
        ));
    }
    if g.data.iter().any(|v| *v < 0.0) {
        return Err(Error::Domain("Poisson data must be nonnegative".into()));
    }
    let start = Instant::now();
    let mu = params.mu.unwrap_or(KL_NC_MU);
    let a = params.a;
    let gv = g.data.view();
    let mut x = initial_volume(op, g, b, params.init)?;
    let mut trace = vec![kl_nc_objective(op, x.view(), gv, b, mu, a)?];
    let mut inner_traces = Vec::new();
    let gmax = g.max().max(1.0);
    let mut step = initial_step(params.step, op.norm_bound_sq() * gmax / (b * b));
    let mut iterations = 0;
    let mut calm = 0;
    let mut termination = Termination::MaxIter;
    let mut last = None;

    for _ in 0..params.max_outer {
        let mut weights = losses::irl1_weights(x.view(), a);
        weights *= mu;
        let problem = KlWeighted {
            op,
            g: gv,
            b,
            weights,
        };
        let (f0, _) = problem.smooth(x.view(), false)?;
        let mut inner_trace = vec![f0 + problem.nonsmooth(x.view())];
        let out = mfista(
            &problem,
            x,
            params.max_inner,
            params.step,
            step,
            params.tolerance,
            params.patience,
            &mut inner_trace,
        )?;
        x = out.x;
        step = out.step;
        iterations += out.iterations;
        inner_traces.push(inner_trace);
        let f = kl_nc_objective(op, x.view(), gv, b, mu, a)?;
        let prev = *trace.last().unwrap();
        trace.push(f);
        calm = if rel_change(prev, f) < params.tolerance { calm + 1 } else { 0 };
        let stalled = out.iterations == 0;
        last = Some(problem);
        if calm >= params.patience || stalled {
            termination = Termination::Tolerance;
            break;
        }
    }
    let residual = match &last {
        Some(p) => fixed_point_residual(p, &x, step)?,
        None => 0.0,
    };
    Ok(SolveReport {
        method: "kl-nc".into(),
        volume: Volume::new(x)?,
        objective_trace: trace,
        inner_traces,
        iterations,
        termination,
        fixed_point_residual: residual,
        mu,
        b,
        params: params.clone(),
        wall_time: start.elapsed().as_secs_f64(),
    })
}

struct Composite<'a> {
    op: &'a ForwardOperator,
    g: ArrayView2<'a, f64>,
    gt: ArrayView3<'a, f64>,
    cfg: &'a LossConfig,
    kernel: GaussianKernel3,
}

impl Composite<'_> {
    /// The CEL0 branch is handled by the proximal map; everything else is
    /// smooth on `x ≥ 0`.
    fn cel0_in_prox(&self) -> bool {
        self.cfg.noise == NoiseFamily::Gaussian && self.cfg.w2 > 0.0
    }
}

impl Objective for Composite<'_> {
    fn smooth(&self, x: ArrayView3<'_, f64>, grad: bool) -> Result<(f64, Option<Array3<f64>>)> {
        let mut cfg = self.cfg.clone();
        if self.cel0_in_prox() {
            cfg.w2 = 0.0;
        }
        if cfg.w1 == 0.0 && cfg.w2 == 0.0 && cfg.w3 == 0.0 {
            return Ok((0.0, grad.then(|| Array3::zeros(x.dim()))));
        }
        let v = losses::composite_with_kernel(self.op, x, self.gt, self.g, &cfg, &self.kernel, grad)?;
        Ok((v.total, v.gradient))
    }

    fn nonsmooth(&self, x: ArrayView3<'_, f64>) -> f64 {
        if self.cel0_in_prox() {
            self.cfg.w2 * cel0_value(x, self.op.column_norms().view(), self.cfg.mu).expect("shapes checked")
        } else {
            0.0
        }
    }

    fn prox(&self, v: &mut Array3<f64>, step: f64) {
        if self.cel0_in_prox() {
            let (mu, s) = (self.cfg.mu, step * self.cfg.w2);
            Zip::from(v)
                .and(self.op.column_norms())
                .for_each(|v, &a| *v = cel0_prox_scalar(a, mu, s, *v));
        } else {
            v.mapv_inplace(|e| e.max(0.0));
        }
    }
}

/// Projected (proximal for CEL0) descent on the composite loss with the
/// ground truth fed to the smoothed-MSE term. Runs `max_inner` iterations.
pub fn refine_with_composite(
    g: &Image,
    gt: &Volume,
    op: &ForwardOperator,
    cfg: &LossConfig,
    params: &SolverParams,
) -> Result<SolveReport> {
    params.validate()?;
    cfg.validate()?;
    check_image(op, g)?;
    let (h, w, d) = op.grid();
    if gt.grid() != (h, w, d) {
        return Err(Error::shape((h, w, d), gt.grid()));
    }
    if cfg.noise == NoiseFamily::Poisson && cfg.w1 > 0.0 && !(cfg.b > 0.0) {
        return Err(Error::Config("the KL term needs a positive background".into()));
    }
    let start = Instant::now();
    let problem = Composite {
        op,
        g: g.data.view(),
        gt: gt.view(),
        cfg,
        kernel: cfg.kernel(),
    };
    let x0 = initial_volume(op, g, cfg.b, params.init)?;
    let (f0, _) = problem.smooth(x0.view(), false)?;
    let mut trace = vec![f0 + problem.nonsmooth(x0.view())];
    let fidelity_lip = match cfg.noise {
        NoiseFamily::Gaussian => 2.0 * op.norm_bound_sq(),
        NoiseFamily::Poisson => op.norm_bound_sq() * g.max().max(1.0) / (cfg.b * cfg.b).max(1e-300),
    };
    let reg_lip = match cfg.noise {
        NoiseFamily::Gaussian => 0.0,
        NoiseFamily::Poisson => 2.0 / (cfg.a * cfg.a),
    };
    let lip = cfg.w1 * fidelity_lip + cfg.w2 * reg_lip + cfg.w3 * 2.0;
    let step0 = initial_step(params.step, lip);
    let out = mfista(
        &problem,
        x0,
        params.max_inner,
        params.step,
        step0,
        params.tolerance,
        params.patience,
        &mut trace,
    )?;
    let residual = fixed_point_residual(&problem, &out.x, out.step)?;
    Ok(SolveReport {
        method: "composite".into(),
        volume: Volume::new(out.x)?,
        objective_trace: trace,
        inner_traces: Vec::new(),
        iterations: out.iterations,
        termination: out.termination,
        fixed_point_residual: residual,
        mu: cfg.mu,
        b: cfg.b,
        params: params.clone(),
        wall_time: start.elapsed().as_secs_f64(),
    })
}
