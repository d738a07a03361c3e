//! Objectives, gradients and proximal maps.
//!
//! Volumes are `(D, H, W)` arrays on the flux scale. Gradients of the
//! penalties are taken on the nonnegative orthant, where every solver lives.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::ForwardOperator;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFamily {
    Gaussian,
    Poisson,
}

pub const DEFAULT_KERNEL_SIGMA: f64 = 1.0;
pub const DEFAULT_KERNEL_RADIUS: usize = 3;

/// Weights and parameters of the composite objective
/// `w1·D(Ax + b, g) + w2·R(x) + w3·‖G∗(x − gt)‖²`.
///
/// `D` is the squared residual for Gaussian data and the KL divergence for
/// Poisson data; `R` is the CEL0 penalty with parameter `mu` for Gaussian data
/// and `Σ θ(a; x)` for Poisson data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub noise: NoiseFamily,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub mu: f64,
    pub a: f64,
    pub b: f64,
    pub kernel_sigma: f64,
    pub kernel_radius: usize,
}

impl LossConfig {
    /// Weights 1 : 700 : 1000.
    pub fn gaussian_defaults(mu: f64, b: f64) -> Self {
        LossConfig {
            noise: NoiseFamily::Gaussian,
            w1: 1.0,
            w2: 700.0,
            w3: 1000.0,
            mu,
            a: 100.0,
            b,
            kernel_sigma: DEFAULT_KERNEL_SIGMA,
            kernel_radius: DEFAULT_KERNEL_RADIUS,
        }
    }

    /// Weights 1 : 1 : 500.
    pub fn poisson_defaults(a: f64, b: f64) -> Self {
        LossConfig {
            noise: NoiseFamily::Poisson,
            w1: 1.0,
            w2: 1.0,
            w3: 500.0,
            mu: 1.0,
            a,
            b,
            kernel_sigma: DEFAULT_KERNEL_SIGMA,
            kernel_radius: DEFAULT_KERNEL_RADIUS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ws = [self.w1, self.w2, self.w3];
        if ws.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if ws.iter().all(|w| *w == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        if !(self.mu > 0.0) || !(self.a > 0.0) || !(self.kernel_sigma > 0.0) {
            return Err(Error::Config("mu, a and kernel_sigma must be positive".into()));
        }
        if self.kernel_radius == 0 {
            return Err(Error::Config("kernel_radius must be positive".into()));
        }
        if !(self.b >= 0.0) {
            return Err(Error::Config("background must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn kernel(&self) -> GaussianKernel3 {
        GaussianKernel3::new(self.kernel_sigma, self.kernel_radius)
    }
}

/// One objective term with an optional gradient.
#[derive(Clone, Debug)]
pub struct Term {
    pub value: f64,
    pub gradient: Option<Array3<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub fidelity: f64,
    pub regularizer: f64,
    pub mse: f64,
}

#[derive(Clone, Debug)]
pub struct LossValue {
    pub total: f64,
    pub parts: LossParts,
    pub gradient: Option<Array3<f64>>,
}

fn check_image(op: &ForwardOperator, g: &ArrayView2<'_, f64>) -> Result<()> {
    let (h, w, _) = op.grid();
    if g.dim() != (h, w) {
        return Err(Error::shape((h, w), g.dim()));
    }
    Ok(())
}

/// `‖Ax + b − g‖²_F`.
pub fn gaussian_fidelity(
    op: &ForwardOperator,
    x: ArrayView3<'_, f64>,
    b: f64,
    g: ArrayView2<'_, f64>,
    want_grad: bool,
) -> Result<Term> {
    check_image(op, &g)?;
    let mut r = op.apply(x)?;
    Zip::from(&mut r).and(&g).for_each(|r, &g| *r += b - g);
    let value = r.iter().map(|v| v * v).sum();
    let gradient = if want_grad {
        let mut grad = op.adjoint(r.view())?;
        grad *= 2.0;
        Some(grad)
    } else {
        None
    };
    Ok(Term { value, gradient })
}

/// Pixelwise `g ln(g/z) + z − g`, with `0 ln 0 = 0`.
pub fn kl_divergence_pixel(z: f64, g: f64) -> f64 {
    if g > 0.0 {
        g * (g / z).ln() + z - g
    } else {
        z - g
    }
}

/// `Σ (z − g ln z)`: the divergence without its `x`-independent part.
pub fn kl_objective_image(z: ArrayView2<'_, f64>, g: ArrayView2<'_, f64>) -> Result<f64> {
    let mut acc = 0.0;
    for (&z, &g) in z.iter().zip(g.iter()) {
        if g > 0.0 {
            if !(z > 0.0) {
                return Err(Error::Domain(format!(
                    "model intensity {z} is not positive where the data is {g}"
                )));
            }
            acc += z - g * z.ln();
        } else {
            acc += z;
        }
    }
    Ok(acc)
}

fn kl_divergence_image(z: ArrayView2<'_, f64>, g: ArrayView2<'_, f64>) -> Result<f64> {
    let mut acc = 0.0;
    for (&z, &g) in z.iter().zip(g.iter()) {
        if g > 0.0 && !(z > 0.0) {
            return Err(Error::Domain(format!(
                "model intensity {z} is not positive where the data is {g}"
            )));
        }
        acc += kl_divergence_pixel(z, g);
    }
    Ok(acc)
}

#[derive(Clone, Debug)]
pub struct KlTerm {
    /// Full divergence, `≥ 0` and zero at a perfect fit.
    pub divergence: f64,
    /// `Σ (z − g ln z)`, what the solvers minimize.
    pub objective: f64,
    pub gradient: Option<Array3<f64>>,
}

/// `D_KL(Ax + b, g)`; gradient `Aᵀ(1 − g/z)`.
pub fn kl_fidelity(
    op: &ForwardOperator,
    x: ArrayView3<'_, f64>,
    b: f64,
    g: ArrayView2<'_, f64>,
    want_grad: bool,
) -> Result<KlTerm> {
    check_image(op, &g)?;
    let mut z = op.apply(x)?;
    z.mapv_inplace(|v| v + b);
    let divergence = kl_divergence_image(z.view(), g)?;
    let objective = kl_objective_image(z.view(), g)?;
    let gradient = if want_grad {
        Some(op.adjoint(kl_residual(z.view(), g).view())?)
    } else {
        None
    };
    Ok(KlTerm {
        divergence,
        objective,
        gradient,
    })
}

/// `1 − g/z`, the image-space gradient of the KL objective.
pub(crate) fn kl_residual(z: ArrayView2<'_, f64>, g: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::zeros(z.dim());
    Zip::from(&mut out)
        .and(&z)
        .and(&g)
        .for_each(|o, &z, &g| *o = if g > 0.0 { 1.0 - g / z } else { 1.0 });
    out
}

/// CEL0 threshold `√(2μ)/a`.
pub fn cel0_threshold(a: f64, mu: f64) -> f64 {
    (2.0 * mu).sqrt() / a
}

/// `φ(a, μ; u) = μ − (a²/2)(|u| − √(2μ)/a)²` below the threshold, `μ` above.
pub fn cel0_phi(a: f64, mu: f64, u: f64) -> f64 {
    let t = cel0_threshold(a, mu);
    let m = u.abs();
    if m <= t {
        let d = m - t;
        // clamp the rounding noise around 0 and μ
        (mu - 0.5 * a * a * d * d).clamp(0.0, mu)
    } else {
        mu
    }
}

/// Derivative of `φ` in `u ≥ 0`: `a²(θ − u)` below the threshold, 0 from the
/// threshold on (the flat branch takes the kink) and 0 at the origin.
pub fn cel0_phi_derivative(a: f64, mu: f64, u: f64) -> f64 {
    let t = cel0_threshold(a, mu);
    let m = u.abs();
    if m == 0.0 || m >= t {
        0.0
    } else {
        u.signum() * a * a * (t - m)
    }
}

fn check_norms(x: &ArrayView3<'_, f64>, norms: &ArrayView3<'_, f64>) -> Result<()> {
    if x.dim() != norms.dim() {
        return Err(Error::shape(norms.dim(), x.dim()));
    }
    if let Some(bad) = norms.iter().find(|n| !(**n > 0.0)) {
        return Err(Error::Domain(format!("column norm {bad} must be positive")));
    }
    Ok(())
}

/// `Σ φ(norms_ijk, μ; x_ijk)`.
pub fn cel0_value(x: ArrayView3<'_, f64>, norms: ArrayView3<'_, f64>, mu: f64) -> Result<f64> {
    check_norms(&x, &norms)?;
    let mut acc = 0.0;
    Zip::from(&x).and(&norms).for_each(|&u, &a| acc += cel0_phi(a, mu, u));
    Ok(acc)
}

pub fn cel0_gradient(x: ArrayView3<'_, f64>, norms: ArrayView3<'_, f64>, mu: f64) -> Result<Array3<f64>> {
    check_norms(&x, &norms)?;
    let mut out = Array3::zeros(x.dim());
    Zip::from(&mut out)
        .and(&x)
        .and(&norms)
        .for_each(|o, &u, &a| *o = cel0_phi_derivative(a, mu, u));
    Ok(out)
}

/// `argmin_{v ≥ 0} (v − u)²/(2·step) + φ(a, μ; v)`.
///
/// The objective is a quadratic on each side of the threshold, so the minimum
/// is among the origin, the threshold, and the clipped stationary point of each
/// piece. Ties go to the smaller candidate.
pub fn cel0_prox_scalar(a: f64, mu: f64, step: f64, u: f64) -> f64 {
    let t = cel0_threshold(a, mu);
    let h = |v: f64| (v - u) * (v - u) / (2.0 * step) + cel0_phi(a, mu, v);
    let curv = 1.0 - step * a * a;
    let inner = if curv > 0.0 {
        ((u - step * a * a * t) / curv).clamp(0.0, t)
    } else {
        0.0
    };
    let mut best = 0.0;
    let mut best_h = h(0.0);
    for v in [inner, t, u.max(t)] {
        let hv = h(v);
        if hv < best_h {
            best = v;
            best_h = hv;
        }
    }
    best
}

pub fn cel0_prox(
    x: ArrayView3<'_, f64>,
    norms: ArrayView3<'_, f64>,
    mu: f64,
    step: f64,
) -> Result<Array3<f64>> {
    check_norms(&x, &norms)?;
    let mut out = Array3::zeros(x.dim());
    Zip::from(&mut out)
        .and(&x)
        .and(&norms)
        .for_each(|o, &u, &a| *o = cel0_prox_scalar(a, mu, step, u));
    Ok(out)
}

/// `Σ |x|/(a + |x|)`.
pub fn nc_value(x: ArrayView3<'_, f64>, a: f64) -> f64 {
    x.iter().map(|v| v.abs() / (a + v.abs())).sum()
}

/// `a/(a + x)²`, the derivative of `θ(a; ·)` on `x ≥ 0`.
pub fn nc_gradient(x: ArrayView3<'_, f64>, a: f64) -> Array3<f64> {
    x.mapv(|v| {
        let s = if v < 0.0 { -1.0 } else { 1.0 };
        s * a / ((a + v.abs()) * (a + v.abs()))
    })
}

/// Weights `a/(a + |x|)²` of the reweighted-ℓ1 linearization.
pub fn irl1_weights(x: ArrayView3<'_, f64>, a: f64) -> Array3<f64> {
    x.mapv(|v| a / ((a + v.abs()) * (a + v.abs())))
}

/// Separable Gaussian smoothing kernel, truncated at `radius` and normalized
/// to unit sum.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianKernel3 {
    taps: Vec<f64>,
}

impl GaussianKernel3 {
    pub fn new(sigma: f64, radius: usize) -> Self {
        let r = radius as isize;
        let raw: Vec<f64> = (-r..=r)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        GaussianKernel3 {
            taps: raw.iter().map(|v| v / total).collect(),
        }
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn radius(&self) -> usize {
        self.taps.len() / 2
    }

    /// `‖G‖²_F` of the full 3-D kernel.
    pub fn norm_sq(&self) -> f64 {
        self.taps.iter().map(|t| t * t).sum::<f64>().powi(3)
    }

    /// Zero-padded, same-size convolution along all three axes.
    pub fn smooth(&self, x: ArrayView3<'_, f64>) -> Array3<f64> {
        let mut cur = x.to_owned();
        for axis in 0..3 {
            cur = self.along(cur.view(), Axis(axis));
        }
        cur
    }

    fn along(&self, x: ArrayView3<'_, f64>, axis: Axis) -> Array3<f64> {
        let mut out = Array3::zeros(x.dim());
        let r = self.radius() as isize;
        let n = x.len_of(axis) as isize;
        for (src, mut dst) in x.lanes(axis).into_iter().zip(out.lanes_mut(axis)) {
            for i in 0..n {
                let mut acc = 0.0;
                for (t, &w) in self.taps.iter().enumerate() {
                    let j = i + t as isize - r;
                    if (0..n).contains(&j) {
                        acc += w * src[j as usize];
                    }
                }
                dst[i as usize] = acc;
            }
        }
        out
    }
}

/// `‖G∗(x − gt)‖²_F`; gradient `2·G∗G∗(x − gt)` (the kernel is symmetric).
pub fn mse_smoothed(
    x: ArrayView3<'_, f64>,
    gt: ArrayView3<'_, f64>,
    kernel: &GaussianKernel3,
    want_grad: bool,
) -> Result<Term> {
    if x.dim() != gt.dim() {
        return Err(Error::shape(gt.dim(), x.dim()));
    }
    let diff = &x - &gt;
    let s = kernel.smooth(diff.view());
    let value = s.iter().map(|v| v * v).sum();
    let gradient = want_grad.then(|| {
        let mut g = kernel.smooth(s.view());
        g *= 2.0;
        g
    });
    Ok(Term { value, gradient })
}

/// The composite objective. For Gaussian data the regularizer uses the
/// operator's column norms.
pub fn composite_loss(
    op: &ForwardOperator,
    x: ArrayView3<'_, f64>,
    gt: ArrayView3<'_, f64>,
    g: ArrayView2<'_, f64>,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<LossValue> {
    composite_with_kernel(op, x, gt, g, cfg, &cfg.kernel(), want_grad)
}

pub(crate) fn composite_with_kernel(
    op: &ForwardOperator,
    x: ArrayView3<'_, f64>,
    gt: ArrayView3<'_, f64>,
    g: ArrayView2<'_, f64>,
    cfg: &LossConfig,
    kernel: &GaussianKernel3,
    want_grad: bool,
) -> Result<LossValue> {
    cfg.validate()?;
    if x.dim() != gt.dim() {
        return Err(Error::shape(gt.dim(), x.dim()));
    }
    let mut grad = want_grad.then(|| Array3::zeros(x.dim()));
    let add = |grad: &mut Option<Array3<f64>>, w: f64, part: Option<Array3<f64>>| {
        if let (Some(acc), Some(p)) = (grad.as_mut(), part) {
            acc.scaled_add(w, &p);
        }
    };

    let mut parts = LossParts::default();
    if cfg.w1 > 0.0 {
        let (value, part) = match cfg.noise {
            NoiseFamily::Gaussian => {
                let t = gaussian_fidelity(op, x, cfg.b, g, want_grad)?;
                (t.value, t.gradient)
            }
            NoiseFamily::Poisson => {
                let t = kl_fidelity(op, x, cfg.b, g, want_grad)?;
                (t.divergence, t.gradient)
            }
        };
        parts.fidelity = value;
        add(&mut grad, cfg.w1, part);
    }
    if cfg.w2 > 0.0 {
        match cfg.noise {
            NoiseFamily::Gaussian => {
                let norms = op.column_norms().view();
                parts.regularizer = cel0_value(x, norms, cfg.mu)?;
                let part = if want_grad { Some(cel0_gradient(x, norms, cfg.mu)?) } else { None };
                add(&mut grad, cfg.w2, part);
            }
            NoiseFamily::Poisson => {
                parts.regularizer = nc_value(x, cfg.a);
                add(&mut grad, cfg.w2, want_grad.then(|| nc_gradient(x, cfg.a)));
            }
        }
    }
    if cfg.w3 > 0.0 {
        let t = mse_smoothed(x, gt, kernel, want_grad)?;
        parts.mse = t.value;
        add(&mut grad, cfg.w3, t.gradient);
    }
    Ok(LossValue {
        total: cfg.w1 * parts.fidelity + cfg.w2 * parts.regularizer + cfg.w3 * parts.mse,
        parts,
        gradient: grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::tests::tiny_dict;

    #[test]
    fn kl_single_pixel() {
        assert!((kl_divergence_pixel(2.0, 1.0) - (1.0 - 2f64.ln())).abs() < 1e-15);
        assert_eq!(kl_divergence_pixel(3.0, 3.0), 0.0);
        assert_eq!(kl_divergence_pixel(0.5, 0.0), 0.5);
    }

    #[test]
    fn kl_rejects_nonpositive_intensity() {
        let op = ForwardOperator::new(&tiny_dict());
        let x = Array3::zeros((3, 12, 10));
        let g = Array2::from_elem((12, 10), 1.0);
        assert!(matches!(
            kl_fidelity(&op, x.view(), 0.0, g.view(), false),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn cel0_examples() {
        assert_eq!(cel0_phi(1.0, 2.0, 0.0), 0.0);
        assert!((cel0_phi(1.0, 2.0, 1.0) - 1.5).abs() < 1e-15);
        assert_eq!(cel0_phi(1.0, 2.0, 2.0), 2.0);
        assert_eq!(cel0_phi(0.3, 2.0, 50.0), 2.0);
    }

    #[test]
    fn cel0_rejects_bad_norms() {
        let x = Array3::zeros((1, 2, 2));
        let mut n = Array3::from_elem((1, 2, 2), 1.0);
        n[[0, 1, 1]] = 0.0;
        assert!(matches!(cel0_value(x.view(), n.view(), 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn cel0_prox_limits() {
        // far above threshold: identity; at zero: zero
        assert_eq!(cel0_prox_scalar(1.0, 0.5, 0.5, 10.0), 10.0);
        assert_eq!(cel0_prox_scalar(1.0, 0.5, 0.5, 0.0), 0.0);
        assert_eq!(cel0_prox_scalar(1.0, 0.5, 0.5, -3.0), 0.0);
    }

    #[test]
    fn nc_examples() {
        let one = Array3::from_elem((1, 1, 1), 1.0);
        assert_eq!(nc_value(one.view(), 1.0), 0.5);
        let big = Array3::from_elem((1, 1, 1), 1e6);
        assert!((nc_value(big.view(), 1.0) - (1.0 - 1e-6)).abs() < 1e-9);
        assert_eq!(nc_value(Array3::zeros((2, 2, 2)).view(), 1.0), 0.0);
        let w = irl1_weights(Array3::zeros((1, 1, 1)).view(), 4.0);
        assert_eq!(w[[0, 0, 0]], 0.25);
    }

    #[test]
    fn kernel_is_normalized() {
        let k = GaussianKernel3::new(1.0, 3);
        assert_eq!(k.taps().len(), 7);
        assert!((k.taps().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn separated_spikes_give_twice_kernel_energy() {
        let k = GaussianKernel3::new(1.0, 3);
        let mut x = Array3::zeros((9, 20, 20));
        let mut gt = Array3::zeros((9, 20, 20));
        x[[4, 4, 4]] = 1.0;
        gt[[4, 14, 14]] = 1.0;
        let t = mse_smoothed(x.view(), gt.view(), &k, false).unwrap();
        assert!((t.value - 2.0 * k.norm_sq()).abs() < 1e-15);
        assert_eq!(mse_smoothed(x.view(), x.view(), &k, false).unwrap().value, 0.0);
    }

    #[test]
    fn composite_reduces_to_mse() {
        let op = ForwardOperator::new(&tiny_dict());
        let x = Array3::from_shape_fn((3, 12, 10), |(k, r, c)| (k + r * c) as f64 * 0.01);
        let gt = Array3::from_elem((3, 12, 10), 0.2);
        let g = Array2::from_elem((12, 10), 1.0);
        let mut cfg = LossConfig::gaussian_defaults(1.0, 0.0);
        cfg.w1 = 0.0;
        cfg.w2 = 0.0;
        let v = composite_loss(&op, x.view(), gt.view(), g.view(), &cfg, false).unwrap();
        let m = mse_smoothed(x.view(), gt.view(), &cfg.kernel(), false).unwrap();
        assert_eq!(v.total, cfg.w3 * m.value);
    }

    #[test]
    fn default_weights() {
        let g = LossConfig::gaussian_defaults(1.0, 5.0);
        assert_eq!((g.w1, g.w2, g.w3), (1.0, 700.0, 1000.0));
        let p = LossConfig::poisson_defaults(100.0, 5.0);
        assert_eq!((p.w1, p.w2, p.w3), (1.0, 1.0, 500.0));
    }
}
