//! Explicit-Euler evolution of a level set under the localized,
//! parameter-mapped region force.
//!
//! One step computes
//!
//! ```text
//! dphi/dt = delta(phi) * [ mu * kappa - l1 * (I - m1)^2 + l2 * (I - m2)^2 ] + nu * R(phi)
//! phi'    = phi + dt * dphi/dt
//! ```
//!
//! where `m1`, `m2` are the interior/exterior intensity means inside the
//! `(2f+1)^2` window around each pixel, `kappa` is the curvature of the level
//! lines and `R` is the double-well distance regularizer. With `phi > 0`
//! inside, a large `l1` pushes the contour inward and a large `l2` pushes it
//! outward. The force descends [`energy`].

use crate::error::{Error, Result};
use crate::field::{
    box_sum, dirac_scalar, heaviside, spatial_derivatives, window_area, Derivatives, Field,
    LevelSet, ParameterMaps, Stencil,
};

/// How the region force is discretized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataForce {
    /// Residuals against the window means of the pixel itself.
    Pointwise,
    /// Residuals of the pixel against the means of every window containing
    /// it, summed over those windows.
    Windowed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvolutionConfig {
    /// Length penalty weight.
    pub mu: f64,
    /// Heaviside smoothing width in pixels.
    pub epsilon: f64,
    /// Explicit Euler time step.
    pub dt: f64,
    /// Number of unrolled steps.
    pub steps: usize,
    /// Half-width `f` of the local statistics window.
    pub half_window: usize,
    /// Numerical floor for window masses and gradient norms.
    pub eta: f64,
    /// Extra floor on `|grad phi|^2` in the curvature denominator during
    /// evolution. With only `eta` the curvature near critical points of
    /// `phi` is unbounded and gradients through the unrolled steps explode.
    pub curvature_floor: f64,
    /// Distance regularization weight.
    pub nu: f64,
    pub data_force: DataForce,
    /// Multiply the region force by a second `delta(phi)`.
    pub dirac_in_data: bool,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            mu: 0.2,
            epsilon: 1.0,
            dt: 2.0,
            steps: 60,
            half_window: 5,
            eta: 1e-8,
            curvature_floor: 0.01,
            nu: 0.02,
            data_force: DataForce::Pointwise,
            dirac_in_data: false,
        }
    }
}

impl EvolutionConfig {
    /// Regularizer of the curvature denominator used by the evolution.
    pub fn curvature_eta(&self) -> f64 {
        self.eta + self.curvature_floor
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return bad("mu must be finite and >= 0");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be > 0");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be > 0");
        }
        if self.steps < 1 {
            return bad("steps (L) must be >= 1");
        }
        if self.half_window < 1 {
            return bad("half_window (f) must be >= 1");
        }
        if !(self.eta > 0.0 && self.eta <= 1e-6) {
            return bad("eta must lie in (0, 1e-6]");
        }
        if !(self.curvature_floor >= 0.0 && self.curvature_floor.is_finite()) {
            return bad("curvature_floor must be finite and >= 0");
        }
        if !(self.nu >= 0.0 && self.nu.is_finite()) {
            return bad("nu must be finite and >= 0");
        }
        Ok(())
    }
}

/// Level-line curvature `div(grad phi / |grad phi|)` from central differences.
pub fn curvature(phi: &LevelSet, eta: f64) -> Result<Field> {
    let d = spatial_derivatives(phi)?;
    Ok(curvature_from(&d, eta))
}

pub(crate) fn curvature_from(d: &Derivatives, eta: f64) -> Field {
    let n = d.dx.len();
    let mut out = Field::zeros(d.dx.width(), d.dx.height());
    let (px, py) = (d.dx.data(), d.dy.data());
    let (pxx, pyy, pxy) = (d.dxx.data(), d.dyy.data(), d.dxy.data());
    for (i, k) in out.data_mut().iter_mut().enumerate().take(n) {
        let num = pxx[i] * py[i] * py[i] - 2.0 * pxy[i] * px[i] * py[i] + pyy[i] * px[i] * px[i];
        let den = px[i] * px[i] + py[i] * py[i] + eta;
        *k = num / (den * den.sqrt());
    }
    out
}

/// Interior and exterior window statistics.
#[derive(Clone, Debug)]
pub struct LocalMeans {
    pub m1: Field,
    pub m2: Field,
    /// Windowed sum of `H`, before the `eta` floor.
    pub inside_mass: Field,
    /// Windowed sum of `1 - H`, before the `eta` floor.
    pub outside_mass: Field,
}

/// Interior/exterior intensity means over each clipped window:
/// `m1 = B(H I) / max(B(H), eta)`, `m2 = B((1-H) I) / max(B(1-H), eta)`.
pub fn local_means(image: &Field, heaviside: &Field, f: usize, eta: f64) -> Result<LocalMeans> {
    heaviside.ensure_dims(image.dims())?;
    Ok(WindowTotals::new(image, f).means(image, heaviside, f, eta))
}

/// Window sums that do not depend on the level set: `B(1)` and `B(I)`.
/// The exterior statistics follow from them by subtraction.
pub(crate) struct WindowTotals {
    area: Field,
    image_sum: Field,
}

impl WindowTotals {
    pub(crate) fn new(image: &Field, f: usize) -> Self {
        WindowTotals {
            area: window_area(image.width(), image.height(), f),
            image_sum: box_sum(image, f),
        }
    }

    fn means(&self, image: &Field, heaviside: &Field, f: usize, eta: f64) -> LocalMeans {
        let inside = box_sum(heaviside, f);
        let s1 = box_sum(&heaviside.zip_map(image, |h, i| h * i), f);
        let outside = self.area.zip_map(&inside, |a, m| a - m);
        let s2 = self.image_sum.zip_map(&s1, |t, s| t - s);
        let m1 = s1.zip_map(&inside, |s, a| s / a.max(eta));
        let m2 = s2.zip_map(&outside, |s, a| s / a.max(eta));
        LocalMeans {
            m1,
            m2,
            inside_mass: inside,
            outside_mass: outside,
        }
    }
}

/// Weight of the double-well potential derivative, `p'(s)/s`.
#[inline]
pub(crate) fn well_weight(s: f64) -> f64 {
    if s <= 1.0 {
        let a = 2.0 * std::f64::consts::PI * s;
        a.sin() / a
    } else {
        1.0 - 1.0 / s
    }
}

/// [`well_weight`] and its derivative from one `sin_cos`.
#[inline]
pub(crate) fn well_weight_with_derivative(s: f64) -> (f64, f64) {
    if s <= 1.0 {
        let a = 2.0 * std::f64::consts::PI * s;
        let (sin, cos) = a.sin_cos();
        (sin / a, (cos - sin / a) / s)
    } else {
        (1.0 - 1.0 / s, 1.0 / (s * s))
    }
}

/// Distance regularization `div(p'(|grad phi|)/|grad phi| grad phi)` with the
/// double-well potential, evaluated as `lap(phi) + div((w - 1) grad phi)` so
/// the unit-weight part uses the compact 5-point Laplacian.
///
/// Vanishes where `|grad phi| = 1`, diffuses where the gradient is steeper
/// and sharpens where it is between 1/2 and 1.
pub fn distance_regularize(phi: &LevelSet, eta: f64) -> Result<Field> {
    let d = spatial_derivatives(phi)?;
    Ok(regularizer_from(phi, &d, eta))
}

pub(crate) fn regularizer_from(phi: &Field, d: &Derivatives, eta: f64) -> Field {
    let (fx, fy) = regularizer_flux(d, eta);
    let mut r = Stencil::LAPLACE.apply(phi);
    r.add_assign(&Stencil::DX.apply(&fx));
    r.add_assign(&Stencil::DY.apply(&fy));
    r
}

fn regularizer_flux(d: &Derivatives, eta: f64) -> (Field, Field) {
    let g = d
        .dx
        .zip_map(&d.dy, |a, b| well_weight((a * a + b * b + eta).sqrt()) - 1.0);
    (
        g.zip_map(&d.dx, |g, a| g * a),
        g.zip_map(&d.dy, |g, b| g * b),
    )
}

/// Quantities from one forward step that the reverse pass reuses.
#[derive(Clone, Debug)]
pub struct StepCache {
    pub heaviside: Field,
    pub dirac: Field,
    pub m1: Field,
    pub m2: Field,
    pub inside_mass: Field,
    pub outside_mass: Field,
    pub curvature: Field,
}

/// Unweighted region force before any `delta` factor.
fn region_force(image: &Field, maps: &ParameterMaps, means: &LocalMeans, cfg: &EvolutionConfig) -> Field {
    let (l1, l2) = (maps.lambda1.data(), maps.lambda2.data());
    let (m1, m2) = (means.m1.data(), means.m2.data());
    match cfg.data_force {
        DataForce::Pointwise => {
            let mut out = Field::zeros(image.width(), image.height());
            for (i, (o, &v)) in out.data_mut().iter_mut().zip(image.data()).enumerate() {
                let r1 = v - m1[i];
                let r2 = v - m2[i];
                *o = -l1[i] * r1 * r1 + l2[i] * r2 * r2;
            }
            out
        }
        DataForce::Windowed => {
            let f = cfg.half_window;
            let expand = |l: &Field, m: &Field| {
                (
                    box_sum(l, f),
                    box_sum(&l.zip_map(m, |a, b| a * b), f),
                    box_sum(&l.zip_map(m, |a, b| a * b * b), f),
                )
            };
            let (a1, b1, c1) = expand(&maps.lambda1, &means.m1);
            let (a2, b2, c2) = expand(&maps.lambda2, &means.m2);
            Field::from_fn(image.width(), image.height(), |x, y| {
                let v = image.get(x, y);
                let t1 = v * v * a1.get(x, y) - 2.0 * v * b1.get(x, y) + c1.get(x, y);
                let t2 = v * v * a2.get(x, y) - 2.0 * v * b2.get(x, y) + c2.get(x, y);
                t2 - t1
            })
        }
    }
}

fn check_inputs(phi: &Field, image: &Field, maps: &ParameterMaps) -> Result<()> {
    phi.ensure_min_dims()?;
    image.ensure_dims(phi.dims())?;
    maps.lambda1.ensure_dims(phi.dims())?;
    maps.lambda2.ensure_dims(phi.dims())?;
    Ok(())
}

/// The `delta`-weighted region force alone (no curvature, no regularizer).
pub fn data_force(
    phi: &LevelSet,
    image: &Field,
    maps: &ParameterMaps,
    cfg: &EvolutionConfig,
) -> Result<Field> {
    check_inputs(phi, image, maps)?;
    let h = heaviside(phi, cfg.epsilon);
    let means = local_means(image, &h, cfg.half_window, cfg.eta)?;
    let data = region_force(image, maps, &means, cfg);
    Ok(Field::from_fn(phi.width(), phi.height(), |x, y| {
        let dlt = dirac_scalar(phi.get(x, y), cfg.epsilon);
        let w = if cfg.dirac_in_data { dlt * dlt } else { dlt };
        w * data.get(x, y)
    }))
}

fn step_impl(
    phi: &Field,
    image: &Field,
    totals: &WindowTotals,
    maps: &ParameterMaps,
    cfg: &EvolutionConfig,
) -> Result<(Field, StepCache)> {
    let d = spatial_derivatives(phi)?;
    let kappa = curvature_from(&d, cfg.curvature_eta());
    let h = heaviside(phi, cfg.epsilon);
    let dlt = phi.map(|v| dirac_scalar(v, cfg.epsilon));
    let means = totals.means(image, &h, cfg.half_window, cfg.eta);
    let data = region_force(image, maps, &means, cfg);
    let reg = if cfg.nu > 0.0 {
        Some(regularizer_from(phi, &d, cfg.eta))
    } else {
        None
    };

    let mut next = phi.clone();
    {
        let out = next.data_mut();
        let (k, dd, dl) = (kappa.data(), data.data(), dlt.data());
        for i in 0..out.len() {
            let region = if cfg.dirac_in_data { dl[i] * dd[i] } else { dd[i] };
            let mut speed = dl[i] * (cfg.mu * k[i] + region);
            if let Some(r) = &reg {
                speed += cfg.nu * r.data()[i];
            }
            out[i] += cfg.dt * speed;
        }
    }
    let cache = StepCache {
        heaviside: h,
        dirac: dlt,
        m1: means.m1,
        m2: means.m2,
        inside_mass: means.inside_mass,
        outside_mass: means.outside_mass,
        curvature: kappa,
    };
    Ok((next, cache))
}

/// One explicit Euler step. Returns the updated level set and the cached
/// intermediates of the step.
pub fn evolution_step(
    phi: &LevelSet,
    image: &Field,
    maps: &ParameterMaps,
    cfg: &EvolutionConfig,
) -> Result<(LevelSet, StepCache)> {
    check_inputs(phi, image, maps)?;
    let totals = WindowTotals::new(image, cfg.half_window);
    let (next, cache) = step_impl(phi, image, &totals, maps, cfg)?;
    if let Some((x, y)) = next.first_non_finite() {
        return Err(Error::NonFinite { step: 1, x, y });
    }
    Ok((next, cache))
}

/// Full record of an unrolled evolution: `phis[0..=L]` and the cache of
/// each of the `L` steps.
#[derive(Clone, Debug)]
pub struct EvolutionTrace {
    pub config: EvolutionConfig,
    pub image: Field,
    pub maps: ParameterMaps,
    pub phis: Vec<LevelSet>,
    pub caches: Vec<StepCache>,
}

impl EvolutionTrace {
    pub fn final_phi(&self) -> &LevelSet {
        self.phis.last().expect("trace holds at least phi0")
    }

    pub fn initial_phi(&self) -> &LevelSet {
        &self.phis[0]
    }

    /// Number of evolution steps recorded.
    pub fn steps(&self) -> usize {
        self.caches.len()
    }
}

/// Runs `cfg.steps` evolution steps, recording everything the reverse pass
/// needs.
pub fn evolve(
    phi0: &LevelSet,
    image: &Field,
    maps: &ParameterMaps,
    cfg: &EvolutionConfig,
) -> Result<EvolutionTrace> {
    cfg.validate()?;
    check_inputs(phi0, image, maps)?;
    let mut phis = Vec::with_capacity(cfg.steps + 1);
    let mut caches = Vec::with_capacity(cfg.steps);
    phis.push(phi0.clone());
    let totals = WindowTotals::new(image, cfg.half_window);
    for step in 1..=cfg.steps {
        let (next, cache) = step_impl(phis.last().unwrap(), image, &totals, maps, cfg)?;
        if let Some((x, y)) = next.first_non_finite() {
            return Err(Error::NonFinite { step, x, y });
        }
        phis.push(next);
        caches.push(cache);
    }
    Ok(EvolutionTrace {
        config: cfg.clone(),
        image: image.clone(),
        maps: maps.clone(),
        phis,
        caches,
    })
}

/// Forward-only evolution that keeps just the current level set.
pub fn evolve_final(
    phi0: &LevelSet,
    image: &Field,
    maps: &ParameterMaps,
    cfg: &EvolutionConfig,
) -> Result<LevelSet> {
    cfg.validate()?;
    check_inputs(phi0, image, maps)?;
    let mut phi = phi0.clone();
    let totals = WindowTotals::new(image, cfg.half_window);
    for step in 1..=cfg.steps {
        phi = step_impl(&phi, image, &totals, maps, cfg)?.0;
        if let Some((x, y)) = phi.first_non_finite() {
            return Err(Error::NonFinite { step, x, y });
        }
    }
    Ok(phi)
}

/// Discrete localized region energy plus contour length:
///
/// ```text
/// E = mu * sum delta(phi) sqrt(|grad phi|^2 + eta + curvature_floor)
///   + sum_x 1/|W_x| sum_{y in W_x} [ l1(x) H(y) (I(y) - m1(x))^2 + l2(x) (1 - H(y)) (I(y) - m2(x))^2 ]
/// ```
///
/// Each window contributes the mean squared residual of its own interior and
/// exterior model. The regularizer has no energy term here, so descent holds
/// for `nu = 0`.
pub fn energy(phi: &LevelSet, image: &Field, maps: &ParameterMaps, cfg: &EvolutionConfig) -> Result<f64> {
    check_inputs(phi, image, maps)?;
    let f = cfg.half_window;
    let d = spatial_derivatives(phi)?;
    let h = heaviside(phi, cfg.epsilon);
    let length: f64 = phi
        .data()
        .iter()
        .zip(d.dx.data().iter().zip(d.dy.data()))
        .map(|(&p, (&a, &b))| dirac_scalar(p, cfg.epsilon) * (a * a + b * b + cfg.curvature_eta()).sqrt())
        .sum();
    let means = local_means(image, &h, f, cfg.eta)?;
    let hi = box_sum(&h.zip_map(image, |h, i| h * i), f);
    let hii = box_sum(&h.zip_map(image, |h, i| h * i * i), f);
    let oi = box_sum(&h.zip_map(image, |h, i| (1.0 - h) * i), f);
    let oii = box_sum(&h.zip_map(image, |h, i| (1.0 - h) * i * i), f);
    let area = window_area(phi.width(), phi.height(), f);
    let mut region = 0.0;
    for i in 0..phi.len() {
        let (m1, m2) = (means.m1.data()[i], means.m2.data()[i]);
        let inner1 = hii.data()[i] - 2.0 * m1 * hi.data()[i] + m1 * m1 * means.inside_mass.data()[i];
        let inner2 = oii.data()[i] - 2.0 * m2 * oi.data()[i] + m2 * m2 * means.outside_mass.data()[i];
        region += (maps.lambda1.data()[i] * inner1 + maps.lambda2.data()[i] * inner2) / area.data()[i];
    }
    Ok(cfg.mu * length + region)
}
