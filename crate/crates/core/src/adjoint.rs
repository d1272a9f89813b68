//! Reverse-mode gradients through the unrolled evolution.
//!
//! Each primitive of [`crate::evolution`] has a hand-written adjoint. The
//! reverse sweep walks the trace backwards, re-deriving the stencil
//! derivatives of each stored level set and reusing the cached Heaviside,
//! Dirac, window masses, means and curvature. Parameter-map adjoints
//! accumulate over all steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evolution::{
    evolve, evolve_final, well_weight_with_derivative, DataForce, EvolutionConfig,
    EvolutionTrace,
};
use crate::field::{box_sum, dirac_derivative_scalar, dirac_scalar, heaviside_scalar, spatial_derivatives, Field, ParameterMaps, Stencil};

/// Gradients of a scalar loss with respect to the evolution inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub d_lambda1: Field,
    pub d_lambda2: Field,
    pub d_phi0: Field,
}

impl GradientBundle {
    pub fn is_finite(&self) -> bool {
        self.d_lambda1.is_finite() && self.d_lambda2.is_finite() && self.d_phi0.is_finite()
    }
}

/// Adjoints of `(phi0, lambda1, lambda2) -> phi_L` applied to the upstream
/// gradient `d_phi_l`.
pub fn backprop_evolution(trace: &EvolutionTrace, d_phi_l: &Field) -> Result<GradientBundle> {
    let steps = trace.config.steps;
    if trace.caches.len() != steps || trace.phis.len() != steps + 1 {
        return Err(Error::IncompleteTrace {
            expected: steps,
            found: trace.caches.len().min(trace.phis.len().saturating_sub(1)),
        });
    }
    d_phi_l.ensure_dims(trace.final_phi().dims())?;
    if !d_phi_l.is_finite() {
        return Err(Error::NonFiniteAdjoint { step: steps });
    }
    let (w, h) = d_phi_l.dims();
    let mut d_lambda1 = Field::zeros(w, h);
    let mut d_lambda2 = Field::zeros(w, h);
    let mut adj = d_phi_l.clone();
    for t in (0..steps).rev() {
        adj = step_adjoint(trace, t, &adj, &mut d_lambda1, &mut d_lambda2)?;
        if !adj.is_finite() || !d_lambda1.is_finite() || !d_lambda2.is_finite() {
            return Err(Error::NonFiniteAdjoint { step: t + 1 });
        }
    }
    Ok(GradientBundle {
        d_lambda1,
        d_lambda2,
        d_phi0: adj,
    })
}

/// Reverse of step `t` (mapping `phis[t]` to `phis[t + 1]`).
fn step_adjoint(
    trace: &EvolutionTrace,
    t: usize,
    upstream: &Field,
    d_lambda1: &mut Field,
    d_lambda2: &mut Field,
) -> Result<Field> {
    let cfg = &trace.config;
    let phi = &trace.phis[t];
    let cache = &trace.caches[t];
    let image = &trace.image;
    let maps = &trace.maps;
    let (w, h) = phi.dims();
    let n = w * h;
    let d = spatial_derivatives(phi)?;

    let mut d_phi = upstream.clone();
    let speed_adj = upstream.scale(cfg.dt);

    // region force before the delta factor, and its weight
    let data = region_force_values(image, maps, &cache.m1, &cache.m2, cfg);
    let dl = cache.dirac.data();
    let kappa = cache.curvature.data();

    let mut d_dirac = vec![0.0; n];
    let mut d_kappa = Field::zeros(w, h);
    let mut d_data = Field::zeros(w, h);
    for i in 0..n {
        let s = speed_adj.data()[i];
        let weight = if cfg.dirac_in_data { dl[i] * dl[i] } else { dl[i] };
        let d_weight = s * data[i];
        d_dirac[i] = s * cfg.mu * kappa[i]
            + if cfg.dirac_in_data {
                2.0 * dl[i] * d_weight
            } else {
                d_weight
            };
        d_kappa.data_mut()[i] = s * dl[i] * cfg.mu;
        d_data.data_mut()[i] = s * weight;
    }

    // region force -> lambda maps and window means
    let (d_m1, d_m2) = region_adjoint(image, maps, &cache.m1, &cache.m2, &d_data, cfg, d_lambda1, d_lambda2);

    // means -> window sums, with the eta clamp passing gradient only when inactive
    let eta = cfg.eta;
    let k_eta = cfg.curvature_eta();
    let mut d_s1 = Field::zeros(w, h);
    let mut d_s2 = Field::zeros(w, h);
    let mut d_a1 = Field::zeros(w, h);
    let mut d_a2 = Field::zeros(w, h);
    for i in 0..n {
        let a1 = cache.inside_mass.data()[i];
        let a2 = cache.outside_mass.data()[i];
        let c1 = a1.max(eta);
        let c2 = a2.max(eta);
        d_s1.data_mut()[i] = d_m1.data()[i] / c1;
        d_s2.data_mut()[i] = d_m2.data()[i] / c2;
        if a1 > eta {
            d_a1.data_mut()[i] = -d_m1.data()[i] * cache.m1.data()[i] / c1;
        }
        if a2 > eta {
            d_a2.data_mut()[i] = -d_m2.data()[i] * cache.m2.data()[i] / c2;
        }
    }
    // H enters the inside sums with sign +1 and the outside sums with -1;
    // the window sum is linear, so the two sides share one pass each
    let f = cfg.half_window;
    let b_a = box_sum(&d_a1.zip_map(&d_a2, |p, q| p - q), f);
    let b_s = box_sum(&d_s1.zip_map(&d_s2, |p, q| p - q), f);
    {
        let out = d_phi.data_mut();
        let img = image.data();
        for i in 0..n {
            let d_heaviside = b_a.data()[i] + img[i] * b_s.data()[i];
            out[i] += d_heaviside * dl[i] + d_dirac[i] * dirac_derivative_scalar(phi.data()[i], cfg.epsilon);
        }
    }

    // curvature -> stencil derivatives
    let mut g_x = Field::zeros(w, h);
    let mut g_y = Field::zeros(w, h);
    let mut g_xx = Field::zeros(w, h);
    let mut g_yy = Field::zeros(w, h);
    let mut g_xy = Field::zeros(w, h);
    for i in 0..n {
        let kb = d_kappa.data()[i];
        if kb == 0.0 {
            continue;
        }
        let (px, py) = (d.dx.data()[i], d.dy.data()[i]);
        let (pxx, pyy, pxy) = (d.dxx.data()[i], d.dyy.data()[i], d.dxy.data()[i]);
        let den = px * px + py * py + k_eta;
        let d3 = 1.0 / (den * den.sqrt());
        let d5 = d3 / den;
        let num = pxx * py * py - 2.0 * pxy * px * py + pyy * px * px;
        g_xx.data_mut()[i] = kb * py * py * d3;
        g_yy.data_mut()[i] = kb * px * px * d3;
        g_xy.data_mut()[i] = -2.0 * kb * px * py * d3;
        g_x.data_mut()[i] = kb * ((2.0 * pyy * px - 2.0 * pxy * py) * d3 - 3.0 * num * px * d5);
        g_y.data_mut()[i] = kb * ((2.0 * pxx * py - 2.0 * pxy * px) * d3 - 3.0 * num * py * d5);
    }

    // distance regularizer: R = lap(phi) + Dx(g phi_x) + Dy(g phi_y)
    if cfg.nu > 0.0 {
        let r_adj = upstream.scale(cfg.dt * cfg.nu);
        Stencil::LAPLACE.apply_transpose_into(&r_adj, &mut d_phi);
        let mut fx_adj = Field::zeros(w, h);
        let mut fy_adj = Field::zeros(w, h);
        Stencil::DX.apply_transpose_into(&r_adj, &mut fx_adj);
        Stencil::DY.apply_transpose_into(&r_adj, &mut fy_adj);
        for i in 0..n {
            let (px, py) = (d.dx.data()[i], d.dy.data()[i]);
            let s = (px * px + py * py + eta).sqrt();
            let (ww, dw) = well_weight_with_derivative(s);
            let g = ww - 1.0;
            let (ax, ay) = (fx_adj.data()[i], fy_adj.data()[i]);
            let g_adj = ax * px + ay * py;
            let chain = g_adj * dw / s;
            g_x.data_mut()[i] += ax * g + chain * px;
            g_y.data_mut()[i] += ay * g + chain * py;
        }
    }

    Stencil::DX.apply_transpose_into(&g_x, &mut d_phi);
    Stencil::DY.apply_transpose_into(&g_y, &mut d_phi);
    Stencil::DXX.apply_transpose_into(&g_xx, &mut d_phi);
    Stencil::DYY.apply_transpose_into(&g_yy, &mut d_phi);
    Stencil::DXY.apply_transpose_into(&g_xy, &mut d_phi);
    Ok(d_phi)
}

fn region_force_values(image: &Field, maps: &ParameterMaps, m1: &Field, m2: &Field, cfg: &EvolutionConfig) -> Vec<f64> {
    match cfg.data_force {
        DataForce::Pointwise => (0..image.len())
            .map(|i| {
                let v = image.data()[i];
                let r1 = v - m1.data()[i];
                let r2 = v - m2.data()[i];
                -maps.lambda1.data()[i] * r1 * r1 + maps.lambda2.data()[i] * r2 * r2
            })
            .collect(),
        DataForce::Windowed => {
            let f = cfg.half_window;
            let term = |l: &Field, m: &Field| {
                let a = box_sum(l, f);
                let b = box_sum(&l.zip_map(m, |p, q| p * q), f);
                let c = box_sum(&l.zip_map(m, |p, q| p * q * q), f);
                (0..image.len())
                    .map(|i| {
                        let v = image.data()[i];
                        v * v * a.data()[i] - 2.0 * v * b.data()[i] + c.data()[i]
                    })
                    .collect::<Vec<_>>()
            };
            let t1 = term(&maps.lambda1, m1);
            let t2 = term(&maps.lambda2, m2);
            t1.iter().zip(&t2).map(|(a, b)| b - a).collect()
        }
    }
}

/// Adjoint of the region force. Accumulates into the lambda gradients and
/// returns the adjoints of `m1` and `m2`.
#[allow(clippy::too_many_arguments)]
fn region_adjoint(
    image: &Field,
    maps: &ParameterMaps,
    m1: &Field,
    m2: &Field,
    d_data: &Field,
    cfg: &EvolutionConfig,
    d_lambda1: &mut Field,
    d_lambda2: &mut Field,
) -> (Field, Field) {
    let (w, h) = image.dims();
    let n = w * h;
    let mut d_m1 = Field::zeros(w, h);
    let mut d_m2 = Field::zeros(w, h);
    match cfg.data_force {
        DataForce::Pointwise => {
            for i in 0..n {
                let g = d_data.data()[i];
                let v = image.data()[i];
                let r1 = v - m1.data()[i];
                let r2 = v - m2.data()[i];
                d_lambda1.data_mut()[i] -= g * r1 * r1;
                d_lambda2.data_mut()[i] += g * r2 * r2;
                d_m1.data_mut()[i] = 2.0 * g * maps.lambda1.data()[i] * r1;
                d_m2.data_mut()[i] = -2.0 * g * maps.lambda2.data()[i] * r2;
            }
        }
        DataForce::Windowed => {
            // T(y) = I^2 B(l) - 2 I B(l m) + B(l m^2), entering with sign s
            let f = cfg.half_window;
            let term = |sign: f64, l: &Field, m: &Field, d_l: &mut Field, d_m: &mut Field| {
                let a = d_data.scale(sign);
                let b_aii = box_sum(&a.zip_map(image, |g, v| g * v * v), f);
                let b_ai = box_sum(&a.zip_map(image, |g, v| -2.0 * g * v), f);
                let b_a = box_sum(&a, f);
                for i in 0..n {
                    let (lv, mv) = (l.data()[i], m.data()[i]);
                    d_l.data_mut()[i] += b_aii.data()[i] + mv * b_ai.data()[i] + mv * mv * b_a.data()[i];
                    d_m.data_mut()[i] += lv * b_ai.data()[i] + 2.0 * lv * mv * b_a.data()[i];
                }
            };
            term(-1.0, &maps.lambda1, m1, d_lambda1, &mut d_m1);
            term(1.0, &maps.lambda2, m2, d_lambda2, &mut d_m2);
        }
    }
    (d_m1, d_m2)
}

/// Worst-case agreement between analytic adjoints and central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    /// Worst error per input class: `phi0`, `lambda1`, `lambda2`.
    pub class_errors: [f64; 3],
    pub probes: usize,
}

/// Relative error with the `max(|a|, |b|, 1e-8)` denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares [`backprop_evolution`] against central finite differences of
/// `loss(evolve(...))` at `probes` random entries of each of `phi0`,
/// `lambda1` and `lambda2`.
///
/// `loss` returns the scalar loss of a final level set and its gradient.
pub fn finite_diff_check(
    image: &Field,
    phi0: &Field,
    maps: &ParameterMaps,
    cfg: &EvolutionConfig,
    loss: &dyn Fn(&Field) -> (f64, Field),
    probes: usize,
    step: f64,
    seed: u64,
) -> Result<FiniteDiffReport> {
    if probes < 1 {
        return Err(Error::InvalidValue("finite-difference check needs at least one probe".into()));
    }
    if step.is_nan() || step <= 0.0 {
        return Err(Error::InvalidValue("finite-difference step must be > 0".into()));
    }
    let trace = evolve(phi0, image, maps, cfg)?;
    let (_, d_phi_l) = loss(trace.final_phi());
    let grads = backprop_evolution(&trace, &d_phi_l)?;

    let eval = |phi: &Field, maps: &ParameterMaps| -> Result<f64> {
        Ok(loss(&evolve_final(phi, image, maps, cfg)?).0)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut class_errors = [0.0f64; 3];
    let n = phi0.len();
    for (class, worst) in class_errors.iter_mut().enumerate() {
        for _ in 0..probes {
            let i = rng.random_range(0..n);
            let perturbed = |delta: f64| -> Result<f64> {
                let mut phi = phi0.clone();
                let mut m = maps.clone();
                match class {
                    0 => phi.data_mut()[i] += delta,
                    1 => m.lambda1.data_mut()[i] += delta,
                    _ => m.lambda2.data_mut()[i] += delta,
                }
                eval(&phi, &m)
            };
            let numeric = (perturbed(step)? - perturbed(-step)?) / (2.0 * step);
            let analytic = match class {
                0 => grads.d_phi0.data()[i],
                1 => grads.d_lambda1.data()[i],
                _ => grads.d_lambda2.data()[i],
            };
            *worst = worst.max(relative_error(analytic, numeric));
        }
    }
    Ok(FiniteDiffReport {
        max_rel_error: class_errors.iter().copied().fold(0.0, f64::max),
        class_errors,
        probes: 3 * probes,
    })
}

/// Summed squared error between `H_eps(phi)` and a target, with its gradient.
pub fn squared_error_loss(target: &Field, epsilon: f64) -> impl Fn(&Field) -> (f64, Field) + '_ {
    move |phi: &Field| {
        let mut grad = Field::zeros(phi.width(), phi.height());
        let mut loss = 0.0;
        for i in 0..phi.len() {
            let r = heaviside_scalar(phi.data()[i], epsilon) - target.data()[i];
            loss += r * r;
            grad.data_mut()[i] = 2.0 * r * dirac_scalar(phi.data()[i], epsilon);
        }
        (loss, grad)
    }
}

/// `sum w * H_eps(phi)` with its gradient. Zero-mean weights keep the
/// loss, and so its rounding error, small; the sum is compensated for the
/// same reason since finite differences resolve gradients only down to a
/// few ulps of the loss divided by the step.
pub fn weighted_heaviside_loss(weights: &Field, epsilon: f64) -> impl Fn(&Field) -> (f64, Field) + '_ {
    move |phi: &Field| {
        let mut grad = Field::zeros(phi.width(), phi.height());
        let (mut sum, mut carry) = (0.0f64, 0.0f64);
        for i in 0..phi.len() {
            let w = weights.data()[i];
            let y = w * heaviside_scalar(phi.data()[i], epsilon) - carry;
            let t = sum + y;
            carry = (t - sum) - y;
            sum = t;
            grad.data_mut()[i] = w * dirac_scalar(phi.data()[i], epsilon);
        }
        (sum, grad)
    }
}

/// A random problem for checking gradients: a noisy two-level disk image,
/// a shallow noisy cone as the initial level set, parameter maps in
/// `[0.5, 1.5)`, a random binary target and random loss weights in `[-1, 1)`.
#[derive(Clone, Debug)]
pub struct GradcheckProblem {
    pub image: Field,
    pub phi0: Field,
    pub maps: ParameterMaps,
    pub target: Field,
    pub weights: Field,
}

impl GradcheckProblem {
    pub fn random(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = (n as f64 - 1.0) / 2.0;
        let r = n as f64 / 4.0;
        let image = Field::from_fn(n, n, |x, y| {
            let inside = (x as f64 - c).hypot(y as f64 - c) < r + 1.0;
            let base = if inside { 0.75 } else { 0.25 };
            base + rng.random_range(-0.1..0.1)
        });
        // a shallow cone keeps every pixel within reach of the Dirac band
        let phi0 = Field::from_fn(n, n, |x, y| {
            0.2 * (r - (x as f64 - c).hypot(y as f64 - c)) + rng.random_range(-0.15..0.15)
        });
        let mut lambda = || Field::from_fn(n, n, |_, _| rng.random_range(0.5..1.5));
        let (l1, l2) = (lambda(), lambda());
        let maps = ParameterMaps::new(l1, l2).expect("positive maps of equal size");
        let target = Field::from_fn(n, n, |_, _| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
        let weights = Field::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        GradcheckProblem {
            image,
            phi0,
            maps,
            target,
            weights,
        }
    }

    /// Runs [`finite_diff_check`] with [`weighted_heaviside_loss`].
    pub fn check(&self, cfg: &EvolutionConfig, probes: usize, step: f64, seed: u64) -> Result<FiniteDiffReport> {
        let loss = weighted_heaviside_loss(&self.weights, cfg.epsilon);
        finite_diff_check(&self.image, &self.phi0, &self.maps, cfg, &loss, probes, step, seed)
    }
}
