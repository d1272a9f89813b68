//! Binary cross-entropy plus soft Dice, and the two-branch training loss.

use crate::error::Result;
use crate::field::{dirac_scalar, heaviside_scalar, Field, Mask};

const CLAMP: f64 = 1e-7;

/// Loss and gradient of `BCE(X, G) + 1 - 2 sum(XG) / (sum(X) + sum(G))`.
///
/// `X` is clamped to `[1e-7, 1 - 1e-7]` first; clamped entries get zero
/// gradient.
pub fn bce_dice_loss(x: &Field, g: &Mask) -> Result<(f64, Field)> {
    g.ensure_dims(x.dims())?;
    let n = x.len() as f64;
    let xs: Vec<f64> = x.data().iter().map(|&v| v.clamp(CLAMP, 1.0 - CLAMP)).collect();
    let gs: Vec<f64> = g.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();

    let mut bce = 0.0;
    let (mut inter, mut sx, mut sg) = (0.0, 0.0, 0.0);
    for (&xv, &gv) in xs.iter().zip(&gs) {
        bce -= gv * xv.ln() + (1.0 - gv) * (1.0 - xv).ln();
        inter += xv * gv;
        sx += xv;
        sg += gv;
    }
    bce /= n;
    let denom = sx + sg;
    let dice = 1.0 - 2.0 * inter / denom;

    let mut grad = Field::zeros(x.width(), x.height());
    for (i, d) in grad.data_mut().iter_mut().enumerate() {
        let raw = x.data()[i];
        if !(CLAMP..=1.0 - CLAMP).contains(&raw) {
            continue;
        }
        let (xv, gv) = (xs[i], gs[i]);
        let d_bce = (-gv / xv + (1.0 - gv) / (1.0 - xv)) / n;
        let d_dice = -2.0 * (gv * denom - inter) / (denom * denom);
        *d = d_bce + d_dice;
    }
    Ok((bce + dice, grad))
}

/// Sum of the losses of both branches: `H_eps(phi_L)` from the contour and
/// the probability map `P` from the network.
#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub loss: f64,
    pub contour_loss: f64,
    pub network_loss: f64,
    pub d_phi_l: Field,
    pub d_p: Field,
}

pub fn total_loss(phi_l: &Field, p: &Field, g: &Mask, epsilon: f64) -> Result<TotalLoss> {
    p.ensure_dims(phi_l.dims())?;
    let squashed = phi_l.map(|v| heaviside_scalar(v, epsilon));
    let (contour_loss, d_h) = bce_dice_loss(&squashed, g)?;
    let (network_loss, d_p) = bce_dice_loss(p, g)?;
    let d_phi_l = d_h.zip_map(phi_l, |d, v| d * dirac_scalar(v, epsilon));
    Ok(TotalLoss {
        loss: contour_loss + network_loss,
        contour_loss,
        network_loss,
        d_phi_l,
        d_p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reference_loss(x: &[f64], g: &[bool]) -> f64 {
        let n = x.len() as f64;
        let mut bce = 0.0;
        let (mut i, mut a, mut b) = (0.0, 0.0, 0.0);
        for (&xv, &gb) in x.iter().zip(g) {
            let xv = xv.clamp(1e-7, 1.0 - 1e-7);
            let gv = if gb { 1.0 } else { 0.0 };
            bce += -(gv * xv.ln() + (1.0 - gv) * (1.0 - xv).ln());
            i += xv * gv;
            a += xv;
            b += gv;
        }
        bce / n + 1.0 - 2.0 * i / (a + b)
    }

    #[test]
    fn half_probability_on_half_mask() {
        let x = Field::filled(2, 2, 0.5);
        let g = Mask::from_fn(2, 2, |x, _| x == 0);
        let (loss, _) = bce_dice_loss(&x, &g).unwrap();
        assert!((loss - (std::f64::consts::LN_2 + 0.5)).abs() < 1e-12);
        assert!((loss - reference_loss(x.data(), g.data())).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let g = Mask::from_fn(6, 6, |x, y| x > y);
        let x = g.to_field();
        let (loss, _) = bce_dice_loss(&x, &g).unwrap();
        assert!(loss.abs() < 1e-5, "{loss}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Field::from_fn(8, 8, |_, _| rng.random_range(0.05..0.95));
        let g = Mask::from_fn(8, 8, |_, _| rng.random_bool(0.4));
        let (_, grad) = bce_dice_loss(&x, &g).unwrap();
        let h = 1e-6;
        for _ in 0..30 {
            let i = rng.random_range(0..64);
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            let num = (bce_dice_loss(&plus, &g).unwrap().0 - bce_dice_loss(&minus, &g).unwrap().0) / (2.0 * h);
            let ana = grad.data()[i];
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-8);
            assert!(rel < 1e-6, "pixel {i}: {ana} vs {num}");
        }
    }

    #[test]
    fn clamped_entries_have_zero_gradient() {
        let x = Field::from_vec(2, 1, vec![0.0, 1.0]).unwrap();
        let g = Mask::from_fn(2, 1, |x, _| x == 0);
        let (loss, grad) = bce_dice_loss(&x, &g).unwrap();
        assert!(loss.is_finite());
        assert_eq!(grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        assert!(bce_dice_loss(&Field::zeros(3, 3), &Mask::empty(3, 4)).is_err());
    }

    #[test]
    fn matching_branches_double_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let phi = Field::from_fn(6, 6, |_, _| rng.random_range(-3.0..3.0));
        let p = phi.map(|v| heaviside_scalar(v, 1.0));
        let g = Mask::from_fn(6, 6, |x, _| x < 3);
        let t = total_loss(&phi, &p, &g, 1.0).unwrap();
        assert!((t.loss - 2.0 * t.network_loss).abs() < 1e-12);
        assert_eq!(t.contour_loss, t.network_loss);
    }

    #[test]
    fn extreme_inputs_give_finite_loss() {
        let phi = Field::from_fn(4, 4, |x, _| if x < 2 { 1e9 } else { -1e9 });
        let p = Field::from_fn(4, 4, |x, _| if x < 2 { 0.0 } else { 1.0 });
        let g = Mask::from_fn(4, 4, |x, _| x >= 2);
        let t = total_loss(&phi, &p, &g, 1.0).unwrap();
        assert!(t.loss.is_finite() && t.d_phi_l.is_finite() && t.d_p.is_finite());
    }

    #[test]
    fn contour_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let phi = Field::from_fn(6, 6, |_, _| rng.random_range(-3.0..3.0));
        let p = Field::from_fn(6, 6, |_, _| rng.random_range(0.1..0.9));
        let g = Mask::from_fn(6, 6, |_, _| rng.random_bool(0.5));
        let t = total_loss(&phi, &p, &g, 1.0).unwrap();
        let h = 1e-6;
        for i in 0..36 {
            let mut plus = phi.clone();
            plus.data_mut()[i] += h;
            let mut minus = phi.clone();
            minus.data_mut()[i] -= h;
            let num = (total_loss(&plus, &p, &g, 1.0).unwrap().loss - total_loss(&minus, &p, &g, 1.0).unwrap().loss) / (2.0 * h);
            let ana = t.d_phi_l.data()[i];
            assert!((ana - num).abs() / ana.abs().max(num.abs()).max(1e-8) < 1e-6);
        }
    }
}
