//! Browser demo: generate a synthetic image, drop an initial contour on it
//! and watch the localized level-set evolution converge.

use acm_core::evolution::{evolve_final, EvolutionConfig};
use acm_core::field::{Field, Mask, ParameterMaps};
use acm_core::metrics::{boundary, MetricsReport};
use acm_core::synth::{generate_image, Style};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// Unit weights barely beat the curvature force on small objects.
const DEFAULT_LAMBDA: f64 = 10.0;

fn js(e: acm_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// A synthetic image, its ground truth and the current level set.
#[wasm_bindgen]
pub struct Scene {
    image: Field,
    truth: Mask,
    phi: Field,
    lambda1: f64,
    lambda2: f64,
    cfg: EvolutionConfig,
    steps_done: usize,
}

#[wasm_bindgen]
impl Scene {
    /// `style` is `disks`, `rects` or `huts`; a negative `sigma` keeps the
    /// style's default noise.
    #[wasm_bindgen(constructor)]
    pub fn new(style: &str, size: usize, seed: u64, sigma: f64) -> Result<Scene, JsError> {
        let style = Style::parse(style).ok_or_else(|| JsError::new("style must be disks, rects or huts"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = if sigma < 0.0 { style.default_sigma() } else { sigma };
        let s = generate_image(style, size, sigma, &mut rng).map_err(js)?;
        let mut scene = Scene {
            phi: Field::zeros(size, size),
            image: s.image,
            truth: s.mask,
            lambda1: DEFAULT_LAMBDA,
            lambda2: DEFAULT_LAMBDA,
            cfg: EvolutionConfig::default(),
            steps_done: 0,
        };
        let c = (size as f64 - 1.0) / 2.0;
        scene.place_circle(c, c, size as f64 / 3.0);
        Ok(scene)
    }

    pub fn size(&self) -> usize {
        self.image.width()
    }

    #[wasm_bindgen(getter)]
    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    /// Sets the curvature weight, the window half-width and constant
    /// region weights.
    pub fn set_params(&mut self, mu: f64, half_window: usize, lambda1: f64, lambda2: f64) -> Result<(), JsError> {
        let cfg = EvolutionConfig {
            mu,
            half_window,
            steps: 1,
            ..EvolutionConfig::default()
        };
        cfg.validate().map_err(js)?;
        if !(lambda1 > 0.0 && lambda2 > 0.0) {
            return Err(JsError::new("region weights must be positive"));
        }
        self.cfg = cfg;
        self.lambda1 = lambda1;
        self.lambda2 = lambda2;
        Ok(())
    }

    /// Restarts from a circle of radius `r` centred at `(x, y)`.
    pub fn place_circle(&mut self, x: f64, y: f64, r: f64) {
        let n = self.size();
        self.phi = Field::from_fn(n, n, |px, py| r - (px as f64 - x).hypot(py as f64 - y));
        self.steps_done = 0;
    }

    /// Runs `steps` more evolution steps.
    pub fn advance(&mut self, steps: usize) -> Result<(), JsError> {
        if steps == 0 {
            return Ok(());
        }
        let n = self.size();
        let maps = ParameterMaps::constant(n, n, self.lambda1, self.lambda2);
        let cfg = EvolutionConfig {
            steps,
            ..self.cfg.clone()
        };
        self.phi = evolve_final(&self.phi, &self.image, &maps, &cfg).map_err(js)?;
        self.steps_done += steps;
        Ok(())
    }

    /// RGBA pixels: the image in gray, the ground-truth outline in green and
    /// the current contour in red.
    pub fn render(&self) -> Vec<u8> {
        let n = self.size();
        let inside = self.phi.positive_mask();
        let contour = boundary(&inside);
        let truth = boundary(&self.truth);
        let mut out = Vec::with_capacity(n * n * 4);
        for y in 0..n {
            for x in 0..n {
                let g = (self.image.get(x, y).clamp(0.0, 1.0) * 255.0).round() as u8;
                let px = if contour.get(x, y) {
                    [230, 40, 40]
                } else if truth.get(x, y) {
                    [40, 200, 80]
                } else {
                    [g, g, g]
                };
                out.extend_from_slice(&[px[0], px[1], px[2], 255]);
            }
        }
        out
    }

    /// `[miou, dice, wcov, boundf]` of the current segmentation.
    pub fn scores(&self) -> Vec<f64> {
        let r = MetricsReport::of(&self.phi.positive_mask(), &self.truth);
        vec![r.miou, r.dice, r.wcov, r.boundf]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evolution_improves_the_initial_circle() {
        let mut s = Scene::new("disks", 64, 2, -1.0).unwrap();
        let (mut cx, mut cy, mut k) = (0.0, 0.0, 0.0);
        for y in 0..64 {
            for x in 0..64 {
                if s.truth.get(x, y) {
                    cx += x as f64;
                    cy += y as f64;
                    k += 1.0;
                }
            }
        }
        s.place_circle(cx / k, cy / k, 3.0);
        let before = s.scores()[0];
        s.advance(60).unwrap();
        assert_eq!(s.steps_done(), 60);
        assert!(before < 0.5 && s.scores()[0] > 0.95, "{} -> {}", before, s.scores()[0]);
        assert_eq!(s.render().len(), 64 * 64 * 4);
    }

    #[test]
    fn placing_a_circle_restarts() {
        let mut s = Scene::new("rects", 32, 1, 0.05).unwrap();
        s.advance(3).unwrap();
        s.place_circle(5.0, 5.0, 3.0);
        assert_eq!(s.steps_done(), 0);
        assert!(s.phi.get(5, 5) > 0.0 && s.phi.get(20, 20) < 0.0);
    }
}
