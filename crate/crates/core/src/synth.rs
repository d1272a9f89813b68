//! Synthetic segmentation datasets.
//!
//! Generation is driven by a single `ChaCha8Rng` seeded with the given
//! integer, so output is identical on every platform. Per image, in order:
//!
//! 1. shape count, uniform in 1..=4;
//! 2. background level and signed contrast (style dependent);
//! 3. each shape: size, then up to 1000 position draws until it sits at
//!    least 2 px from every earlier shape;
//! 4. one Gaussian noise draw per pixel in row-major order.
//!
//! Intensities are clamped to `[0, 1]` and stored as 8-bit PNG.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::field::{squared_edt, Field, Mask};
use crate::io::{save_gray, save_mask, DatasetManifest, ManifestEntry, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Style {
    Disks,
    Rects,
    /// Small low-contrast roofs: disks and squares, contrast 0.15, noise 0.05.
    Huts,
}

impl Style {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "disks" => Some(Style::Disks),
            "rects" => Some(Style::Rects),
            "huts" => Some(Style::Huts),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Style::Disks => "disks",
            Style::Rects => "rects",
            Style::Huts => "huts",
        }
    }

    pub fn default_sigma(self) -> f64 {
        match self {
            Style::Huts => 0.05,
            _ => 0.08,
        }
    }
}

pub const HUTS_CONTRAST: f64 = 0.15;
const PLACEMENT_ATTEMPTS: usize = 1000;
const MIN_GAP: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub style: Style,
    /// Noise standard deviation; `None` uses the style default.
    pub sigma: Option<f64>,
    /// The last `test_count` images form the test split.
    pub test_count: usize,
}

impl SynthConfig {
    pub fn new(count: usize, size: usize, seed: u64, style: Style) -> Self {
        SynthConfig {
            count,
            size,
            seed,
            style,
            sigma: None,
            test_count: count / 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 16 || !self.size.is_multiple_of(8) {
            return Err(Error::InvalidConfig(format!(
                "image size {} must be a multiple of 8 and at least 16",
                self.size
            )));
        }
        if self.count == 0 || self.test_count > self.count {
            return Err(Error::InvalidConfig(format!(
                "{} images cannot hold a test split of {}",
                self.count, self.test_count
            )));
        }
        if let Some(s) = self.sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::InvalidConfig(format!("noise sigma {s} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// A generated image before quantization.
#[derive(Clone, Debug)]
pub struct SynthImage {
    pub image: Field,
    pub mask: Mask,
    pub background: f64,
    pub foreground: f64,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { x0: usize, y0: usize, w: usize, h: usize },
    Disk { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    fn contains(&self, x: usize, y: usize) -> bool {
        match *self {
            Shape::Rect { x0, y0, w, h } => x >= x0 && x < x0 + w && y >= y0 && y < y0 + h,
            Shape::Disk { cx, cy, r } => (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r,
        }
    }
}

fn draw_shape(style: Style, size: usize, rng: &mut ChaCha8Rng) -> Shape {
    let s = size as f64;
    let disk = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
        let r: f64 = rng.random_range(lo..hi);
        let m = r.ceil() + 1.0;
        Shape::Disk {
            cx: rng.random_range(m..s - 1.0 - m),
            cy: rng.random_range(m..s - 1.0 - m),
            r,
        }
    };
    let rect = |rng: &mut ChaCha8Rng, lo: usize, hi: usize, square: bool| {
        let w = rng.random_range(lo..=hi);
        let h = if square { w } else { rng.random_range(lo..=hi) };
        Shape::Rect {
            x0: rng.random_range(1..size - w - 1),
            y0: rng.random_range(1..size - h - 1),
            w,
            h,
        }
    };
    match style {
        Style::Disks => disk(rng, s / 16.0, s / 6.0),
        Style::Rects => rect(rng, (size / 8).max(3), size / 3, false),
        Style::Huts => {
            if rng.random_bool(0.5) {
                disk(rng, s / 20.0, s / 9.0)
            } else {
                rect(rng, (size / 10).max(3), size / 5, true)
            }
        }
    }
}

/// Generates one image from the RNG stream.
pub fn generate_image(style: Style, size: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Result<SynthImage> {
    generate_with_attempts(style, size, sigma, PLACEMENT_ATTEMPTS, rng)
}

fn generate_with_attempts(
    style: Style,
    size: usize,
    sigma: f64,
    attempts: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SynthImage> {
    let shapes = rng.random_range(1..=4usize);
    let (background, contrast) = match style {
        Style::Huts => (rng.random_range(0.35..0.5), HUTS_CONTRAST),
        _ => (rng.random_range(0.1..0.4), rng.random_range(0.3..0.6)),
    };
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    // keep the shape level inside [0, 1]
    let foreground = if background + contrast <= 1.0 && (sign > 0.0 || background - contrast < 0.0) {
        background + contrast
    } else {
        background - contrast
    };

    let mut mask = Mask::empty(size, size);
    for _ in 0..shapes {
        let dist2 = squared_edt(size, size, |i| mask.data()[i]);
        let mut placed = false;
        for _ in 0..attempts {
            let shape = draw_shape(style, size, rng);
            let mut ok = true;
            'scan: for y in 0..size {
                for x in 0..size {
                    if shape.contains(x, y) && dist2[y * size + x] <= MIN_GAP * MIN_GAP {
                        ok = false;
                        break 'scan;
                    }
                }
            }
            if ok {
                for y in 0..size {
                    for x in 0..size {
                        if shape.contains(x, y) {
                            mask.set(x, y, true);
                        }
                    }
                }
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Placement {
                shapes,
                attempts,
            });
        }
    }

    let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let image = Field::from_fn(size, size, |x, y| {
        let base = if mask.get(x, y) { foreground } else { background };
        (base + noise.sample(rng)).clamp(0.0, 1.0)
    });
    Ok(SynthImage {
        image,
        mask,
        background,
        foreground,
    })
}

/// Writes `images/NNNN.png`, `masks/NNNN.png` and `manifest.csv` under `out`.
pub fn generate_synthetic(out: impl AsRef<Path>, cfg: &SynthConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    let root = out.as_ref().to_path_buf();
    for sub in ["images", "masks"] {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let sigma = cfg.sigma.unwrap_or_else(|| cfg.style.default_sigma());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train_count = cfg.count - cfg.test_count;
    let mut entries = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let s = generate_image(cfg.style, cfg.size, sigma, &mut rng)?;
        let image = PathBuf::from(format!("images/{i:04}.png"));
        let mask = PathBuf::from(format!("masks/{i:04}.png"));
        save_gray(&s.image, root.join(&image))?;
        save_mask(&s.mask, root.join(&mask))?;
        entries.push(ManifestEntry {
            image,
            mask,
            split: if i < train_count { Split::Train } else { Split::Test },
        });
    }
    let manifest = DatasetManifest { root, entries };
    manifest.write()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{load_image, load_mask};
    use crate::metrics::connected_components;

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = SynthConfig::new(4, 32, 9, Style::Rects);
        generate_synthetic(a.path(), &cfg).unwrap();
        generate_synthetic(b.path(), &cfg).unwrap();
        for name in ["manifest.csv", "images/0000.png", "masks/0003.png", "images/0003.png"] {
            assert_eq!(
                std::fs::read(a.path().join(name)).unwrap(),
                std::fs::read(b.path().join(name)).unwrap(),
                "{name}"
            );
        }
    }

    #[test]
    fn splits_and_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = SynthConfig::new(5, 32, 1, Style::Disks);
        cfg.test_count = 2;
        let m = generate_synthetic(dir.path(), &cfg).unwrap();
        assert_eq!(m.load(Split::Train).unwrap().len(), 3);
        assert_eq!(m.load(Split::Test).unwrap().len(), 2);
    }

    #[test]
    fn rect_masks_match_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let s = generate_image(Style::Rects, 64, 0.0, &mut rng).unwrap();
            let comps = connected_components(&s.mask);
            assert!((1..=4).contains(&comps.count()));
            // each component is a filled axis-aligned rectangle
            for label in 1..=comps.count() as u32 {
                let pix: Vec<(usize, usize)> = (0..64 * 64)
                    .filter(|&i| comps.labels[i] == label)
                    .map(|i| (i % 64, i / 64))
                    .collect();
                let (x0, x1) = (pix.iter().map(|p| p.0).min().unwrap(), pix.iter().map(|p| p.0).max().unwrap());
                let (y0, y1) = (pix.iter().map(|p| p.1).min().unwrap(), pix.iter().map(|p| p.1).max().unwrap());
                assert_eq!(pix.len(), (x1 - x0 + 1) * (y1 - y0 + 1));
            }
            // noiseless image is exactly the two levels
            for (v, &m) in s.image.data().iter().zip(s.mask.data()) {
                assert_eq!(*v, if m { s.foreground } else { s.background });
            }
        }
    }

    #[test]
    fn shapes_keep_their_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for style in [Style::Disks, Style::Rects, Style::Huts] {
            for _ in 0..10 {
                let s = generate_image(style, 64, 0.05, &mut rng).unwrap();
                let comps = connected_components(&s.mask);
                let (w, n) = (64, 64 * 64);
                for i in 0..n {
                    for j in 0..n {
                        let (a, b) = (comps.labels[i], comps.labels[j]);
                        if a > 0 && b > 0 && a != b {
                            let d2 = (i % w).abs_diff(j % w).pow(2) + (i / w).abs_diff(j / w).pow(2);
                            assert!(d2 as f64 > 4.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn huts_contrast_is_low() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig::new(100, 32, 5, Style::Huts);
        let m = generate_synthetic(dir.path(), &cfg).unwrap();
        let mut total = 0.0;
        for e in &m.entries {
            let img = load_image(m.root.join(&e.image)).unwrap();
            let mask = load_mask(m.root.join(&e.mask)).unwrap();
            let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0.0, 0.0, 0.0);
            for (&v, &inside) in img.data().iter().zip(mask.data()) {
                if inside {
                    fg += v;
                    nf += 1.0;
                } else {
                    bg += v;
                    nb += 1.0;
                }
            }
            total += (fg / nf - bg / nb).abs();
        }
        let mean = total / 100.0;
        assert!((mean - 0.15).abs() <= 0.02, "{mean}");
    }

    #[test]
    fn bad_sizes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_synthetic(dir.path(), &SynthConfig::new(2, 30, 0, Style::Rects)).is_err());
        assert!(generate_synthetic(dir.path(), &SynthConfig::new(0, 32, 0, Style::Rects)).is_err());
    }

    #[test]
    fn exhausted_attempts_fail_placement() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            generate_with_attempts(Style::Rects, 32, 0.0, 0, &mut rng),
            Err(Error::Placement { attempts: 0, .. })
        ));
    }
}
