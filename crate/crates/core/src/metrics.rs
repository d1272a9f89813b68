//! Evaluation scores for binary masks: Dice, IoU, weighted coverage and
//! boundary F-score.
//!
//! Conventions: two empty masks score 1 on Dice and IoU; weighted coverage
//! is 0 when the ground truth is empty; boundary F is 1 when neither mask
//! has a boundary.

use crate::field::{squared_edt, Mask};

/// Mean scores over one or more images.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub dice: f64,
    pub miou: f64,
    pub wcov: f64,
    pub boundf: f64,
}

impl MetricsReport {
    /// All four scores of a single prediction.
    pub fn of(pred: &Mask, truth: &Mask) -> Self {
        MetricsReport {
            dice: dice_score(pred, truth),
            miou: iou_score(pred, truth),
            wcov: wcov_score(pred, truth),
            boundf: boundf_score(pred, truth),
        }
    }

    /// Per-field mean. Returns `None` for an empty slice.
    pub fn mean(reports: &[MetricsReport]) -> Option<Self> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let mut acc = MetricsReport::default();
        for r in reports {
            acc.dice += r.dice;
            acc.miou += r.miou;
            acc.wcov += r.wcov;
            acc.boundf += r.boundf;
        }
        Some(MetricsReport {
            dice: acc.dice / n,
            miou: acc.miou / n,
            wcov: acc.wcov / n,
            boundf: acc.boundf / n,
        })
    }
}

fn overlap(a: &Mask, b: &Mask) -> (usize, usize, usize) {
    assert_eq!(a.dims(), b.dims(), "mask dimensions differ");
    let mut inter = 0;
    for (&p, &q) in a.data().iter().zip(b.data()) {
        inter += usize::from(p && q);
    }
    (inter, a.count(), b.count())
}

pub fn dice_score(pred: &Mask, truth: &Mask) -> f64 {
    let (inter, a, b) = overlap(pred, truth);
    if a + b == 0 {
        return 1.0;
    }
    2.0 * inter as f64 / (a + b) as f64
}

pub fn iou_score(pred: &Mask, truth: &Mask) -> f64 {
    let (inter, a, b) = overlap(pred, truth);
    let union = a + b - inter;
    if union == 0 {
        return 1.0;
    }
    inter as f64 / union as f64
}

/// Connected components under 8-connectivity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Components {
    /// Per pixel: 0 for background, otherwise the 1-based region label.
    pub labels: Vec<u32>,
    /// Pixel count of each region, indexed by `label - 1`.
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

/// Labels regions in row-major order of their first pixel.
pub fn connected_components(mask: &Mask) -> Components {
    let (w, h) = mask.dims();
    let mut labels = vec![0u32; w * h];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.data()[start] || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        labels[start] = label;
        stack.push(start);
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = (i % w, i / w);
            for ny in y.saturating_sub(1)..(y + 2).min(h) {
                for nx in x.saturating_sub(1)..(x + 2).min(w) {
                    let j = ny * w + nx;
                    if mask.data()[j] && labels[j] == 0 {
                        labels[j] = label;
                        stack.push(j);
                    }
                }
            }
        }
        sizes.push(size);
    }
    Components { labels, sizes }
}

/// Area-weighted best-match IoU over ground-truth regions, normalized by the
/// total ground-truth foreground area.
pub fn wcov_score(pred: &Mask, truth: &Mask) -> f64 {
    assert_eq!(pred.dims(), truth.dims(), "mask dimensions differ");
    let total = truth.count();
    if total == 0 {
        return 0.0;
    }
    let gc = connected_components(truth);
    let pc = connected_components(pred);
    // intersections[j][k]: pixels shared by truth region j and predicted region k
    let mut inter = vec![vec![0usize; pc.count()]; gc.count()];
    for (&gl, &pl) in gc.labels.iter().zip(&pc.labels) {
        if gl > 0 && pl > 0 {
            inter[gl as usize - 1][pl as usize - 1] += 1;
        }
    }
    let mut acc = 0.0;
    for (j, row) in inter.iter().enumerate() {
        let gsize = gc.sizes[j];
        let best = row
            .iter()
            .enumerate()
            .map(|(k, &i)| i as f64 / (gsize + pc.sizes[k] - i) as f64)
            .fold(0.0, f64::max);
        acc += gsize as f64 * best;
    }
    acc / total as f64
}

/// Foreground pixels with at least one 4-neighbour in the background;
/// pixels outside the grid count as background.
pub fn boundary(mask: &Mask) -> Mask {
    let (w, h) = mask.dims();
    Mask::from_fn(w, h, |x, y| {
        if !mask.get(x, y) {
            return false;
        }
        let inside = x > 0
            && y > 0
            && x + 1 < w
            && y + 1 < h
            && mask.get(x - 1, y)
            && mask.get(x + 1, y)
            && mask.get(x, y - 1)
            && mask.get(x, y + 1);
        !inside
    })
}

/// Boundary F-score averaged over matching tolerances of 1 to 5 pixels.
pub fn boundf_score(pred: &Mask, truth: &Mask) -> f64 {
    assert_eq!(pred.dims(), truth.dims(), "mask dimensions differ");
    let (w, h) = pred.dims();
    let bp = boundary(pred);
    let bt = boundary(truth);
    let (np, nt) = (bp.count(), bt.count());
    if np == 0 && nt == 0 {
        return 1.0;
    }
    if np == 0 || nt == 0 {
        return 0.0;
    }
    let to_truth = squared_edt(w, h, |i| bt.data()[i]);
    let to_pred = squared_edt(w, h, |i| bp.data()[i]);
    let mut acc = 0.0;
    for theta in 1..=5u32 {
        let limit = f64::from(theta * theta);
        let hits = |b: &Mask, dist: &[f64]| b.data().iter().zip(dist).filter(|(&on, &d)| on && d <= limit).count();
        let precision = hits(&bp, &to_truth) as f64 / np as f64;
        let recall = hits(&bt, &to_pred) as f64 / nt as f64;
        if precision + recall > 0.0 {
            acc += 2.0 * precision * recall / (precision + recall);
        }
    }
    acc / 5.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square(n: usize, x0: usize, y0: usize, side: usize) -> Mask {
        Mask::from_fn(n, n, |x, y| x >= x0 && x < x0 + side && y >= y0 && y < y0 + side)
    }

    #[test]
    fn identical_and_disjoint() {
        let a = square(16, 2, 2, 5);
        let b = square(16, 9, 9, 5);
        assert_eq!(dice_score(&a, &a), 1.0);
        assert_eq!(iou_score(&a, &a), 1.0);
        assert_eq!(dice_score(&a, &b), 0.0);
        assert_eq!(iou_score(&a, &b), 0.0);
        let e = Mask::empty(16, 16);
        assert_eq!(dice_score(&e, &e), 1.0);
        assert_eq!(iou_score(&e, &e), 1.0);
    }

    #[test]
    fn half_overlap_of_equal_areas() {
        let g = Mask::from_fn(8, 8, |x, y| x < 4 && y < 4);
        let x = Mask::from_fn(8, 8, |x, y| x >= 2 && x < 6 && y < 4);
        assert_eq!(dice_score(&x, &g), 0.5);
        assert_eq!(iou_score(&x, &g), 1.0 / 3.0);
    }

    #[test]
    fn component_counting() {
        let blob = square(10, 2, 2, 4);
        assert_eq!(connected_components(&blob).count(), 1);
        let diag = Mask::from_fn(4, 4, |x, y| (x, y) == (1, 1) || (x, y) == (2, 2));
        assert_eq!(connected_components(&diag).count(), 1);
        let checker = Mask::from_fn(2, 2, |x, y| (x + y) % 2 == 0);
        assert_eq!(connected_components(&checker).count(), 1);
        let two = Mask::from_fn(6, 3, |x, _| x == 0 || x == 5);
        let c = connected_components(&two);
        assert_eq!(c.sizes, vec![3, 3]);
        assert_eq!(c.labels[0], 1);
        assert_eq!(c.labels[5], 2);
    }

    #[test]
    fn wcov_cases() {
        let g = Mask::from_fn(20, 10, |x, y| (2..6).contains(&y) && ((2..6).contains(&x) || (12..16).contains(&x)));
        assert_eq!(wcov_score(&g, &g), 1.0);
        assert_eq!(wcov_score(&Mask::empty(20, 10), &g), 0.0);
        let one = Mask::from_fn(20, 10, |x, y| (2..6).contains(&y) && (2..6).contains(&x));
        assert_eq!(wcov_score(&one, &g), 0.5);
        assert_eq!(wcov_score(&g, &Mask::empty(20, 10)), 0.0);
    }

    #[test]
    fn boundary_of_square_is_its_rim() {
        let b = boundary(&square(8, 2, 2, 4));
        assert_eq!(b.count(), 12);
        assert!(!b.get(3, 3));
        // edge pixels of a full mask touch the outside
        assert_eq!(boundary(&Mask::from_fn(3, 3, |_, _| true)).count(), 8);
    }

    #[test]
    fn boundf_simple_cases() {
        let g = square(32, 8, 8, 12);
        assert_eq!(boundf_score(&g, &g), 1.0);
        assert_eq!(boundf_score(&Mask::empty(32, 32), &g), 0.0);
        assert_eq!(boundf_score(&Mask::empty(32, 32), &Mask::empty(32, 32)), 1.0);
    }

    #[test]
    fn boundf_translated_square() {
        // shifted diagonally by 3: the rims cross at two pixels, so F1 and F2 are small but nonzero
        let g = square(40, 10, 10, 14);
        let x = square(40, 13, 13, 14);
        let s = boundf_score(&x, &g);
        assert_eq!(s, brute::boundf(&x, &g));
        assert!((s - 0.6).abs() < 0.05, "{s}");
        // a pure horizontal shift leaves the top and bottom rims overlapping
        let xh = square(40, 13, 10, 14);
        assert_eq!(boundf_score(&xh, &g), brute::boundf(&xh, &g));
    }

    #[test]
    fn report_mean() {
        let a = MetricsReport { dice: 1.0, miou: 0.5, wcov: 0.0, boundf: 1.0 };
        let b = MetricsReport { dice: 0.0, miou: 0.5, wcov: 1.0, boundf: 0.0 };
        assert_eq!(MetricsReport::mean(&[a, b]).unwrap(), MetricsReport { dice: 0.5, miou: 0.5, wcov: 0.5, boundf: 0.5 });
        assert!(MetricsReport::mean(&[]).is_none());
    }

    /// Independent slow implementations used as oracles.
    pub(crate) mod brute {
        use crate::field::Mask;

        pub fn dice(x: &Mask, g: &Mask) -> f64 {
            let (mut i, mut a, mut b) = (0u64, 0u64, 0u64);
            for y in 0..x.height() {
                for xx in 0..x.width() {
                    let (p, q) = (x.get(xx, y), g.get(xx, y));
                    i += u64::from(p && q);
                    a += u64::from(p);
                    b += u64::from(q);
                }
            }
            if a + b == 0 { 1.0 } else { 2.0 * i as f64 / (a + b) as f64 }
        }

        pub fn iou(x: &Mask, g: &Mask) -> f64 {
            let (mut i, mut u) = (0u64, 0u64);
            for y in 0..x.height() {
                for xx in 0..x.width() {
                    let (p, q) = (x.get(xx, y), g.get(xx, y));
                    i += u64::from(p && q);
                    u += u64::from(p || q);
                }
            }
            if u == 0 { 1.0 } else { i as f64 / u as f64 }
        }

        /// Regions as pixel lists, grown by repeated neighbourhood sweeps.
        pub fn regions(m: &Mask) -> Vec<Vec<(usize, usize)>> {
            let (w, h) = m.dims();
            let mut seen = vec![false; w * h];
            let mut out = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    if !m.get(x, y) || seen[y * w + x] {
                        continue;
                    }
                    let mut member = vec![false; w * h];
                    member[y * w + x] = true;
                    loop {
                        let mut grew = false;
                        for v in 0..h {
                            for u in 0..w {
                                if !m.get(u, v) || member[v * w + u] {
                                    continue;
                                }
                                let touches = (0..h).any(|b| {
                                    (0..w).any(|a| member[b * w + a] && a.abs_diff(u) <= 1 && b.abs_diff(v) <= 1)
                                });
                                if touches {
                                    member[v * w + u] = true;
                                    grew = true;
                                }
                            }
                        }
                        if !grew {
                            break;
                        }
                    }
                    let mut pix = Vec::new();
                    for v in 0..h {
                        for u in 0..w {
                            if member[v * w + u] {
                                seen[v * w + u] = true;
                                pix.push((u, v));
                            }
                        }
                    }
                    out.push(pix);
                }
            }
            out
        }

        pub fn wcov(x: &Mask, g: &Mask) -> f64 {
            let total: usize = g.count();
            if total == 0 {
                return 0.0;
            }
            let rx = regions(x);
            let rg = regions(g);
            let mut acc = 0.0;
            for gj in &rg {
                let mut best: f64 = 0.0;
                for xk in &rx {
                    let inter = gj.iter().filter(|p| xk.contains(p)).count();
                    let union = gj.len() + xk.len() - inter;
                    best = best.max(inter as f64 / union as f64);
                }
                acc += gj.len() as f64 * best;
            }
            acc / total as f64
        }

        fn rim(m: &Mask) -> Vec<(usize, usize)> {
            let (w, h) = m.dims();
            let on = |x: i64, y: i64| x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && m.get(x as usize, y as usize);
            let mut out = Vec::new();
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    if on(x, y) && !(on(x - 1, y) && on(x + 1, y) && on(x, y - 1) && on(x, y + 1)) {
                        out.push((x as usize, y as usize));
                    }
                }
            }
            out
        }

        pub fn boundf(x: &Mask, g: &Mask) -> f64 {
            let (bx, bg) = (rim(x), rim(g));
            if bx.is_empty() && bg.is_empty() {
                return 1.0;
            }
            if bx.is_empty() || bg.is_empty() {
                return 0.0;
            }
            let near = |p: &(usize, usize), set: &[(usize, usize)], t: usize| {
                set.iter().any(|q| p.0.abs_diff(q.0).pow(2) + p.1.abs_diff(q.1).pow(2) <= t * t)
            };
            let mut acc = 0.0;
            for t in 1..=5 {
                let p = bx.iter().filter(|p| near(p, &bg, t)).count() as f64 / bx.len() as f64;
                let r = bg.iter().filter(|q| near(q, &bx, t)).count() as f64 / bg.len() as f64;
                if p + r > 0.0 {
                    acc += 2.0 * p * r / (p + r);
                }
            }
            acc / 5.0
        }
    }

    fn random_pair(seed: u64, n: usize) -> (Mask, Mask) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let density = rng.random_range(0.05..0.7);
        let a = Mask::from_fn(n, n, |_, _| rng.random_bool(density));
        let b = Mask::from_fn(n, n, |_, _| rng.random_bool(density));
        (a, b)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn metrics_match_brute_force(seed in any::<u64>()) {
            let (a, b) = random_pair(seed, 12);
            prop_assert_eq!(dice_score(&a, &b), brute::dice(&a, &b));
            prop_assert_eq!(iou_score(&a, &b), brute::iou(&a, &b));
            prop_assert_eq!(wcov_score(&a, &b), brute::wcov(&a, &b));
            prop_assert_eq!(boundf_score(&a, &b), brute::boundf(&a, &b));
        }

        #[test]
        fn dice_iou_identity(seed in any::<u64>()) {
            let (a, b) = random_pair(seed, 16);
            let i = iou_score(&a, &b);
            prop_assert!((dice_score(&a, &b) - 2.0 * i / (1.0 + i)).abs() < 1e-12);
        }

        #[test]
        fn translation_invariance(dx in 0usize..6, dy in 0usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base = |rng: &mut ChaCha8Rng| {
                let cells: Vec<bool> = (0..100).map(|_| rng.random_bool(0.5)).collect();
                cells
            };
            let ca = base(&mut rng);
            let cb = base(&mut rng);
            let place = |c: &[bool], ox: usize, oy: usize| Mask::from_fn(24, 24, |x, y| {
                x >= ox + 2 && y >= oy + 2 && x < ox + 12 && y < oy + 12 && c[(y - oy - 2) * 10 + (x - ox - 2)]
            });
            let (a0, b0) = (place(&ca, 0, 0), place(&cb, 0, 0));
            let (a1, b1) = (place(&ca, dx, dy), place(&cb, dx, dy));
            prop_assert_eq!(MetricsReport::of(&a0, &b0), MetricsReport::of(&a1, &b1));
        }

        #[test]
        fn wcov_of_self_is_one(seed in any::<u64>()) {
            let (a, _) = random_pair(seed, 16);
            prop_assume!(a.count() > 0);
            prop_assert_eq!(wcov_score(&a, &a), 1.0);
        }

        #[test]
        fn scores_are_in_unit_interval(seed in any::<u64>()) {
            let (a, b) = random_pair(seed, 10);
            let r = MetricsReport::of(&a, &b);
            for v in [r.dice, r.miou, r.wcov, r.boundf] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
