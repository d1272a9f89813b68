//! Raster containers and the discrete operators shared by the evolution,
//! adjoint and metric code.
//!
//! All rasters are row-major with `x` running along the width. Derivative
//! stencils use replicate padding: a virtual pixel outside the grid takes the
//! value of the nearest interior pixel. Window sums are clipped to the grid,
//! so pixels outside the image never contribute.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Smallest grid the 3x3 stencils operate on.
pub const MIN_DIM: usize = 3;

/// Real-valued H x W raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

/// A level-set function; its zero level set is the contour, positive inside.
pub type LevelSet = Field;

impl Field {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Field {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {width}x{height} field",
                data.len()
            )));
        }
        Ok(Field {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Field {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Point-wise combination of two equally sized fields.
    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Field {
        debug_assert_eq!(self.dims(), other.dims());
        Field {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn ensure_dims(&self, dims: (usize, usize)) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::DimensionMismatch {
                expected: dims,
                got: self.dims(),
            });
        }
        Ok(())
    }

    pub fn ensure_min_dims(&self) -> Result<()> {
        if self.width < MIN_DIM || self.height < MIN_DIM {
            return Err(Error::DimensionTooSmall {
                width: self.width,
                height: self.height,
                min: MIN_DIM,
            });
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// First non-finite entry, as `(x, y)`.
    pub fn first_non_finite(&self) -> Option<(usize, usize)> {
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|i| (i % self.width, i / self.width))
    }

    pub fn scale(&self, k: f64) -> Field {
        self.map(|v| v * k)
    }

    pub fn add_assign(&mut self, other: &Field) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add_scaled(&mut self, other: &Field, k: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
    }

    /// Mirror left-right.
    pub fn flip_x(&self) -> Field {
        Field::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y))
    }

    /// Mirror top-bottom.
    pub fn flip_y(&self) -> Field {
        Field::from_fn(self.width, self.height, |x, y| self.get(x, self.height - 1 - y))
    }

    /// Binary mask of strictly positive entries.
    pub fn positive_mask(&self) -> Mask {
        self.threshold(0.0)
    }

    /// Binary mask of entries strictly above `t`.
    pub fn threshold(&self, t: f64) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v > t).collect(),
        }
    }
}

/// Input raster with 1 or 3 channels, intensities in `[0, 1]`.
///
/// Channels are stored planar: all of channel 0, then channel 1, ...
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidValue(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        if width < MIN_DIM || height < MIN_DIM {
            return Err(Error::DimensionTooSmall {
                width,
                height,
                min: MIN_DIM,
            });
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidValue(format!(
                "image intensity {v} outside [0, 1]"
            )));
        }
        Ok(ImageGrid {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_gray(field: &Field) -> Result<Self> {
        Self::new(field.width(), field.height(), 1, field.data().to_vec())
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> Field {
        let n = self.width * self.height;
        Field {
            width: self.width,
            height: self.height,
            data: self.data[c * n..(c + 1) * n].to_vec(),
        }
    }

    /// Scalar intensity used by the contour energy: the single channel for
    /// gray images, `0.299 R + 0.587 G + 0.114 B` otherwise.
    pub fn luminance(&self) -> Field {
        if self.channels == 1 {
            return self.channel(0);
        }
        let n = self.width * self.height;
        let (r, rest) = self.data.split_at(n);
        let (g, b) = rest.split_at(n);
        Field {
            width: self.width,
            height: self.height,
            data: (0..n)
                .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i])
                .collect(),
        }
    }

    pub fn flip_x(&self) -> ImageGrid {
        self.per_channel(Field::flip_x)
    }

    pub fn flip_y(&self) -> ImageGrid {
        self.per_channel(Field::flip_y)
    }

    fn per_channel(&self, f: impl Fn(&Field) -> Field) -> ImageGrid {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.channels {
            data.extend_from_slice(f(&self.channel(c)).data());
        }
        ImageGrid { data, ..*self }
    }
}

/// Binary segmentation mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {width}x{height} mask",
                data.len()
            )));
        }
        Ok(Mask {
            width,
            height,
            data,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Mask {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn ensure_dims(&self, dims: (usize, usize)) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::DimensionMismatch {
                expected: dims,
                got: self.dims(),
            });
        }
        Ok(())
    }

    pub fn invert(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| !v).collect(),
        }
    }

    /// 1.0 for foreground, 0.0 for background.
    pub fn to_field(&self) -> Field {
        Field {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn flip_x(&self) -> Mask {
        Mask::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y))
    }

    pub fn flip_y(&self) -> Mask {
        Mask::from_fn(self.width, self.height, |x, y| {
            self.get(x, self.height - 1 - y)
        })
    }
}

/// Per-pixel weights of the interior (`lambda1`) and exterior (`lambda2`)
/// residuals.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterMaps {
    pub lambda1: Field,
    pub lambda2: Field,
}

impl ParameterMaps {
    pub fn new(lambda1: Field, lambda2: Field) -> Result<Self> {
        lambda2.ensure_dims(lambda1.dims())?;
        Ok(ParameterMaps { lambda1, lambda2 })
    }

    pub fn constant(width: usize, height: usize, lambda1: f64, lambda2: f64) -> Self {
        ParameterMaps {
            lambda1: Field::filled(width, height, lambda1),
            lambda2: Field::filled(width, height, lambda2),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.lambda1.dims()
    }

    /// Rejects non-positive or non-finite weights.
    pub fn validate(&self) -> Result<()> {
        let bad = self
            .lambda1
            .data()
            .iter()
            .chain(self.lambda2.data())
            .find(|v| !(v.is_finite() && **v > 0.0));
        match bad {
            Some(v) => Err(Error::InvalidValue(format!(
                "parameter maps must be strictly positive, found {v}"
            ))),
            None => Ok(()),
        }
    }
}

/// Linear stencil over a 3x3 neighborhood with replicate padding.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    taps: &'static [(isize, isize, f64)],
}

impl Stencil {
    pub(crate) const DX: Stencil = Stencil {
        taps: &[(1, 0, 0.5), (-1, 0, -0.5)],
    };
    pub(crate) const DY: Stencil = Stencil {
        taps: &[(0, 1, 0.5), (0, -1, -0.5)],
    };
    pub(crate) const DXX: Stencil = Stencil {
        taps: &[(1, 0, 1.0), (0, 0, -2.0), (-1, 0, 1.0)],
    };
    pub(crate) const DYY: Stencil = Stencil {
        taps: &[(0, 1, 1.0), (0, 0, -2.0), (0, -1, 1.0)],
    };
    pub(crate) const DXY: Stencil = Stencil {
        taps: &[(1, 1, 0.25), (-1, 1, -0.25), (1, -1, -0.25), (-1, -1, 0.25)],
    };
    pub(crate) const LAPLACE: Stencil = Stencil {
        taps: &[
            (1, 0, 1.0),
            (-1, 0, 1.0),
            (0, 1, 1.0),
            (0, -1, 1.0),
            (0, 0, -4.0),
        ],
    };

    /// Applies the stencil with replicate padding. Interior pixels are
    /// processed one tap at a time over whole rows, so each pixel still
    /// accumulates its taps in order.
    pub(crate) fn apply(&self, src: &Field) -> Field {
        let (w, h) = src.dims();
        let s = src.data();
        let mut out = vec![0.0; w * h];
        let clamped = |x: usize, y: usize| {
            let mut acc = 0.0;
            for &(dx, dy, k) in self.taps {
                acc += k * s[clamp(y, dy, h) * w + clamp(x, dx, w)];
            }
            acc
        };
        for y in 0..h {
            let row = &mut out[y * w..(y + 1) * w];
            if y == 0 || y + 1 == h || w < 3 {
                for (x, o) in row.iter_mut().enumerate() {
                    *o = clamped(x, y);
                }
                continue;
            }
            for &(dx, dy, k) in self.taps {
                let sy = y.wrapping_add_signed(dy);
                let lo = 1usize.wrapping_add_signed(dx);
                let src_row = &s[sy * w + lo..sy * w + lo + w - 2];
                for (o, v) in row[1..w - 1].iter_mut().zip(src_row) {
                    *o += k * v;
                }
            }
            row[0] = clamped(0, y);
            row[w - 1] = clamped(w - 1, y);
        }
        Field {
            width: w,
            height: h,
            data: out,
        }
    }

    /// Adjoint of [`Stencil::apply`], accumulated into `dst`.
    pub(crate) fn apply_transpose_into(&self, g: &Field, dst: &mut Field) {
        let (w, h) = g.dims();
        let gs = g.data();
        let d = dst.data_mut();
        let mut scatter = |x: usize, y: usize| {
            let v = gs[y * w + x];
            for &(dx, dy, k) in self.taps {
                d[clamp(y, dy, h) * w + clamp(x, dx, w)] += k * v;
            }
        };
        for y in 0..h {
            if y == 0 || y + 1 == h || w < 3 {
                (0..w).for_each(|x| scatter(x, y));
            } else {
                scatter(0, y);
                scatter(w - 1, y);
            }
        }
        if w < 3 {
            return;
        }
        for y in 1..h.saturating_sub(1) {
            let src_row = &gs[y * w + 1..y * w + w - 1];
            for &(dx, dy, k) in self.taps {
                let ty = y.wrapping_add_signed(dy);
                let lo = ty * w + 1usize.wrapping_add_signed(dx);
                for (o, v) in d[lo..lo + w - 2].iter_mut().zip(src_row) {
                    *o += k * v;
                }
            }
        }
    }
}

#[inline]
fn clamp(i: usize, d: isize, n: usize) -> usize {
    (i as isize + d).clamp(0, n as isize - 1) as usize
}

/// First and second order central differences of a field.
#[derive(Clone, Debug)]
pub struct Derivatives {
    pub dx: Field,
    pub dy: Field,
    pub dxx: Field,
    pub dyy: Field,
    pub dxy: Field,
}

/// Central differences with unit spacing and replicate padding.
pub fn spatial_derivatives(phi: &Field) -> Result<Derivatives> {
    phi.ensure_min_dims()?;
    Ok(Derivatives {
        dx: Stencil::DX.apply(phi),
        dy: Stencil::DY.apply(phi),
        dxx: Stencil::DXX.apply(phi),
        dyy: Stencil::DYY.apply(phi),
        dxy: Stencil::DXY.apply(phi),
    })
}

/// 5-point Laplacian with replicate padding.
pub fn laplacian(phi: &Field) -> Field {
    Stencil::LAPLACE.apply(phi)
}

/// Sum over the `(2f+1) x (2f+1)` window centred on each pixel, clipped to
/// the grid. Separable direct sums: no cancellation, so a window of zeros
/// sums to exactly zero.
///
/// The window relation is symmetric, so this operator is its own adjoint.
pub fn box_sum(field: &Field, f: usize) -> Field {
    let (w, h) = field.dims();
    let src = field.data();
    let mut rows = vec![0.0; w * h];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        let acc = &mut rows[y * w..(y + 1) * w];
        // add the line shifted by each offset in turn, so every output sums
        // its window left to right
        for d in -(f as isize)..=(f as isize) {
            let lo = (-d).max(0) as usize;
            let hi = (w as isize - d.max(0)).max(0) as usize;
            if lo >= hi {
                continue;
            }
            let shift = lo.wrapping_add_signed(d);
            for (a, v) in acc[lo..hi].iter_mut().zip(&line[shift..shift + (hi - lo)]) {
                *a += v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(f), (y + f + 1).min(h));
        let dst = &mut out[y * w..(y + 1) * w];
        for yy in y0..y1 {
            for (d, s) in dst.iter_mut().zip(&rows[yy * w..(yy + 1) * w]) {
                *d += s;
            }
        }
    }
    Field {
        width: w,
        height: h,
        data: out,
    }
}

/// Number of grid pixels inside each clipped window.
pub fn window_area(width: usize, height: usize, f: usize) -> Field {
    let span = |i: usize, n: usize| ((i + f + 1).min(n) - i.saturating_sub(f)) as f64;
    Field::from_fn(width, height, |x, y| span(x, width) * span(y, height))
}

/// Smoothed Heaviside `1/2 + atan(phi/eps)/pi`.
#[inline]
pub fn heaviside_scalar(phi: f64, epsilon: f64) -> f64 {
    0.5 + (phi / epsilon).atan() / PI
}

/// Derivative of [`heaviside_scalar`]: `eps / (pi (eps^2 + phi^2))`.
#[inline]
pub fn dirac_scalar(phi: f64, epsilon: f64) -> f64 {
    epsilon / (PI * (epsilon * epsilon + phi * phi))
}

/// Derivative of [`dirac_scalar`] with respect to `phi`.
#[inline]
pub(crate) fn dirac_derivative_scalar(phi: f64, epsilon: f64) -> f64 {
    let q = epsilon * epsilon + phi * phi;
    -2.0 * epsilon * phi / (PI * q * q)
}

pub fn heaviside(phi: &Field, epsilon: f64) -> Field {
    phi.map(|v| heaviside_scalar(v, epsilon))
}

pub fn dirac(phi: &Field, epsilon: f64) -> Field {
    phi.map(|v| dirac_scalar(v, epsilon))
}

/// Signed Euclidean distance map of a mask.
///
/// Foreground pixels get `d - 1/2` where `d` is the distance between pixel
/// centres to the nearest background pixel; background pixels get
/// `-(d - 1/2)` with `d` measured to the nearest foreground pixel. The zero
/// level set therefore runs along pixel edges, a straight split produces an
/// exactly linear ramp, and inverting the mask negates the map.
pub fn signed_distance_from_mask(mask: &Mask) -> Result<Field> {
    let n = mask.count();
    if n == 0 || n == mask.data().len() {
        return Err(Error::DegenerateMask);
    }
    let (w, h) = mask.dims();
    let to_background = squared_edt(w, h, |i| !mask.data()[i]);
    let to_foreground = squared_edt(w, h, |i| mask.data()[i]);
    let data = mask
        .data()
        .iter()
        .enumerate()
        .map(|(i, &inside)| {
            if inside {
                to_background[i].sqrt() - 0.5
            } else {
                -(to_foreground[i].sqrt() - 0.5)
            }
        })
        .collect();
    Ok(Field {
        width: w,
        height: h,
        data,
    })
}

/// Exact squared Euclidean distance from every pixel to the nearest pixel
/// where `is_site` holds (separable lower-envelope transform).
pub(crate) fn squared_edt(w: usize, h: usize, is_site: impl Fn(usize) -> bool) -> Vec<f64> {
    let inf = ((w * w + h * h) as f64) * 4.0 + 1.0;
    let mut grid: Vec<f64> = (0..w * h)
        .map(|i| if is_site(i) { 0.0 } else { inf })
        .collect();
    let n = w.max(h);
    let mut line = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    for x in 0..w {
        for y in 0..h {
            line[y] = grid[y * w + x];
        }
        edt_1d(&line[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        line[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&line[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

fn edt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let qf = q as f64;
        loop {
            let p = v[k];
            let pf = p as f64;
            let s = ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf);
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for q in 0..n {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let p = v[k] as f64;
        d[q] = (qf - p) * (qf - p) + f[v[k]];
    }
}
