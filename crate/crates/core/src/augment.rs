//! Training-time augmentation: random flips, random rotation and the
//! intensity-inhomogeneity augmentation (IIA).
//!
//! IIA multiplies a slice by the quadratic pattern
//!
//! ```text
//! M(x, y) = (x' + x0)^2 + (y' + y0)^2
//! ```
//!
//! where `(x', y')` is the pixel position rotated by `theta` about the image
//! centre, then renormalises the product to `[0, 1023]`. Offsets are drawn in
//! pixels of a 512-wide reference grid and rescaled to the slice size.
//!
//! Every random operation comes in two halves: a `random_*` function that
//! draws its parameters and returns them alongside the output, and a
//! deterministic `*_with` function that replays logged parameters.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tissue::TissueClass;
use crate::volume::{normalize_slice, normalize_values, Slice2D};

/// Width of the grid the published offset ranges refer to.
pub const REFERENCE_SIZE: f64 = 512.0;

/// `(sin, cos)` of an angle in degrees, exact at multiples of 90.
pub fn sin_cos_deg(theta: f64) -> (f64, f64) {
    let t = theta.rem_euclid(360.0);
    if t == 0.0 {
        (0.0, 1.0)
    } else if t == 90.0 {
        (1.0, 0.0)
    } else if t == 180.0 {
        (0.0, -1.0)
    } else if t == 270.0 {
        (-1.0, 0.0)
    } else {
        t.to_radians().sin_cos()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiplierField {
    pub width: usize,
    pub height: usize,
    /// Offsets on the current grid, in pixels.
    pub x0: f64,
    pub y0: f64,
    pub theta: f64,
    pub values: Vec<f64>,
}

impl MultiplierField {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }
}

/// Evaluate the quadratic field on a `width` x `height` grid with corner
/// origin (`X = 0..width-1`), rotated by `theta` degrees about the centre.
pub fn make_multiplier_field(width: usize, height: usize, x0: f64, y0: f64, theta: f64) -> MultiplierField {
    let (s, c) = sin_cos_deg(theta);
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    let mut values = Vec::with_capacity(width * height);
    for y in 0..height {
        let dy = y as f64 - cy;
        for x in 0..width {
            let dx = x as f64 - cx;
            let xr = cx + c * dx - s * dy;
            let yr = cy + s * dx + c * dy;
            values.push((xr + x0) * (xr + x0) + (yr + y0) * (yr + y0));
        }
    }
    MultiplierField {
        width,
        height,
        x0,
        y0,
        theta,
        values,
    }
}

/// Closed interval `[lo, hi]` for offsets, half-open `[lo, hi)` for angles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.hi > self.lo {
            rng.gen_range(self.lo..self.hi)
        } else {
            self.lo
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn overlaps(&self, other: &Range) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IiaParams {
    /// Reference-grid pixels.
    pub x0_range: Range,
    /// Reference-grid pixels.
    pub y0_range: Range,
    /// Degrees.
    pub theta_range: Range,
    /// Fraction of slices per batch that receive IIA.
    pub proportion: f64,
}

impl Default for IiaParams {
    fn default() -> Self {
        Self {
            x0_range: Range::new(43.0, 187.0),
            y0_range: Range::new(-371.0, 170.0),
            theta_range: Range::new(0.0, 360.0),
            proportion: 1.0,
        }
    }
}

impl IiaParams {
    pub fn with_proportion(proportion: f64) -> Self {
        Self {
            proportion,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("x0", self.x0_range),
            ("y0", self.y0_range),
            ("theta", self.theta_range),
        ] {
            if !(r.lo <= r.hi) {
                return Err(Error::Config(format!("empty {name} range {r:?}")));
            }
        }
        if !(0.0..=1.0).contains(&self.proportion) {
            return Err(Error::Config(format!(
                "IIA proportion {} outside [0, 1]",
                self.proportion
            )));
        }
        Ok(())
    }
}

/// Random values drawn by one IIA application.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IiaDraw {
    pub x0_ref: f64,
    pub y0_ref: f64,
    pub theta: f64,
}

impl IiaDraw {
    pub fn draw(params: &IiaParams, rng: &mut impl Rng) -> Self {
        Self {
            x0_ref: params.x0_range.sample(rng),
            y0_ref: params.y0_range.sample(rng),
            theta: params.theta_range.sample(rng),
        }
    }

    pub fn field(&self, width: usize, height: usize) -> MultiplierField {
        make_multiplier_field(
            width,
            height,
            self.x0_ref * width as f64 / REFERENCE_SIZE,
            self.y0_ref * height as f64 / REFERENCE_SIZE,
            self.theta,
        )
    }
}

/// `normalize(slice ⊙ scale·field)`, with the product taken in f64.
pub fn apply_multiplier(slice: &Slice2D<f32>, field: &MultiplierField, scale: f64) -> Slice2D<f32> {
    debug_assert_eq!(slice.data.len(), field.values.len());
    let values = normalize_values(
        slice
            .data
            .iter()
            .zip(&field.values)
            .map(|(&i, &m)| i as f64 * (scale * m)),
    );
    slice.with_data(values)
}

pub fn apply_iia_with(slice: &Slice2D<f32>, draw: &IiaDraw) -> Slice2D<f32> {
    apply_multiplier(slice, &draw.field(slice.width, slice.height), 1.0)
}

pub fn apply_iia(slice: &Slice2D<f32>, params: &IiaParams, rng: &mut impl Rng) -> (Slice2D<f32>, IiaDraw) {
    let draw = IiaDraw::draw(params, rng);
    (apply_iia_with(slice, &draw), draw)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlipDraw {
    pub horizontal: bool,
    pub vertical: bool,
}

fn check_pair(a: &Slice2D<f32>, b: &Slice2D<u8>) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::Geometry(format!(
            "intensity {}x{} vs label {}x{}",
            a.width, a.height, b.width, b.height
        )))
    }
}

pub fn flip_with<T: Copy>(slice: &Slice2D<T>, draw: FlipDraw) -> Slice2D<T> {
    let (w, h) = (slice.width, slice.height);
    let mut data = Vec::with_capacity(slice.data.len());
    for y in 0..h {
        let sy = if draw.vertical { h - 1 - y } else { y };
        for x in 0..w {
            let sx = if draw.horizontal { w - 1 - x } else { x };
            data.push(slice.at(sx, sy));
        }
    }
    slice.with_data(data)
}

pub fn random_flip(
    slice: &Slice2D<f32>,
    labels: &Slice2D<u8>,
    prob: f64,
    rng: &mut impl Rng,
) -> Result<(Slice2D<f32>, Slice2D<u8>, FlipDraw)> {
    check_pair(slice, labels)?;
    let draw = FlipDraw {
        horizontal: rng.gen_bool(prob),
        vertical: rng.gen_bool(prob),
    };
    Ok((flip_with(slice, draw), flip_with(labels, draw), draw))
}

/// Source position of output pixel `(x, y)` for a rotation by `angle`
/// degrees about the slice centre.
fn rotation_source(w: usize, h: usize, angle: f64) -> impl Fn(usize, usize) -> (f64, f64) {
    let (s, c) = sin_cos_deg(angle);
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    move |x, y| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        // inverse rotation
        (cx + c * dx + s * dy, cy - s * dx + c * dy)
    }
}

/// Bilinear rotation with zero fill.
pub fn rotate_intensity(slice: &Slice2D<f32>, angle: f64) -> Slice2D<f32> {
    let (w, h) = (slice.width, slice.height);
    let src = rotation_source(w, h, angle);
    let sample = |xi: isize, yi: isize| -> f64 {
        if xi < 0 || yi < 0 || xi >= w as isize || yi >= h as isize {
            0.0
        } else {
            slice.at(xi as usize, yi as usize) as f64
        }
    };
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = src(x, y);
            let (fx, fy) = (sx.floor(), sy.floor());
            let (tx, ty) = (sx - fx, sy - fy);
            let (xi, yi) = (fx as isize, fy as isize);
            let v = if tx == 0.0 && ty == 0.0 {
                sample(xi, yi)
            } else {
                (1.0 - tx) * (1.0 - ty) * sample(xi, yi)
                    + tx * (1.0 - ty) * sample(xi + 1, yi)
                    + (1.0 - tx) * ty * sample(xi, yi + 1)
                    + tx * ty * sample(xi + 1, yi + 1)
            };
            data.push(v as f32);
        }
    }
    slice.with_data(data)
}

/// Nearest-neighbour rotation with background fill.
pub fn rotate_labels(slice: &Slice2D<u8>, angle: f64) -> Slice2D<u8> {
    let (w, h) = (slice.width, slice.height);
    let src = rotation_source(w, h, angle);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = src(x, y);
            let (xi, yi) = (sx.round(), sy.round());
            let v = if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
                TissueClass::Background.code()
            } else {
                slice.at(xi as usize, yi as usize)
            };
            data.push(v);
        }
    }
    slice.with_data(data)
}

pub fn rotate_with(slice: &Slice2D<f32>, labels: &Slice2D<u8>, angle: f64) -> Result<(Slice2D<f32>, Slice2D<u8>)> {
    check_pair(slice, labels)?;
    Ok((rotate_intensity(slice, angle), rotate_labels(labels, angle)))
}

pub fn random_rotate(
    slice: &Slice2D<f32>,
    labels: &Slice2D<u8>,
    range: Range,
    rng: &mut impl Rng,
) -> Result<(Slice2D<f32>, Slice2D<u8>, f64)> {
    check_pair(slice, labels)?;
    let angle = range.sample(rng);
    let (a, b) = rotate_with(slice, labels, angle)?;
    Ok((a, b, angle))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Per-axis flip probability. Zero disables flipping (and its draws).
    pub flip_prob: f64,
    /// Rotation angle range in degrees, or `None` to disable rotation.
    pub rotation_range: Option<Range>,
    pub iia: Option<IiaParams>,
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip_prob: 0.0,
            rotation_range: None,
            iia: None,
        }
    }

    pub fn flip() -> Self {
        Self {
            flip_prob: 0.5,
            ..Self::none()
        }
    }

    pub fn flip_rotate() -> Self {
        Self {
            rotation_range: Some(Range::new(0.0, 360.0)),
            ..Self::flip()
        }
    }

    pub fn flip_rotate_iia(proportion: f64) -> Self {
        Self {
            iia: Some(IiaParams::with_proportion(proportion)),
            ..Self::flip_rotate()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        if let Some(r) = self.rotation_range {
            if !(r.lo <= r.hi) {
                return Err(Error::Config(format!("empty rotation range {r:?}")));
            }
        }
        if let Some(iia) = &self.iia {
            iia.validate()?;
        }
        Ok(())
    }
}

/// Every random value drawn for one slice of a batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DrawLog {
    pub flip: Option<FlipDraw>,
    pub rotation: Option<f64>,
    pub iia: Option<IiaDraw>,
}

impl DrawLog {
    pub fn is_empty(&self) -> bool {
        self.flip.is_none() && self.rotation.is_none() && self.iia.is_none()
    }
}

#[derive(Clone, Debug)]
pub struct AugmentedBatch {
    pub images: Vec<Slice2D<f32>>,
    pub labels: Vec<Slice2D<u8>>,
    pub log: Vec<DrawLog>,
}

/// Number of slices in a batch of `n` that receive IIA at proportion `p`.
pub fn iia_count(p: f64, n: usize) -> usize {
    ((p * n as f64).round() as usize).min(n)
}

/// Augment a batch. Flips and rotations are applied to every slice, IIA to
/// exactly `round(p·n)` slices chosen without replacement, and every
/// intensity slice leaves normalized to `[0, 1023]`.
///
/// The batch-level `rng` picks the IIA subset and seeds one substream per
/// slice, so per-slice work is independent of processing order.
pub fn compose_batch(
    pairs: &[(Slice2D<f32>, Slice2D<u8>)],
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<AugmentedBatch> {
    if pairs.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let n = pairs.len();
    let mut with_iia = vec![false; n];
    if let Some(iia) = &config.iia {
        for i in sample(rng, n, iia_count(iia.proportion, n)) {
            with_iia[i] = true;
        }
    }
    let seeds: Vec<u64> = (0..n).map(|_| rng.gen()).collect();

    let mut out = AugmentedBatch {
        images: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        log: Vec::with_capacity(n),
    };
    for (((image, labels), seed), iia_on) in pairs.iter().zip(seeds).zip(with_iia) {
        check_pair(image, labels)?;
        let mut slice_rng = StreamRng::seed_from_u64(seed);
        let mut log = DrawLog::default();
        let (mut image, mut labels) = (image.clone(), labels.clone());
        if config.flip_prob > 0.0 {
            let (a, b, d) = random_flip(&image, &labels, config.flip_prob, &mut slice_rng)?;
            (image, labels, log.flip) = (a, b, Some(d));
        }
        if let Some(range) = config.rotation_range {
            let (a, b, angle) = random_rotate(&image, &labels, range, &mut slice_rng)?;
            (image, labels, log.rotation) = (a, b, Some(angle));
        }
        image = match (&config.iia, iia_on) {
            (Some(params), true) => {
                let (a, d) = apply_iia(&image, params, &mut slice_rng);
                log.iia = Some(d);
                a
            }
            _ => normalize_slice(&image),
        };
        out.images.push(image);
        out.labels.push(labels);
        out.log.push(log);
    }
    Ok(out)
}

/// Replay a logged augmentation on one slice.
pub fn replay(image: &Slice2D<f32>, labels: &Slice2D<u8>, log: &DrawLog) -> Result<(Slice2D<f32>, Slice2D<u8>)> {
    check_pair(image, labels)?;
    let (mut image, mut labels) = (image.clone(), labels.clone());
    if let Some(d) = log.flip {
        image = flip_with(&image, d);
        labels = flip_with(&labels, d);
    }
    if let Some(angle) = log.rotation {
        (image, labels) = rotate_with(&image, &labels, angle)?;
    }
    let image = match &log.iia {
        Some(d) => apply_iia_with(&image, d),
        None => normalize_slice(&image),
    };
    Ok((image, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn ramp(w: usize, h: usize) -> Slice2D<f32> {
        Slice2D::new(w, h, [1.0, 1.0], (0..w * h).map(|i| 1.0 + i as f32).collect()).unwrap()
    }

    fn blob_labels(w: usize, h: usize) -> Slice2D<u8> {
        let mut s = Slice2D::filled(w, h, [1.0, 1.0], 0u8);
        for y in 1..h - 1 {
            for x in 1..w / 2 {
                *s.at_mut(x, y) = 3;
            }
            for x in w / 2..w - 1 {
                *s.at_mut(x, y) = 5;
            }
        }
        s
    }

    #[test]
    fn field_direct_substitution() {
        let f = make_multiplier_field(8, 8, 0.0, 0.0, 0.0);
        assert_eq!(f.at(0, 0), 0.0);
        assert_eq!(f.at(3, 4), 25.0);
    }

    #[test]
    fn field_closed_form_unrotated() {
        let f = make_multiplier_field(8, 8, 1.0, 2.0, 0.0);
        for y in 0..8 {
            for x in 0..8 {
                let expected = ((x + 1) * (x + 1) + (y + 2) * (y + 2)) as f64;
                assert_eq!(f.at(x, y), expected, "at ({x},{y})");
            }
        }
    }

    #[test]
    fn half_turn_is_point_reflection() {
        let (w, h) = (7, 6);
        let a = make_multiplier_field(w, h, 3.5, -2.0, 0.0);
        let b = make_multiplier_field(w, h, 3.5, -2.0, 180.0);
        for y in 0..h {
            for x in 0..w {
                assert_eq!(b.at(x, y), a.at(w - 1 - x, h - 1 - y));
            }
        }
    }

    #[test]
    fn iia_on_zero_slice_is_zero() {
        let s = Slice2D::filled(16, 16, [1.0, 1.0], 0.0f32);
        let (out, _) = apply_iia(&s, &IiaParams::default(), &mut substream(1, &[0]));
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn iia_is_deterministic_and_replayable() {
        let s = ramp(16, 16);
        let (a, da) = apply_iia(&s, &IiaParams::default(), &mut substream(9, &[1]));
        let (b, db) = apply_iia(&s, &IiaParams::default(), &mut substream(9, &[1]));
        assert_eq!(a, b);
        assert_eq!(da, db);
        assert_eq!(apply_iia_with(&s, &da), a);
    }

    #[test]
    fn iia_matches_independent_recomputation() {
        let s = ramp(12, 10);
        let (out, d) = apply_iia(&s, &IiaParams::default(), &mut substream(4, &[2]));
        let (x0, y0) = (d.x0_ref * 12.0 / 512.0, d.y0_ref * 10.0 / 512.0);
        let (sn, cs) = d.theta.to_radians().sin_cos();
        let (cx, cy) = (5.5, 4.5);
        let prod: Vec<f64> = (0..120)
            .map(|i| {
                let (x, y) = ((i % 12) as f64, (i / 12) as f64);
                let xr = cx + cs * (x - cx) - sn * (y - cy);
                let yr = cy + sn * (x - cx) + cs * (y - cy);
                s.data[i] as f64 * ((xr + x0).powi(2) + (yr + y0).powi(2))
            })
            .collect();
        let lo = prod.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = prod.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (o, p) in out.data.iter().zip(&prod) {
            let expected = (p - lo) / (hi - lo) * 1023.0;
            assert!((*o as f64 - expected).abs() < 1e-3, "{o} vs {expected}");
        }
        assert!(out.data.iter().all(|v| (0.0..=1023.0).contains(v)));
    }

    #[test]
    fn offsets_scale_with_width() {
        let p = IiaParams::default();
        let mut rng = substream(3, &[3]);
        for _ in 0..1000 {
            let d = IiaDraw::draw(&p, &mut rng);
            assert!(p.x0_range.contains(d.x0_ref));
            let f512 = d.field(512, 512);
            assert!((43.0..=187.0).contains(&f512.x0));
            let f64_ = d.field(64, 64);
            assert!((43.0 / 8.0..=187.0 / 8.0).contains(&f64_.x0));
        }
    }

    #[test]
    fn flip_is_an_involution_and_respects_symmetry() {
        let s = ramp(5, 4);
        let d = FlipDraw {
            horizontal: true,
            vertical: true,
        };
        assert_eq!(flip_with(&flip_with(&s, d), d), s);
        let sym = Slice2D::new(3, 1, [1.0, 1.0], vec![1.0f32, 2.0, 1.0]).unwrap();
        let h = FlipDraw {
            horizontal: true,
            vertical: false,
        };
        assert_eq!(flip_with(&sym, h), sym);
    }

    #[test]
    fn flip_rate_is_one_half() {
        let s = ramp(2, 2);
        let l = Slice2D::filled(2, 2, [1.0, 1.0], 0u8);
        let mut rng = substream(11, &[5]);
        let flips = (0..10_000)
            .filter(|_| random_flip(&s, &l, 0.5, &mut rng).unwrap().2.horizontal)
            .count();
        let rate = flips as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&rate), "rate {rate}");
    }

    #[test]
    fn geometry_mismatch_is_reported() {
        let s = ramp(4, 4);
        let l = Slice2D::filled(3, 4, [1.0, 1.0], 0u8);
        let mut rng = substream(0, &[]);
        assert!(random_flip(&s, &l, 0.5, &mut rng).is_err());
        assert!(random_rotate(&s, &l, Range::new(0.0, 360.0), &mut rng).is_err());
    }

    #[test]
    fn zero_rotation_is_identity() {
        let s = ramp(6, 5);
        let l = blob_labels(6, 5);
        let (a, b) = rotate_with(&s, &l, 0.0).unwrap();
        assert_eq!(a, s);
        assert_eq!(b, l);
    }

    #[test]
    fn four_quarter_turns_restore_labels() {
        let l = blob_labels(9, 9);
        let mut r = l.clone();
        for _ in 0..4 {
            r = rotate_labels(&r, 90.0);
        }
        assert_eq!(r, l);
    }

    #[test]
    fn compose_batch_iia_counts() {
        let pairs: Vec<_> = (0..18).map(|_| (ramp(8, 8), blob_labels(8, 8))).collect();
        for (p, expected) in [(0.0, 0), (1.0, 18), (0.5, 9), (0.2, 4)] {
            let cfg = AugmentConfig::flip_rotate_iia(p);
            let batch = compose_batch(&pairs, &cfg, &mut substream(2, &[7])).unwrap();
            let count = batch.log.iter().filter(|l| l.iia.is_some()).count();
            assert_eq!(count, expected, "p = {p}");
            for img in &batch.images {
                let max = img.data.iter().cloned().fold(0.0f32, f32::max);
                let min = img.data.iter().cloned().fold(f32::MAX, f32::min);
                assert_eq!((min, max), (0.0, 1023.0));
            }
        }
    }

    #[test]
    fn no_augmentation_draws_nothing() {
        let pairs: Vec<_> = (0..4).map(|_| (ramp(8, 8), blob_labels(8, 8))).collect();
        let batch = compose_batch(&pairs, &AugmentConfig::none(), &mut substream(2, &[8])).unwrap();
        assert!(batch.log.iter().all(DrawLog::is_empty));
        assert_eq!(batch.labels[0], pairs[0].1);
    }

    #[test]
    fn replay_reproduces_batch() {
        let pairs: Vec<_> = (0..6).map(|_| (ramp(8, 8), blob_labels(8, 8))).collect();
        let cfg = AugmentConfig::flip_rotate_iia(0.5);
        let batch = compose_batch(&pairs, &cfg, &mut substream(5, &[1])).unwrap();
        for (i, (img, lbl)) in pairs.iter().enumerate() {
            let (a, b) = replay(img, lbl, &batch.log[i]).unwrap();
            assert_eq!(a, batch.images[i]);
            assert_eq!(b, batch.labels[i]);
        }
    }

    proptest! {
        #[test]
        fn iia_invariant_to_field_scale(seed in any::<u64>(), c in prop::sample::select(vec![1e-3, 1.0, 1e3])) {
            let s = ramp(16, 12);
            let d = IiaDraw::draw(&IiaParams::default(), &mut substream(seed, &[0]));
            let field = d.field(16, 12);
            let a = apply_multiplier(&s, &field, 1.0);
            let b = apply_multiplier(&s, &field, c);
            for (x, y) in a.data.iter().zip(&b.data) {
                prop_assert!((x - y).abs() <= 1e-4);
            }
        }

        #[test]
        fn rotation_keeps_label_set(angle in 0.0f64..360.0) {
            let l = blob_labels(10, 8);
            let r = rotate_labels(&l, angle);
            let before: BTreeSet<u8> = l.data.iter().copied().collect();
            let after: BTreeSet<u8> = r.data.iter().copied().collect();
            prop_assert!(after.iter().all(|c| *c == 0 || before.contains(c)));
        }
    }
}
