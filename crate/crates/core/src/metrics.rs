//! Dice coefficient and mean surface distance, per slice or per volume, and
//! their aggregation over artifact / artifact-free slice subsets.
//!
//! Conventions:
//! - a class absent from both reference and prediction is *undefined* (not
//!   1.0) and is skipped by every average;
//! - if exactly one side is empty, DC is 0 and MSD is undefined;
//! - boundary voxels are class voxels with at least one 4-neighbour (6 in 3D)
//!   outside the class, the image border counting as outside;
//! - MSD is the average of the two directed mean boundary distances.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tissue::TissueClass;
use crate::volume::{LabelVolume, Slice2D};

/// Dimensions `[w, h, d]` plus a flat class-membership mask.
struct Grid<'a> {
    dims: [usize; 3],
    labels: &'a [u8],
}

impl Grid<'_> {
    fn mask(&self, class: u8) -> Vec<bool> {
        self.labels.iter().map(|&c| c == class).collect()
    }
}

fn boundary(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [w, h, d] = dims;
    let idx = |x: usize, y: usize, z: usize| (z * h + y) * w + x;
    let mut out = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = idx(x, y, z);
                if !mask[i] {
                    continue;
                }
                let mut edge = x == 0 || y == 0 || x + 1 == w || y + 1 == h;
                if d > 1 {
                    edge |= z == 0 || z + 1 == d;
                }
                edge = edge
                    || !mask[idx(x - 1, y, z)]
                    || !mask[idx(x + 1, y, z)]
                    || !mask[idx(x, y - 1, z)]
                    || !mask[idx(x, y + 1, z)];
                if !edge && d > 1 {
                    edge = !mask[idx(x, y, z - 1)] || !mask[idx(x, y, z + 1)];
                }
                out[i] = edge;
            }
        }
    }
    out
}

/// Lower envelope of parabolas `weight·(q - p)² + f(p)`; in place.
fn edt_1d(f: &mut [f64], weight: f64, v: &mut Vec<usize>, z: &mut Vec<f64>, tmp: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + weight * (q * q) as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let fp = f[p] + weight * (p * p) as f64;
                    let s = (fq - fp) / (2.0 * weight * (q - p) as f64);
                    if s <= *z.last().expect("paired with v") {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    tmp.clear();
    tmp.extend_from_slice(f);
    if v.is_empty() {
        return;
    }
    let mut k = 0;
    for q in 0..n {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        f[q] = weight * dq * dq + tmp[p];
    }
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest site.
fn squared_distance_transform(sites: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [w, h, d] = dims;
    let mut f: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let (mut v, mut z, mut tmp) = (Vec::new(), Vec::new(), Vec::new());
    let mut line = Vec::new();
    let axes: [(usize, usize, f64); 3] = [(w, 1, spacing[0]), (h, w, spacing[1]), (d, w * h, spacing[2])];
    for (axis, &(len, stride, step)) in axes.iter().enumerate() {
        if len == 1 {
            continue;
        }
        let weight = step * step;
        for start in 0..f.len() {
            // start must be the first element of its line along this axis
            let coord = match axis {
                0 => start % w,
                1 => (start / w) % h,
                _ => start / (w * h),
            };
            if coord != 0 {
                continue;
            }
            line.clear();
            line.extend((0..len).map(|i| f[start + i * stride]));
            edt_1d(&mut line, weight, &mut v, &mut z, &mut tmp);
            for (i, &val) in line.iter().enumerate() {
                f[start + i * stride] = val;
            }
        }
    }
    f
}

fn directed_mean(from: &[bool], to_dist2: &[f64]) -> f64 {
    let (sum, n) = from
        .iter()
        .zip(to_dist2)
        .filter(|(b, _)| **b)
        .fold((0.0, 0usize), |(s, n), (_, d2)| (s + d2.sqrt(), n + 1));
    sum / n as f64
}

fn dice_grid(a: &Grid, b: &Grid, class: u8) -> Option<f64> {
    let (mut ra, mut pb, mut inter) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels.iter().zip(b.labels) {
        let (in_a, in_b) = (x == class, y == class);
        ra += in_a as usize;
        pb += in_b as usize;
        inter += (in_a && in_b) as usize;
    }
    if ra + pb == 0 {
        None
    } else {
        Some(2.0 * inter as f64 / (ra + pb) as f64)
    }
}

fn msd_grid(a: &Grid, b: &Grid, class: u8, spacing: [f64; 3]) -> Option<f64> {
    let (ma, mb) = (a.mask(class), b.mask(class));
    if !ma.iter().any(|&x| x) || !mb.iter().any(|&x| x) {
        return None;
    }
    let (ba, bb) = (boundary(&ma, a.dims), boundary(&mb, b.dims));
    let da = squared_distance_transform(&ba, a.dims, spacing);
    let db = squared_distance_transform(&bb, b.dims, spacing);
    Some(0.5 * (directed_mean(&ba, &db) + directed_mean(&bb, &da)))
}

fn check_2d(a: &Slice2D<u8>, b: &Slice2D<u8>) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::Geometry(format!(
            "reference {}x{} vs prediction {}x{}",
            a.width, a.height, b.width, b.height
        )))
    }
}

fn check_3d(a: &LabelVolume, b: &LabelVolume) -> Result<()> {
    let (ga, gb) = (a.geometry(), b.geometry());
    if (ga.width, ga.height, ga.depth) == (gb.width, gb.height, gb.depth) {
        Ok(())
    } else {
        Err(Error::Geometry(format!("reference {ga:?} vs prediction {gb:?}")))
    }
}

fn grid2(s: &Slice2D<u8>) -> Grid<'_> {
    Grid {
        dims: [s.width, s.height, 1],
        labels: &s.data,
    }
}

fn grid3(v: &LabelVolume) -> Grid<'_> {
    let g = v.geometry();
    Grid {
        dims: [g.width, g.height, g.depth],
        labels: v.data(),
    }
}

pub fn dice_2d(reference: &Slice2D<u8>, pred: &Slice2D<u8>, class: TissueClass) -> Result<Option<f64>> {
    check_2d(reference, pred)?;
    Ok(dice_grid(&grid2(reference), &grid2(pred), class.code()))
}

/// Symmetric mean surface distance in mm using the slice's in-plane spacing.
pub fn msd_2d(
    reference: &Slice2D<u8>,
    pred: &Slice2D<u8>,
    class: TissueClass,
    spacing: [f64; 2],
) -> Result<Option<f64>> {
    check_2d(reference, pred)?;
    Ok(msd_grid(
        &grid2(reference),
        &grid2(pred),
        class.code(),
        [spacing[0], spacing[1], 1.0],
    ))
}

pub fn dice_3d(reference: &LabelVolume, pred: &LabelVolume, class: TissueClass) -> Result<Option<f64>> {
    check_3d(reference, pred)?;
    Ok(dice_grid(&grid3(reference), &grid3(pred), class.code()))
}

pub fn msd_3d(
    reference: &LabelVolume,
    pred: &LabelVolume,
    class: TissueClass,
    spacing: [f64; 3],
) -> Result<Option<f64>> {
    check_3d(reference, pred)?;
    Ok(msd_grid(&grid3(reference), &grid3(pred), class.code(), spacing))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceClassScore {
    pub volume: String,
    pub slice: usize,
    pub class: TissueClass,
    pub dc: Option<f64>,
    pub msd: Option<f64>,
    pub artifact: bool,
}

/// Score every (slice, foreground class) pair of a volume.
pub fn score_volume(
    volume_id: &str,
    reference: &LabelVolume,
    pred: &LabelVolume,
    artifact_flags: &[bool],
) -> Result<Vec<SliceClassScore>> {
    check_3d(reference, pred)?;
    let g = reference.geometry();
    if artifact_flags.len() != g.depth {
        return Err(Error::Geometry(format!(
            "{} artifact flags for {} slices",
            artifact_flags.len(),
            g.depth
        )));
    }
    let mut out = Vec::with_capacity(g.depth * 7);
    for z in 0..g.depth {
        let r = reference.get_slice(z)?;
        let p = pred.get_slice(z)?;
        for class in TissueClass::FOREGROUND {
            out.push(SliceClassScore {
                volume: volume_id.to_string(),
                slice: z,
                class,
                dc: dice_2d(&r, &p, class)?,
                msd: msd_2d(&r, &p, class, r.spacing)?,
                artifact: artifact_flags[z],
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Subset {
    All,
    WithArtifact,
    WithoutArtifact,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::All, Subset::WithArtifact, Subset::WithoutArtifact];

    pub fn name(self) -> &'static str {
        match self {
            Subset::All => "all",
            Subset::WithArtifact => "with_artifact",
            Subset::WithoutArtifact => "without_artifact",
        }
    }

    pub fn admits(self, artifact: bool) -> bool {
        match self {
            Subset::All => true,
            Subset::WithArtifact => artifact,
            Subset::WithoutArtifact => !artifact,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MeanScore {
    pub dc: Option<f64>,
    pub msd: Option<f64>,
    pub n_dc: usize,
    pub n_msd: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> (Option<f64>, usize) {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        (None, 0)
    } else {
        (Some(s / n as f64), n)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// `per_class[c][s]`: foreground class `c` (0 = CB), subset `s` in [`Subset::ALL`] order.
    pub per_class: Vec<[MeanScore; 3]>,
    /// Mean of the defined per-class means, per subset.
    pub grand: [MeanScore; 3],
    /// Number of distinct slices per subset.
    pub slices: [usize; 3],
}

impl MetricsReport {
    pub fn class(&self, class: TissueClass, subset: Subset) -> MeanScore {
        self.per_class[class.code() as usize - 1][subset_index(subset)]
    }

    pub fn grand(&self, subset: Subset) -> MeanScore {
        self.grand[subset_index(subset)]
    }

    /// Table-style CSV: `subset,class,dc,msd` with `NA` for undefined cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subset,class,dc,msd\n");
        for subset in Subset::ALL {
            for class in TissueClass::FOREGROUND {
                let m = self.class(class, subset);
                let _ = writeln!(out, "{},{},{},{}", subset.name(), class, na(m.dc), na(m.msd));
            }
            let g = self.grand(subset);
            let _ = writeln!(out, "{},mean,{},{}", subset.name(), na(g.dc), na(g.msd));
        }
        out
    }
}

fn subset_index(s: Subset) -> usize {
    Subset::ALL.iter().position(|x| *x == s).expect("listed")
}

pub fn na(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

pub fn aggregate(scores: &[SliceClassScore]) -> MetricsReport {
    let mut per_class = Vec::with_capacity(7);
    for class in TissueClass::FOREGROUND {
        let mut row = [MeanScore::default(); 3];
        for (i, subset) in Subset::ALL.into_iter().enumerate() {
            let rows = || {
                scores
                    .iter()
                    .filter(move |s| s.class == class && subset.admits(s.artifact))
            };
            let (dc, n_dc) = mean(rows().filter_map(|s| s.dc));
            let (msd, n_msd) = mean(rows().filter_map(|s| s.msd));
            row[i] = MeanScore { dc, msd, n_dc, n_msd };
        }
        per_class.push(row);
    }
    let mut grand = [MeanScore::default(); 3];
    let mut slices = [0usize; 3];
    for i in 0..3 {
        let (dc, n_dc) = mean(per_class.iter().filter_map(|r| r[i].dc));
        let (msd, n_msd) = mean(per_class.iter().filter_map(|r| r[i].msd));
        grand[i] = MeanScore { dc, msd, n_dc, n_msd };
        let mut seen: Vec<(&str, usize)> = scores
            .iter()
            .filter(|s| Subset::ALL[i].admits(s.artifact))
            .map(|s| (s.volume.as_str(), s.slice))
            .collect();
        seen.sort_unstable();
        seen.dedup();
        slices[i] = seen.len();
    }
    MetricsReport {
        per_class,
        grand,
        slices,
    }
}

pub fn scores_to_csv(scores: &[SliceClassScore]) -> String {
    let mut out = String::from("volume,slice,class,dc,msd,artifact\n");
    for s in scores {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            s.volume,
            s.slice,
            s.class,
            na(s.dc),
            na(s.msd),
            s.artifact as u8
        );
    }
    out
}

pub fn scores_from_csv(text: &str) -> Result<Vec<SliceClassScore>> {
    let mut lines = text.lines();
    if lines.next() != Some("volume,slice,class,dc,msd,artifact") {
        return Err(Error::Config("unexpected score CSV header".into()));
    }
    let opt = |s: &str| -> Result<Option<f64>> {
        if s == "NA" {
            Ok(None)
        } else {
            s.parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("bad number `{s}`")))
        }
    };
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Config(format!("bad score row `{line}`")));
            }
            Ok(SliceClassScore {
                volume: f[0].to_string(),
                slice: f[1]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad slice `{}`", f[1])))?,
                class: f[2].parse()?,
                dc: opt(f[3])?,
                msd: opt(f[4])?,
                artifact: f[5] == "1",
            })
        })
        .collect()
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn slice(w: usize, h: usize, on: &[(usize, usize)], class: u8) -> Slice2D<u8> {
        let mut s = Slice2D::filled(w, h, [0.7, 0.7], 0u8);
        for &(x, y) in on {
            *s.at_mut(x, y) = class;
        }
        s
    }

    /// All-pairs reference used to check the distance-transform path.
    fn brute_msd(r: &Slice2D<u8>, p: &Slice2D<u8>, class: u8, sp: [f64; 2]) -> Option<f64> {
        let pts = |s: &Slice2D<u8>| -> Vec<(f64, f64)> {
            let mut out = vec![];
            for y in 0..s.height {
                for x in 0..s.width {
                    if s.at(x, y) != class {
                        continue;
                    }
                    let outside = |dx: i64, dy: i64| {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        nx < 0
                            || ny < 0
                            || nx >= s.width as i64
                            || ny >= s.height as i64
                            || s.at(nx as usize, ny as usize) != class
                    };
                    if outside(1, 0) || outside(-1, 0) || outside(0, 1) || outside(0, -1) {
                        out.push((x as f64 * sp[0], y as f64 * sp[1]));
                    }
                }
            }
            out
        };
        let (a, b) = (pts(r), pts(p));
        if a.is_empty() || b.is_empty() {
            return None;
        }
        let dir = |from: &[(f64, f64)], to: &[(f64, f64)]| {
            from.iter()
                .map(|f| {
                    to.iter()
                        .map(|t| ((f.0 - t.0).powi(2) + (f.1 - t.1).powi(2)).sqrt())
                        .fold(f64::INFINITY, f64::min)
                })
                .sum::<f64>()
                / from.len() as f64
        };
        Some(0.5 * (dir(&a, &b) + dir(&b, &a)))
    }

    #[test]
    fn dice_examples() {
        let sq = slice(6, 6, &[(1, 1), (2, 1), (1, 2), (2, 2)], 4);
        let shifted = slice(6, 6, &[(2, 1), (3, 1), (2, 2), (3, 2)], 4);
        let far = slice(6, 6, &[(4, 4)], 4);
        let wm = TissueClass::Wm;
        assert_eq!(dice_2d(&sq, &sq, wm).unwrap(), Some(1.0));
        assert_eq!(dice_2d(&sq, &far, wm).unwrap(), Some(0.0));
        assert_eq!(dice_2d(&sq, &shifted, wm).unwrap(), Some(0.5));
        assert_eq!(dice_2d(&sq, &sq, TissueClass::Cb).unwrap(), None);
        assert_eq!(dice_2d(&sq, &slice(6, 6, &[], 4), wm).unwrap(), Some(0.0));
        assert!(dice_2d(&sq, &slice(5, 6, &[], 4), wm).is_err());
    }

    #[test]
    fn msd_examples() {
        let a = slice(8, 8, &[(1, 1), (2, 1), (1, 2)], 3);
        assert_eq!(msd_2d(&a, &a, TissueClass::Vcsf, [0.7, 0.7]).unwrap(), Some(0.0));
        let p = slice(8, 8, &[(1, 4)], 3);
        let q = slice(8, 8, &[(4, 4)], 3);
        let d = msd_2d(&p, &q, TissueClass::Vcsf, [0.7, 0.7]).unwrap().unwrap();
        assert!((d - 2.1).abs() < 1e-12);
        assert_eq!(
            msd_2d(&p, &slice(8, 8, &[], 3), TissueClass::Vcsf, [0.7, 0.7]).unwrap(),
            None
        );
    }

    #[test]
    fn msd_matches_brute_force_on_random_masks() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..300 {
            let (w, h) = (rng.gen_range(1..12), rng.gen_range(1..12));
            let sp = [rng.gen_range(0.3..2.0), rng.gen_range(0.3..2.0)];
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                let mut s = Slice2D::filled(w, h, sp, 0u8);
                for v in s.data.iter_mut() {
                    *v = if rng.gen_bool(0.4) { 2 } else { 0 };
                }
                s
            };
            let (r, p) = (mk(&mut rng), mk(&mut rng));
            let fast = msd_2d(&r, &p, TissueClass::Bgt, sp).unwrap();
            let slow = brute_msd(&r, &p, 2, sp);
            match (fast, slow) {
                (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-12, "{a} vs {b}"),
                (a, b) => assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn three_d_examples() {
        let g = crate::volume::Geometry::new(4, 4, 3, [0.7, 0.7, 1.25]).unwrap();
        let mut a = LabelVolume::filled(g, 0).unwrap();
        a.set(1, 1, 0, 5).unwrap();
        let mut b = LabelVolume::filled(g, 0).unwrap();
        b.set(1, 1, 1, 5).unwrap();
        assert_eq!(dice_3d(&a, &a, TissueClass::Bs).unwrap(), Some(1.0));
        assert_eq!(msd_3d(&a, &a, TissueClass::Bs, g.spacing).unwrap(), Some(0.0));
        let d = msd_3d(&a, &b, TissueClass::Bs, g.spacing).unwrap().unwrap();
        assert!((d - 1.25).abs() < 1e-12);
    }

    #[test]
    fn aggregate_examples() {
        let mk = |dc: Option<f64>, artifact, slice| SliceClassScore {
            volume: "v".into(),
            slice,
            class: TissueClass::Wm,
            dc,
            msd: dc.map(|d| 1.0 - d),
            artifact,
        };
        let r = aggregate(&[mk(Some(0.8), true, 0)]);
        assert_eq!(r.class(TissueClass::Wm, Subset::All).dc, Some(0.8));
        assert_eq!(r.grand(Subset::All).dc, Some(0.8));

        let r = aggregate(&[mk(Some(0.8), true, 0), mk(Some(0.9), false, 1)]);
        assert!((r.class(TissueClass::Wm, Subset::All).dc.unwrap() - 0.85).abs() < 1e-15);
        assert_eq!(r.class(TissueClass::Wm, Subset::WithArtifact).dc, Some(0.8));
        assert_eq!(r.class(TissueClass::Wm, Subset::WithoutArtifact).dc, Some(0.9));
        assert_eq!(r.class(TissueClass::Cb, Subset::All).dc, None);
        assert_eq!(r.slices, [2, 1, 1]);

        let r = aggregate(&[mk(None, false, 0)]);
        assert_eq!(r.class(TissueClass::Wm, Subset::All).dc, None);
        assert_eq!(r.class(TissueClass::Wm, Subset::All).n_dc, 0);
    }

    #[test]
    fn score_csv_round_trip() {
        let s = vec![SliceClassScore {
            volume: "case_001".into(),
            slice: 3,
            class: TissueClass::Cgm,
            dc: Some(0.1 + 0.2),
            msd: None,
            artifact: true,
        }];
        assert_eq!(scores_from_csv(&scores_to_csv(&s)).unwrap(), s);
    }
}
