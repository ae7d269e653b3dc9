//! ICV mask cleanup and ROI extraction between the two pipeline stages.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::volume::{Geometry, LabelVolume, Volume, Voxel};

/// Components with a physical volume strictly below this are discarded.
pub const CC_MIN_VOLUME_MM3: f64 = 3000.0;

pub const DEFAULT_ROI_MARGIN: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask3D {
    pub geometry: Geometry,
    pub data: Vec<bool>,
}

impl BinaryMask3D {
    pub fn new(geometry: Geometry, data: Vec<bool>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::SizeMismatch {
                expected: geometry.len(),
                found: data.len(),
            });
        }
        Ok(Self { geometry, data })
    }

    /// Union of all non-background labels.
    pub fn from_labels(labels: &LabelVolume) -> Self {
        Self {
            geometry: *labels.geometry(),
            data: labels.data().iter().map(|&c| c != 0).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.geometry.index(x, y, z)]
    }

    pub fn is_subset_of(&self, other: &BinaryMask3D) -> bool {
        self.data.iter().zip(&other.data).all(|(a, b)| !a || *b)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Connectivity {
    Six,
    Eighteen,
    #[default]
    TwentySix,
}

impl Connectivity {
    fn admits(self, dx: i64, dy: i64, dz: i64) -> bool {
        let n = dx.abs() + dy.abs() + dz.abs();
        match self {
            Connectivity::Six => n == 1,
            Connectivity::Eighteen => n == 1 || n == 2,
            Connectivity::TwentySix => n >= 1,
        }
    }

    fn offsets(self) -> Vec<(i64, i64, i64)> {
        let mut out = Vec::new();
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if self.admits(dx, dy, dz) {
                        out.push((dx, dy, dz));
                    }
                }
            }
        }
        out
    }
}

impl FromStr for Connectivity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "6" => Ok(Connectivity::Six),
            "18" => Ok(Connectivity::Eighteen),
            "26" => Ok(Connectivity::TwentySix),
            _ => Err(Error::Config(format!("connectivity must be 6, 18 or 26, got `{s}`"))),
        }
    }
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = match self {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        };
        write!(f, "{n}")
    }
}

/// Component id per voxel (0 = not in mask) and voxel count per component.
/// Ids are dense from 1 in raster order of each component's first voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct Components {
    pub labels: Vec<u32>,
    /// `counts[i]` is the size of component `i + 1`.
    pub counts: Vec<usize>,
}

pub fn connected_components_3d(mask: &BinaryMask3D, connectivity: Connectivity) -> Components {
    let g = mask.geometry;
    let (w, h, d) = (g.width as i64, g.height as i64, g.depth as i64);
    let offsets = connectivity.offsets();
    let mut labels = vec![0u32; mask.data.len()];
    let mut counts = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.data.len() {
        if !mask.data[start] || labels[start] != 0 {
            continue;
        }
        let id = counts.len() as u32 + 1;
        labels[start] = id;
        queue.push_back(start);
        let mut count = 0;
        while let Some(i) = queue.pop_front() {
            count += 1;
            let x = (i % g.width) as i64;
            let y = ((i / g.width) % g.height) as i64;
            let z = (i / (g.width * g.height)) as i64;
            for &(dx, dy, dz) in &offsets {
                let (nx, ny, nz) = (x + dx, y + dy, z + dz);
                if nx < 0 || ny < 0 || nz < 0 || nx >= w || ny >= h || nz >= d {
                    continue;
                }
                let j = ((nz * h + ny) * w + nx) as usize;
                if mask.data[j] && labels[j] == 0 {
                    labels[j] = id;
                    queue.push_back(j);
                }
            }
        }
        counts.push(count);
    }
    Components { labels, counts }
}

/// Drop every component whose volume is strictly below `min_volume_mm3`.
pub fn filter_small_components(mask: &BinaryMask3D, connectivity: Connectivity, min_volume_mm3: f64) -> BinaryMask3D {
    let cc = connected_components_3d(mask, connectivity);
    let voxel = mask.geometry.voxel_volume();
    let keep: Vec<bool> = cc
        .counts
        .iter()
        .map(|&n| !(n as f64 * voxel < min_volume_mm3))
        .collect();
    BinaryMask3D {
        geometry: mask.geometry,
        data: cc.labels.iter().map(|&id| id != 0 && keep[id as usize - 1]).collect(),
    }
}

/// Inclusive voxel box `[min, max]` per axis (x, y, z).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoiBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
    pub margin: usize,
}

impl RoiBox {
    pub fn size(&self) -> [usize; 3] {
        [
            self.max[0] - self.min[0] + 1,
            self.max[1] - self.min[1] + 1,
            self.max[2] - self.min[2] + 1,
        ]
    }

    /// Plain-text form `x0 y0 z0 x1 y1 z1`.
    pub fn to_text(&self) -> String {
        format!(
            "{} {} {} {} {} {}",
            self.min[0], self.min[1], self.min[2], self.max[0], self.max[1], self.max[2]
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let v: Vec<usize> = text
            .split_ascii_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("bad ROI `{text}`")))?;
        if v.len() != 6 || (0..3).any(|a| v[a] > v[a + 3]) {
            return Err(Error::Config(format!("bad ROI `{text}`")));
        }
        Ok(Self {
            min: [v[0], v[1], v[2]],
            max: [v[3], v[4], v[5]],
            margin: 0,
        })
    }
}

/// Grow `[lo, hi]` to a length that is a multiple of `multiple` inside `[0, len)`.
fn pad_axis(lo: usize, hi: usize, len: usize, multiple: usize) -> Result<(usize, usize)> {
    let size = hi - lo + 1;
    let target = size.div_ceil(multiple) * multiple;
    if target > len {
        return Err(Error::Geometry(format!(
            "ROI of {size} voxels cannot be padded to a multiple of {multiple} within {len}"
        )));
    }
    let extra = target - size;
    let mut new_lo = lo.saturating_sub(extra / 2);
    let mut new_hi = new_lo + target - 1;
    if new_hi >= len {
        new_hi = len - 1;
        new_lo = new_hi + 1 - target;
    }
    Ok((new_lo, new_hi))
}

/// Tight bounding box of the mask, grown by `margin` in-plane and clamped,
/// then padded in-plane to a multiple of `multiple` (use 1 for no padding).
pub fn compute_roi(mask: &BinaryMask3D, margin: usize, multiple: usize) -> Result<RoiBox> {
    let g = mask.geometry;
    let mut min = [usize::MAX; 3];
    let mut max = [0usize; 3];
    let mut any = false;
    for z in 0..g.depth {
        for y in 0..g.height {
            for x in 0..g.width {
                if mask.get(x, y, z) {
                    any = true;
                    for (a, c) in [x, y, z].into_iter().enumerate() {
                        min[a] = min[a].min(c);
                        max[a] = max[a].max(c);
                    }
                }
            }
        }
    }
    if !any {
        return Err(Error::NoIcv);
    }
    let dims = [g.width, g.height, g.depth];
    for a in 0..2 {
        min[a] = min[a].saturating_sub(margin);
        max[a] = (max[a] + margin).min(dims[a] - 1);
        if multiple > 1 {
            (min[a], max[a]) = pad_axis(min[a], max[a], dims[a], multiple)?;
        }
    }
    Ok(RoiBox { min, max, margin })
}

pub fn crop_to_roi<T: Voxel>(volume: &Volume<T>, roi: &RoiBox) -> Result<Volume<T>> {
    let g = volume.geometry();
    if roi.max[0] >= g.width || roi.max[1] >= g.height || roi.max[2] >= g.depth {
        return Err(Error::Geometry(format!("ROI {roi:?} outside volume")));
    }
    let [w, h, d] = roi.size();
    let mut data = Vec::with_capacity(w * h * d);
    for z in roi.min[2]..=roi.max[2] {
        for y in roi.min[1]..=roi.max[1] {
            let row = g.index(roi.min[0], y, z);
            data.extend_from_slice(&volume.data()[row..row + w]);
        }
    }
    Volume::new(Geometry::new(w, h, d, g.spacing)?, data)
}

/// Place `cropped` back into a volume of `geometry` at the ROI offset,
/// filling everything else with `fill`.
pub fn embed_roi<T: Voxel>(cropped: &Volume<T>, roi: &RoiBox, geometry: Geometry, fill: T) -> Result<Volume<T>> {
    let [w, h, d] = roi.size();
    let cg = cropped.geometry();
    if (cg.width, cg.height, cg.depth) != (w, h, d) {
        return Err(Error::Geometry("cropped volume does not match ROI size".into()));
    }
    let mut data = vec![fill; geometry.len()];
    for z in 0..d {
        for y in 0..h {
            let dst = geometry.index(roi.min[0], roi.min[1] + y, roi.min[2] + z);
            let src = cg.index(0, y, z);
            data[dst..dst + w].copy_from_slice(&cropped.data()[src..src + w]);
        }
    }
    Volume::new(geometry, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn geom(w: usize, h: usize, d: usize, spacing: [f64; 3]) -> Geometry {
        Geometry::new(w, h, d, spacing).unwrap()
    }

    fn mask_from(g: Geometry, on: &[(usize, usize, usize)]) -> BinaryMask3D {
        let mut data = vec![false; g.len()];
        for &(x, y, z) in on {
            data[g.index(x, y, z)] = true;
        }
        BinaryMask3D::new(g, data).unwrap()
    }

    #[test]
    fn empty_mask_has_no_components() {
        let m = mask_from(geom(4, 4, 4, [1.0; 3]), &[]);
        assert!(connected_components_3d(&m, Connectivity::TwentySix).counts.is_empty());
    }

    #[test]
    fn corner_neighbours_join_under_26() {
        let m = mask_from(geom(4, 4, 4, [1.0; 3]), &[(0, 0, 0), (1, 1, 1)]);
        assert_eq!(connected_components_3d(&m, Connectivity::TwentySix).counts, vec![2]);
        assert_eq!(connected_components_3d(&m, Connectivity::Eighteen).counts, vec![1, 1]);
        assert_eq!(connected_components_3d(&m, Connectivity::Six).counts, vec![1, 1]);
    }

    #[test]
    fn single_voxel_is_removed() {
        let g = geom(4, 4, 4, [0.7, 0.7, 1.25]);
        let m = mask_from(g, &[(2, 2, 2)]);
        assert!((g.voxel_volume() - 0.6125).abs() < 1e-12);
        let f = filter_small_components(&m, Connectivity::TwentySix, CC_MIN_VOLUME_MM3);
        assert_eq!(f.count(), 0);
    }

    #[test]
    fn exact_threshold_is_kept() {
        // 375 voxels of 8 mm^3 = 3000 mm^3
        let g = geom(25, 15, 1, [2.0, 2.0, 2.0]);
        let m = BinaryMask3D::new(g, vec![true; 375]).unwrap();
        let f = filter_small_components(&m, Connectivity::TwentySix, CC_MIN_VOLUME_MM3);
        assert_eq!(f, m);
        let mut data = vec![true; 375];
        data[0] = false;
        data[1] = false; // 373 voxels, still one component
        let m = BinaryMask3D::new(g, data).unwrap();
        assert_eq!(
            filter_small_components(&m, Connectivity::TwentySix, CC_MIN_VOLUME_MM3).count(),
            0
        );
    }

    #[test]
    fn filter_properties_on_random_masks() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let g = geom(8, 8, 4, [4.0, 4.0, 6.0]);
        for _ in 0..50 {
            let data: Vec<bool> = (0..g.len()).map(|_| rng.gen_bool(0.3)).collect();
            let m = BinaryMask3D::new(g, data).unwrap();
            let cc = connected_components_3d(&m, Connectivity::TwentySix);
            assert_eq!(cc.counts.iter().sum::<usize>(), m.count());
            let f = filter_small_components(&m, Connectivity::TwentySix, CC_MIN_VOLUME_MM3);
            assert!(f.is_subset_of(&m));
            assert_eq!(
                filter_small_components(&f, Connectivity::TwentySix, CC_MIN_VOLUME_MM3),
                f
            );
        }
    }

    #[test]
    fn roi_examples() {
        let g = geom(16, 16, 4, [1.0; 3]);
        let full = BinaryMask3D::new(g, vec![true; g.len()]).unwrap();
        let roi = compute_roi(&full, 4, 8).unwrap();
        assert_eq!((roi.min, roi.max), ([0, 0, 0], [15, 15, 3]));

        let one = mask_from(g, &[(5, 5, 2)]);
        let roi = compute_roi(&one, 2, 1).unwrap();
        assert_eq!((roi.min, roi.max), ([3, 3, 2], [7, 7, 2]));
        let padded = compute_roi(&one, 2, 8).unwrap();
        assert_eq!(padded.size()[..2], [8, 8]);
        assert!(padded.min[0] <= 3 && padded.max[0] >= 7);

        let empty = mask_from(g, &[]);
        assert!(matches!(compute_roi(&empty, 4, 8), Err(Error::NoIcv)));
    }

    #[test]
    fn crop_then_embed_restores_alignment() {
        let g = geom(10, 9, 3, [0.7, 0.7, 1.25]);
        let data: Vec<u8> = (0..g.len()).map(|i| (i % 8) as u8).collect();
        let v = LabelVolume::new(g, data).unwrap();
        let roi = RoiBox {
            min: [2, 1, 1],
            max: [7, 6, 2],
            margin: 0,
        };
        let c = crop_to_roi(&v, &roi).unwrap();
        assert_eq!(c.geometry().spacing, g.spacing);
        let back = embed_roi(&c, &roi, g, 0).unwrap();
        for z in 0..3 {
            for y in 0..9 {
                for x in 0..10 {
                    let inside = (2..=7).contains(&x) && (1..=6).contains(&y) && (1..=2).contains(&z);
                    let expected = if inside { v.get(x, y, z) } else { 0 };
                    assert_eq!(back.get(x, y, z), expected);
                }
            }
        }
        assert_eq!(RoiBox::from_text(&roi.to_text()).unwrap().max, roi.max);
    }
}
