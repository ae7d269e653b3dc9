//! Synthetic fetal-like phantoms with seven-class ground truth.
//!
//! Each case is a stack of axial-like slices through a nested-ellipse brain:
//! an eCSF rim, a wavy cGM ribbon, WM interior, two vCSF blobs, a central BGT
//! blob, an inferior BS stalk and a pair of inferior-posterior CB lobes. The brain is
//! enclosed by a dark skull ring and a textured "maternal body" so the ICV
//! stage has something non-trivial to separate. Intensity means follow T2
//! ordering (CSF bright, WM mid, GM dark).

use std::f64::consts::TAU;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::augment::{make_multiplier_field, Range, REFERENCE_SIZE};
use crate::error::{Error, Result};
use crate::postprocess::CC_MIN_VOLUME_MM3;
use crate::rng::{substream, tag};
use crate::tissue::{TissueClass, NUM_CLASSES};
use crate::volume::{Geometry, IntensityVolume, LabelVolume, Volume};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassIntensity {
    pub mean: f64,
    pub std: f64,
}

/// Shading injected into test slices to emulate acquisition artifacts.
///
/// The multiplier is `1 - a + a·q/max(q)` with `q` the same quadratic pattern
/// as IIA, but with offsets drawn from ranges disjoint from the training ones.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TestArtifactConfig {
    /// Fraction of slices per test volume that receive an artifact.
    pub slice_fraction: f64,
    /// Shading depth `a` in `[0, 1]`; 0 leaves intensities unchanged.
    pub amplitude: f64,
    /// Reference-grid pixels.
    pub x0_range: Range,
    /// Reference-grid pixels.
    pub y0_range: Range,
    pub theta_range: Range,
}

impl Default for TestArtifactConfig {
    fn default() -> Self {
        Self {
            slice_fraction: 0.5,
            amplitude: 0.7,
            x0_range: Range::new(200.0, 320.0),
            y0_range: Range::new(180.0, 300.0),
            theta_range: Range::new(0.0, 360.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub seed: u64,
    pub image_size: usize,
    pub slices_per_volume: usize,
    pub n_volumes: usize,
    /// mm per voxel.
    pub spacing: [f64; 3],
    /// Indexed by tissue code; entry 0 describes the maternal body.
    pub class_intensity: [ClassIntensity; NUM_CLASSES],
    pub skull_intensity: f64,
    /// Maximum in-plane rotation per volume, degrees.
    pub pose_jitter_deg: f64,
    /// Maximum translation per volume as a fraction of the image width.
    pub pose_jitter_shift: f64,
    pub background_texture_amplitude: f64,
    /// Image size must be divisible by `2^net_depth`.
    pub net_depth: usize,
    pub artifact: TestArtifactConfig,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        let ci = |mean, std| ClassIntensity { mean, std };
        Self {
            seed: 0,
            image_size: 64,
            slices_per_volume: 8,
            n_volumes: 12,
            spacing: [1.4, 1.4, 3.0],
            class_intensity: [
                ci(450.0, 30.0),  // body
                ci(480.0, 30.0),  // CB
                ci(420.0, 30.0),  // BGT
                ci(950.0, 30.0),  // vCSF
                ci(620.0, 30.0),  // WM
                ci(550.0, 30.0),  // BS
                ci(330.0, 30.0),  // cGM
                ci(1000.0, 30.0), // eCSF
            ],
            skull_intensity: 120.0,
            pose_jitter_deg: 15.0,
            pose_jitter_shift: 0.05,
            background_texture_amplitude: 150.0,
            net_depth: 3,
            artifact: TestArtifactConfig::default(),
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let div = 1usize << self.net_depth;
        if self.image_size == 0 || !self.image_size.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "image_size {} not divisible by 2^{}",
                self.image_size, self.net_depth
            )));
        }
        if self.image_size < 32 {
            return Err(Error::Config("image_size must be at least 32".into()));
        }
        if self.slices_per_volume == 0 || self.n_volumes == 0 {
            return Err(Error::Config("need at least one volume and one slice".into()));
        }
        if self.class_intensity.iter().any(|c| !(c.std >= 0.0)) {
            return Err(Error::Config("intensity std must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.artifact.slice_fraction) || !(0.0..=1.0).contains(&self.artifact.amplitude) {
            return Err(Error::Config("artifact fraction/amplitude outside [0, 1]".into()));
        }
        Geometry::new(self.image_size, self.image_size, self.slices_per_volume, self.spacing)?;
        Ok(())
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            width: self.image_size,
            height: self.image_size,
            depth: self.slices_per_volume,
            spacing: self.spacing,
        }
    }
}

/// Multiplier parameters injected into one test slice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArtifactDraw {
    pub x0_ref: f64,
    pub y0_ref: f64,
    pub theta: f64,
    pub amplitude: f64,
}

impl ArtifactDraw {
    /// Multiplicative shading field for a `width` x `height` slice.
    pub fn field(&self, width: usize, height: usize) -> Vec<f64> {
        let q = make_multiplier_field(
            width,
            height,
            self.x0_ref * width as f64 / REFERENCE_SIZE,
            self.y0_ref * height as f64 / REFERENCE_SIZE,
            self.theta,
        );
        let max = q.max();
        q.values
            .iter()
            .map(|&v| {
                let rel = if max > 0.0 { v / max } else { 1.0 };
                1.0 - self.amplitude + self.amplitude * rel
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomCase {
    pub id: String,
    pub intensity: IntensityVolume,
    pub truth: LabelVolume,
    /// One flag per slice.
    pub has_injected_artifact: Vec<bool>,
    /// Parameters of each injected artifact, aligned with the flags.
    pub artifact_draws: Vec<Option<ArtifactDraw>>,
}

impl PhantomCase {
    pub fn icv_voxels(&self) -> usize {
        self.truth.data().iter().filter(|&&c| c != 0).count()
    }
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:03}")
}

struct Pose {
    cx: f64,
    cy: f64,
    sin: f64,
    cos: f64,
    /// pixels per nominal unit (a 64-pixel image has unit 1)
    scale: f64,
    cortex_phase: f64,
    vent_scale: f64,
    tex_phase: [f64; 4],
}

fn inside(u: f64, v: f64, cu: f64, cv: f64, a: f64, b: f64) -> bool {
    let du = (u - cu) / a;
    let dv = (v - cv) / b;
    du * du + dv * dv <= 1.0
}

/// Tissue label and skull flag at brain-local coordinates `(u, v)`, slice
/// height parameter `w` in (-1, 1).
fn anatomy(u: f64, v: f64, w: f64, pose: &Pose) -> (TissueClass, bool) {
    let s = (1.0 - 0.45 * w * w).sqrt();
    let (a0, b0) = (20.0 * s, 17.0 * s);
    let r0 = ((u / a0).powi(2) + (v / b0).powi(2)).sqrt();
    if r0 > 1.0 {
        return (TissueClass::Background, r0 <= 1.13);
    }
    if !inside(u, v, 0.0, 0.0, a0 - 2.5, b0 - 2.5) {
        return (TissueClass::Ecsf, false);
    }
    let angle = v.atan2(u);
    let wave = 1.0 + 0.07 * (6.0 * angle + pose.cortex_phase).sin();
    let (a2, b2) = ((a0 - 6.0) * wave, (b0 - 6.0) * wave);
    let mut class = if inside(u, v, 0.0, 0.0, a2, b2) {
        TissueClass::Wm
    } else {
        TissueClass::Cgm
    };
    let vs = pose.vent_scale;
    if inside(u, v, 0.0, 2.0, 4.5 * s, 3.0 * s) {
        class = TissueClass::Bgt;
    }
    if inside(u, v, -5.5 * s, -3.0 * s, 2.2 * vs, 4.0 * s * vs)
        || inside(u, v, 5.5 * s, -3.0 * s, 2.2 * vs, 4.0 * s * vs)
    {
        class = TissueClass::Vcsf;
    }
    if inside(u, v, 0.0, 8.5 * s, 2.5, 4.0 * s) {
        class = TissueClass::Bs;
    }
    if inside(u, v, -5.0 * s, 11.0 * s, 4.0 * s, 2.6 * s) || inside(u, v, 5.0 * s, 11.0 * s, 4.0 * s, 2.6 * s) {
        class = TissueClass::Cb;
    }
    (class, false)
}

fn body_texture(x: f64, y: f64, pose: &Pose, amplitude: f64) -> f64 {
    let n = 64.0 * pose.scale;
    let p = pose.tex_phase;
    amplitude
        * (0.6 * (TAU * x / (n / 5.0) + p[0]).sin() * (TAU * y / (n / 3.0) + p[1]).sin()
            + 0.4 * (TAU * (x + y) / (n / 7.0) + p[2]).sin()
            + 0.3 * (TAU * (x - 2.0 * y) / (n / 4.0) + p[3]).cos())
}

/// Generate case `index` of the dataset described by `config`.
pub fn generate_case(config: &PhantomConfig, index: usize) -> Result<PhantomCase> {
    config.validate()?;
    let mut rng = substream(config.seed, &[tag::PHANTOM, index as u64]);
    let n = config.image_size as f64;
    let scale = n / 64.0;
    let theta = rng
        .gen_range(-config.pose_jitter_deg..=config.pose_jitter_deg)
        .to_radians();
    let shift = config.pose_jitter_shift * n;
    let pose = Pose {
        cx: (n - 1.0) / 2.0 + rng.gen_range(-shift..=shift),
        cy: (n - 1.0) / 2.0 + rng.gen_range(-shift..=shift),
        sin: theta.sin(),
        cos: theta.cos(),
        scale: scale * rng.gen_range(0.93..1.07),
        cortex_phase: rng.gen_range(0.0..TAU),
        vent_scale: rng.gen_range(0.85..1.15),
        tex_phase: [
            rng.gen_range(0.0..TAU),
            rng.gen_range(0.0..TAU),
            rng.gen_range(0.0..TAU),
            rng.gen_range(0.0..TAU),
        ],
    };

    let geometry = config.geometry();
    let (size, depth) = (config.image_size, config.slices_per_volume);
    let mut labels = Vec::with_capacity(geometry.len());
    let mut intensity = Vec::with_capacity(geometry.len());
    let noise: Vec<Normal<f64>> = config
        .class_intensity
        .iter()
        .map(|c| Normal::new(0.0, c.std).expect("std validated"))
        .collect();
    let body_radius = 0.49 * n;
    for z in 0..depth {
        let w = -0.8 + 1.6 * (z as f64 + 0.5) / depth as f64;
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 - pose.cx, y as f64 - pose.cy);
                let u = (pose.cos * dx + pose.sin * dy) / pose.scale;
                let v = (-pose.sin * dx + pose.cos * dy) / pose.scale;
                let (class, skull) = anatomy(u, v, w, &pose);
                let code = class.code() as usize;
                let mean = if class != TissueClass::Background {
                    config.class_intensity[code].mean
                } else if skull {
                    config.skull_intensity
                } else {
                    let (bx, by) = (x as f64 - (n - 1.0) / 2.0, y as f64 - (n - 1.0) / 2.0);
                    if (bx * bx + by * by).sqrt() > body_radius {
                        0.0
                    } else {
                        config.class_intensity[0].mean
                            + body_texture(x as f64, y as f64, &pose, config.background_texture_amplitude)
                    }
                };
                let value = if mean > 0.0 {
                    (mean + noise[code].sample(&mut rng)).max(0.0)
                } else {
                    0.0
                };
                labels.push(class.code());
                intensity.push(value as f32);
            }
        }
    }

    let case = PhantomCase {
        id: case_id(index),
        intensity: Volume::new(geometry, intensity)?,
        truth: Volume::new(geometry, labels)?,
        has_injected_artifact: vec![false; depth],
        artifact_draws: vec![None; depth],
    };
    let icv_mm3 = case.icv_voxels() as f64 * geometry.voxel_volume();
    if icv_mm3 < CC_MIN_VOLUME_MM3 {
        return Err(Error::Config(format!(
            "phantom ICV of {icv_mm3:.0} mm^3 is below the {CC_MIN_VOLUME_MM3} mm^3 filter threshold; \
             increase spacing or image size"
        )));
    }
    Ok(case)
}

/// Generate every case of the dataset. Cases are independent, so this is
/// parallel and produces the same output as serial generation.
pub fn generate_dataset(config: &PhantomConfig) -> Result<Vec<PhantomCase>> {
    use rayon::prelude::*;
    config.validate()?;
    (0..config.n_volumes)
        .into_par_iter()
        .map(|i| generate_case(config, i))
        .collect()
}

/// Shade `round(fraction·depth)` randomly chosen slices of `case`.
pub fn inject_test_artifact(case: &PhantomCase, config: &TestArtifactConfig, rng: &mut impl Rng) -> PhantomCase {
    let g = *case.intensity.geometry();
    let count = ((config.slice_fraction * g.depth as f64).round() as usize).min(g.depth);
    let mut out = case.clone();
    let mut chosen: Vec<usize> = sample(rng, g.depth, count).into_vec();
    chosen.sort_unstable();
    let mut data = out.intensity.clone().into_data();
    for z in chosen {
        let draw = ArtifactDraw {
            x0_ref: config.x0_range.sample(rng),
            y0_ref: config.y0_range.sample(rng),
            theta: config.theta_range.sample(rng),
            amplitude: config.amplitude,
        };
        let field = draw.field(g.width, g.height);
        let n = g.slice_len();
        for (v, m) in data[z * n..(z + 1) * n].iter_mut().zip(&field) {
            *v = (*v as f64 * m) as f32;
        }
        out.has_injected_artifact[z] = true;
        out.artifact_draws[z] = Some(draw);
    }
    out.intensity = Volume::new(g, data).expect("geometry unchanged");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::postprocess::{connected_components_3d, BinaryMask3D, Connectivity};
    use std::collections::BTreeSet;

    fn small() -> PhantomConfig {
        PhantomConfig {
            n_volumes: 3,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = generate_dataset(&small()).unwrap();
        let b = generate_dataset(&small()).unwrap();
        assert_eq!(a, b);
        let serial: Vec<_> = (0..3).map(|i| generate_case(&small(), i).unwrap()).collect();
        assert_eq!(a, serial);
    }

    #[test]
    fn seed_changes_output() {
        let a = generate_case(&small(), 0).unwrap();
        let b = generate_case(&PhantomConfig { seed: 1, ..small() }, 0).unwrap();
        assert_ne!(a.intensity, b.intensity);
    }

    #[test]
    fn all_classes_present_and_icv_connected() {
        for case in generate_dataset(&small()).unwrap() {
            let codes: BTreeSet<u8> = case.truth.data().iter().copied().collect();
            assert_eq!(codes, (0..8).collect());
            let icv = BinaryMask3D::from_labels(&case.truth);
            let cc = connected_components_3d(&icv, Connectivity::TwentySix);
            assert_eq!(cc.counts.len(), 1);
            let mm3 = case.icv_voxels() as f64 * case.truth.geometry().voxel_volume();
            assert!(mm3 > CC_MIN_VOLUME_MM3);
            // maternal body around the brain is non-zero
            let bg_nonzero = case
                .intensity
                .data()
                .iter()
                .zip(case.truth.data())
                .filter(|(v, c)| **c == 0 && **v > 200.0)
                .count();
            assert!(bg_nonzero > 500);
        }
    }

    #[test]
    fn rejects_bad_geometry() {
        let cfg = PhantomConfig {
            image_size: 60,
            ..PhantomConfig::default()
        };
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn zero_amplitude_artifact_is_identity() {
        let case = generate_case(&small(), 1).unwrap();
        let cfg = TestArtifactConfig {
            amplitude: 0.0,
            ..TestArtifactConfig::default()
        };
        let out = inject_test_artifact(&case, &cfg, &mut substream(0, &[1]));
        assert_eq!(out.intensity, case.intensity);
        assert_eq!(out.truth, case.truth);
        assert_eq!(out.has_injected_artifact.iter().filter(|f| **f).count(), 4);
    }

    #[test]
    fn artifact_ratio_is_the_field() {
        let case = generate_case(&small(), 2).unwrap();
        let out = inject_test_artifact(&case, &TestArtifactConfig::default(), &mut substream(3, &[1]));
        assert_eq!(out.truth, case.truth);
        let g = *case.intensity.geometry();
        for z in 0..g.depth {
            let before = case.intensity.slice_data(z).unwrap();
            let after = out.intensity.slice_data(z).unwrap();
            match out.artifact_draws[z] {
                None => {
                    assert!(!out.has_injected_artifact[z]);
                    assert_eq!(before, after);
                }
                Some(d) => {
                    assert!(out.has_injected_artifact[z]);
                    // independent evaluation of 1 - a + a q / max q
                    let (cx, cy) = ((g.width as f64 - 1.0) / 2.0, (g.height as f64 - 1.0) / 2.0);
                    let (sn, cs) = d.theta.to_radians().sin_cos();
                    let (x0, y0) = (d.x0_ref * g.width as f64 / 512.0, d.y0_ref * g.height as f64 / 512.0);
                    let q: Vec<f64> = (0..g.slice_len())
                        .map(|i| {
                            let (x, y) = ((i % g.width) as f64 - cx, (i / g.width) as f64 - cy);
                            let xr = cx + cs * x - sn * y + x0;
                            let yr = cy + sn * x + cs * y + y0;
                            xr * xr + yr * yr
                        })
                        .collect();
                    let qmax = q.iter().cloned().fold(0.0, f64::max);
                    for i in 0..g.slice_len() {
                        if before[i] > 1.0 {
                            let ratio = after[i] as f64 / before[i] as f64;
                            let expected = 1.0 - d.amplitude + d.amplitude * q[i] / qmax;
                            assert!((ratio - expected).abs() < 1e-5 * expected.max(1.0));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn artifact_ranges_disjoint_from_training() {
        let train = crate::augment::IiaParams::default();
        let test = TestArtifactConfig::default();
        assert!(!train.x0_range.overlaps(&test.x0_range));
        assert!(!train.y0_range.overlaps(&test.y0_range));
    }
}
