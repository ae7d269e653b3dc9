//! Experiment configuration read from a flat `key = value` file.
//!
//! Blank lines and text after `#` are ignored. Ranges and lists are
//! comma-separated. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::Range;
use crate::error::{Error, Result};
use crate::nnet::UNetConfig;
use crate::phantom::PhantomConfig;
use crate::postprocess::{Connectivity, CC_MIN_VOLUME_MM3, DEFAULT_ROI_MARGIN};
use crate::tissue::{TissueClass, NUM_CLASSES};

pub const DEFAULT_SWEEP: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub phantom: PhantomConfig,
    pub train_fraction: f64,
    pub test_fraction: f64,
    pub icv_net: UNetConfig,
    pub tissue_net: UNetConfig,
    pub icv_epochs: usize,
    pub tissue_epochs: usize,
    pub icv_batch_size: usize,
    pub tissue_batch_size: usize,
    pub learning_rate: f64,
    /// IIA proportion used by the `flip+rot+IIA` arm and the ICV network.
    pub iia_proportion: f64,
    pub sweep_proportions: Vec<f64>,
    pub roi_margin: usize,
    pub connectivity: Connectivity,
    pub cc_min_volume_mm3: f64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 2019,
            phantom: PhantomConfig {
                seed: 2019,
                ..PhantomConfig::default()
            },
            train_fraction: 0.5,
            test_fraction: 0.5,
            icv_net: UNetConfig::with_classes(2),
            tissue_net: UNetConfig::with_classes(NUM_CLASSES),
            icv_epochs: 30,
            tissue_epochs: 100,
            icv_batch_size: 12,
            tissue_batch_size: 18,
            learning_rate: 1e-3,
            iia_proportion: 0.6,
            sweep_proportions: DEFAULT_SWEEP.to_vec(),
            roi_margin: DEFAULT_ROI_MARGIN,
            connectivity: Connectivity::default(),
            cc_min_volume_mm3: CC_MIN_VOLUME_MM3,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_range(key: &str, value: &str) -> Result<Range> {
    match parse_list(key, value)?.as_slice() {
        &[lo, hi] if lo <= hi => Ok(Range::new(lo, hi)),
        _ => Err(Error::Config(format!("`{key}` needs `lo, hi` with lo <= hi"))),
    }
}

fn class_by_name(name: &str) -> Option<TissueClass> {
    TissueClass::ALL
        .into_iter()
        .find(|c| c.name().eq_ignore_ascii_case(name))
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Sets one key. `seed` also reseeds the phantom generator.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let p = &mut self.phantom;
        match key {
            "seed" => {
                self.seed = parse(key, value)?;
                p.seed = self.seed;
            }
            "image_size" => p.image_size = parse(key, value)?,
            "slices_per_volume" => p.slices_per_volume = parse(key, value)?,
            "n_volumes" => p.n_volumes = parse(key, value)?,
            "spacing" => match parse_list(key, value)?.as_slice() {
                &[x, y, z] => p.spacing = [x, y, z],
                _ => return Err(Error::Config("`spacing` needs three values".into())),
            },
            "skull_intensity" => p.skull_intensity = parse(key, value)?,
            "pose_jitter_deg" => p.pose_jitter_deg = parse(key, value)?,
            "pose_jitter_shift" => p.pose_jitter_shift = parse(key, value)?,
            "background_texture_amplitude" => p.background_texture_amplitude = parse(key, value)?,
            "artifact_amplitude" => p.artifact.amplitude = parse(key, value)?,
            "artifact_slice_fraction" => p.artifact.slice_fraction = parse(key, value)?,
            "artifact_x0_range" => p.artifact.x0_range = parse_range(key, value)?,
            "artifact_y0_range" => p.artifact.y0_range = parse_range(key, value)?,
            "artifact_theta_range" => p.artifact.theta_range = parse_range(key, value)?,
            "train_fraction" => self.train_fraction = parse(key, value)?,
            "test_fraction" => self.test_fraction = parse(key, value)?,
            "icv_depth" => self.icv_net.depth = parse(key, value)?,
            "icv_base_channels" => self.icv_net.base_channels = parse(key, value)?,
            "tissue_depth" => self.tissue_net.depth = parse(key, value)?,
            "tissue_base_channels" => self.tissue_net.base_channels = parse(key, value)?,
            "icv_epochs" => self.icv_epochs = parse(key, value)?,
            "tissue_epochs" => self.tissue_epochs = parse(key, value)?,
            "icv_batch_size" => self.icv_batch_size = parse(key, value)?,
            "tissue_batch_size" => self.tissue_batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "iia_proportion" => self.iia_proportion = parse(key, value)?,
            "sweep_proportions" => self.sweep_proportions = parse_list(key, value)?,
            "roi_margin" => self.roi_margin = parse(key, value)?,
            "connectivity" => self.connectivity = value.parse()?,
            "cc_min_volume_mm3" => self.cc_min_volume_mm3 = parse(key, value)?,
            "out" => self.out_dir = PathBuf::from(value),
            _ => {
                let class = key
                    .strip_prefix("intensity_")
                    .and_then(class_by_name)
                    .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
                match parse_list(key, value)?.as_slice() {
                    &[mean, std] => {
                        p.class_intensity[class.code() as usize].mean = mean;
                        p.class_intensity[class.code() as usize].std = std;
                    }
                    _ => return Err(Error::Config(format!("`{key}` needs `mean, std`"))),
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.test_fraction > 0.0)
            || (self.train_fraction + self.test_fraction - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "train_fraction {} and test_fraction {} must be positive and sum to 1",
                self.train_fraction, self.test_fraction
            )));
        }
        self.icv_net.validate()?;
        self.tissue_net.validate()?;
        if self.icv_net.out_classes != 2 || self.tissue_net.out_classes != NUM_CLASSES {
            return Err(Error::Config("ICV net needs 2 classes, tissue net 8".into()));
        }
        let mut phantom = self.phantom.clone();
        phantom.net_depth = self.icv_net.depth.max(self.tissue_net.depth);
        phantom.validate()?;
        let (n_train, n_test) = self.split_sizes();
        if n_train == 0 || n_test == 0 {
            return Err(Error::Config(format!(
                "{} volumes cannot be split into non-empty train and test sets",
                self.phantom.n_volumes
            )));
        }
        if self.icv_batch_size == 0 || self.tissue_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        for &p in self.sweep_proportions.iter().chain([&self.iia_proportion]) {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("proportion {p} outside [0, 1]")));
            }
        }
        if self.sweep_proportions.is_empty() {
            return Err(Error::Config("sweep_proportions is empty".into()));
        }
        if !(self.cc_min_volume_mm3 >= 0.0) {
            return Err(Error::Config("cc_min_volume_mm3 must be non-negative".into()));
        }
        Ok(())
    }

    /// Number of training and test volumes.
    pub fn split_sizes(&self) -> (usize, usize) {
        let n = self.phantom.n_volumes;
        let n_train = ((self.train_fraction * n as f64).round() as usize).min(n);
        (n_train, n - n_train)
    }

    /// Canonical text form; parsing it gives back the same config.
    pub fn to_text(&self) -> String {
        let p = &self.phantom;
        let a = &p.artifact;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
        kv("seed", self.seed.to_string());
        kv("image_size", p.image_size.to_string());
        kv("slices_per_volume", p.slices_per_volume.to_string());
        kv("n_volumes", p.n_volumes.to_string());
        kv("spacing", join(&p.spacing));
        for class in TissueClass::ALL {
            let ci = p.class_intensity[class.code() as usize];
            kv(&format!("intensity_{}", class.name()), join(&[ci.mean, ci.std]));
        }
        kv("skull_intensity", p.skull_intensity.to_string());
        kv("pose_jitter_deg", p.pose_jitter_deg.to_string());
        kv("pose_jitter_shift", p.pose_jitter_shift.to_string());
        kv(
            "background_texture_amplitude",
            p.background_texture_amplitude.to_string(),
        );
        kv("artifact_amplitude", a.amplitude.to_string());
        kv("artifact_slice_fraction", a.slice_fraction.to_string());
        kv("artifact_x0_range", join(&[a.x0_range.lo, a.x0_range.hi]));
        kv("artifact_y0_range", join(&[a.y0_range.lo, a.y0_range.hi]));
        kv("artifact_theta_range", join(&[a.theta_range.lo, a.theta_range.hi]));
        kv("train_fraction", self.train_fraction.to_string());
        kv("test_fraction", self.test_fraction.to_string());
        kv("icv_depth", self.icv_net.depth.to_string());
        kv("icv_base_channels", self.icv_net.base_channels.to_string());
        kv("tissue_depth", self.tissue_net.depth.to_string());
        kv("tissue_base_channels", self.tissue_net.base_channels.to_string());
        kv("icv_epochs", self.icv_epochs.to_string());
        kv("tissue_epochs", self.tissue_epochs.to_string());
        kv("icv_batch_size", self.icv_batch_size.to_string());
        kv("tissue_batch_size", self.tissue_batch_size.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("iia_proportion", self.iia_proportion.to_string());
        kv("sweep_proportions", join(&self.sweep_proportions));
        kv("roi_margin", self.roi_margin.to_string());
        kv("connectivity", self.connectivity.to_string());
        kv("cc_min_volume_mm3", self.cc_min_volume_mm3.to_string());
        kv("out", self.out_dir.display().to_string());
        s
    }
}
