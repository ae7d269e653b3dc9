//! Two-stage pipeline and the experiments built on it.
//!
//! Stage one labels every full slice as ICV or not; the mask is cleaned by
//! connected-component filtering and cropped to an ROI. Stage two labels the
//! ROI slices into the eight tissue codes. Everything outside the filtered
//! ICV mask is background.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::augment::{apply_iia_with, compose_batch, AugmentConfig, DrawLog, IiaDraw, IiaParams};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{aggregate, na, score_volume, scores_to_csv, MetricsReport, SliceClassScore, Subset};
use crate::nnet::checkpoint;
use crate::nnet::train::{predict_slices, train_with_progress};
use crate::nnet::{LossKind, TrainConfig, TrainReport, UNet, UNetConfig};
use crate::phantom::{generate_dataset, inject_test_artifact, PhantomCase};
use crate::postprocess::{compute_roi, crop_to_roi, embed_roi, filter_small_components, BinaryMask3D, RoiBox};
use crate::rng::{substream, tag};
use crate::tissue::TissueClass;
use crate::volume::{
    load_intensity, load_labels, normalize_slice, save_volume, write_pgm, IntensityVolume, LabelVolume, Slice2D, Volume,
};

/// Augmentation arms of the ablation, in reporting order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AblationArm {
    None,
    Flip,
    FlipRot,
    FlipRotIia,
}

impl AblationArm {
    pub const ALL: [AblationArm; 4] = [
        AblationArm::None,
        AblationArm::Flip,
        AblationArm::FlipRot,
        AblationArm::FlipRotIia,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationArm::None => "none",
            AblationArm::Flip => "flip",
            AblationArm::FlipRot => "flip+rot",
            AblationArm::FlipRotIia => "flip+rot+IIA",
        }
    }

    /// File-name friendly form.
    pub fn slug(self) -> &'static str {
        match self {
            AblationArm::None => "none",
            AblationArm::Flip => "flip",
            AblationArm::FlipRot => "flip_rot",
            AblationArm::FlipRotIia => "flip_rot_iia",
        }
    }

    pub fn augment(self, iia_proportion: f64) -> AugmentConfig {
        match self {
            AblationArm::None => AugmentConfig::none(),
            AblationArm::Flip => AugmentConfig::flip(),
            AblationArm::FlipRot => AugmentConfig::flip_rotate(),
            AblationArm::FlipRotIia => sweep_augment(iia_proportion),
        }
    }
}

impl fmt::Display for AblationArm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationArm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase().replace(['_', '-'], "+");
        Self::ALL
            .into_iter()
            .find(|a| a.name().to_ascii_lowercase() == t)
            .ok_or_else(|| Error::Config(format!("unknown arm `{s}` (none, flip, flip+rot, flip+rot+IIA)")))
    }
}

/// Flip + rotation with IIA at proportion `p`. At `p = 0` this is exactly the
/// flip + rotation arm.
pub fn sweep_augment(p: f64) -> AugmentConfig {
    if p == 0.0 {
        AugmentConfig::flip_rotate()
    } else {
        AugmentConfig::flip_rotate_iia(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Icv,
    Tissue,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Icv => "icv",
            Stage::Tissue => "tissue",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "icv" => Ok(Stage::Icv),
            "tissue" => Ok(Stage::Tissue),
            _ => Err(Error::Config(format!("unknown stage `{s}` (icv, tissue)"))),
        }
    }
}

/// Phantom cases plus the volume-level split. Test cases carry injected
/// artifacts.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub cases: Vec<PhantomCase>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn train_cases(&self) -> impl Iterator<Item = &PhantomCase> {
        self.train.iter().map(|&i| &self.cases[i])
    }

    pub fn test_cases(&self) -> impl Iterator<Item = &PhantomCase> {
        self.test.iter().map(|&i| &self.cases[i])
    }

    /// `# seed <u64>` then one `id split flags` line per case, where flags
    /// has one `0`/`1` per slice.
    pub fn manifest(&self) -> String {
        let mut s = format!("# seed {}\n", self.seed);
        for (i, case) in self.cases.iter().enumerate() {
            let split = if self.test.contains(&i) { "test" } else { "train" };
            let flags: String = case
                .has_injected_artifact
                .iter()
                .map(|&f| if f { '1' } else { '0' })
                .collect();
            s.push_str(&format!("{} {split} {flags}\n", case.id));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub test: bool,
    pub artifact: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut seed = None;
        let mut entries = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(rest) = line.strip_prefix("# seed") {
                seed = Some(
                    rest.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad manifest seed line `{line}`")))?,
                );
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Config(format!("bad manifest line `{line}`"));
            if parts.len() != 3 {
                return Err(bad());
            }
            let test = match parts[1] {
                "test" => true,
                "train" => false,
                _ => return Err(bad()),
            };
            let artifact = parts[2]
                .chars()
                .map(|c| match c {
                    '0' => Ok(false),
                    '1' => Ok(true),
                    _ => Err(bad()),
                })
                .collect::<Result<_>>()?;
            entries.push(ManifestEntry {
                id: parts[0].to_string(),
                test,
                artifact,
            });
        }
        Ok(Self {
            seed: seed.ok_or_else(|| Error::Config("manifest has no seed line".into()))?,
            entries,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }
}

/// Generates the phantom set, splits it by volume and shades test slices.
pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut phantom = cfg.phantom.clone();
    phantom.seed = cfg.seed;
    phantom.net_depth = cfg.icv_net.depth.max(cfg.tissue_net.depth);
    let mut cases = generate_dataset(&phantom)?;
    let mut order: Vec<usize> = (0..cases.len()).collect();
    order.shuffle(&mut substream(cfg.seed, &[tag::SPLIT]));
    let (n_train, _) = cfg.split_sizes();
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    for &i in &test {
        let mut rng = substream(cfg.seed, &[tag::TEST_ARTIFACT, i as u64]);
        cases[i] = inject_test_artifact(&cases[i], &phantom.artifact, &mut rng);
    }
    Ok(Dataset {
        seed: cfg.seed,
        cases,
        train,
        test,
    })
}

pub fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

pub fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_image.mvol"))
}

pub fn labels_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_labels.mvol"))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `<id>_image.mvol`, `<id>_labels.mvol` and `manifest.txt`.
pub fn cmd_phantom(cfg: &ExperimentConfig) -> Result<Dataset> {
    let ds = build_dataset(cfg)?;
    let dir = data_dir(&cfg.out_dir);
    ensure_dir(&dir)?;
    for case in &ds.cases {
        save_volume(&case.intensity, image_path(&dir, &case.id))?;
        save_volume(&case.truth, labels_path(&dir, &case.id))?;
    }
    write(&dir.join("manifest.txt"), &ds.manifest())?;
    Ok(ds)
}

/// Reads a dataset written by [`cmd_phantom`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = Manifest::load(dir.join("manifest.txt"))?;
    let mut ds = Dataset {
        seed: manifest.seed,
        cases: Vec::new(),
        train: Vec::new(),
        test: Vec::new(),
    };
    for (i, e) in manifest.entries.iter().enumerate() {
        let intensity = load_intensity(image_path(dir, &e.id))?;
        let truth = load_labels(labels_path(dir, &e.id))?;
        if intensity.geometry() != truth.geometry() || e.artifact.len() != truth.geometry().depth {
            return Err(Error::Geometry(format!(
                "case {} does not match its manifest entry",
                e.id
            )));
        }
        ds.cases.push(PhantomCase {
            id: e.id.clone(),
            intensity,
            truth,
            has_injected_artifact: e.artifact.clone(),
            artifact_draws: vec![None; e.artifact.len()],
        });
        if e.test {
            ds.test.push(i);
        } else {
            ds.train.push(i);
        }
    }
    Ok(ds)
}

type Pair = (Slice2D<f32>, Slice2D<u8>);

/// Full slices with binary ICV labels.
pub fn icv_pairs<'a>(cases: impl Iterator<Item = &'a PhantomCase>) -> Result<Vec<Pair>> {
    let mut out = Vec::new();
    for case in cases {
        for z in 0..case.truth.geometry().depth {
            let img = case.intensity.get_slice(z)?;
            let lbl = case.truth.get_slice(z)?;
            let bin = lbl.data.iter().map(|&c| u8::from(c != 0)).collect();
            out.push((img, lbl.with_data(bin)));
        }
    }
    Ok(out)
}

/// Slices cropped to the reference ICV ROI with tissue labels.
pub fn tissue_pairs<'a>(
    cases: impl Iterator<Item = &'a PhantomCase>,
    margin: usize,
    multiple: usize,
) -> Result<Vec<Pair>> {
    let mut out = Vec::new();
    for case in cases {
        let roi = compute_roi(&BinaryMask3D::from_labels(&case.truth), margin, multiple)?;
        let img = crop_to_roi(&case.intensity, &roi)?;
        let lbl = crop_to_roi(&case.truth, &roi)?;
        for z in 0..img.geometry().depth {
            out.push((img.get_slice(z)?, lbl.get_slice(z)?));
        }
    }
    Ok(out)
}

fn stage_net(cfg: &ExperimentConfig, stage: Stage) -> UNetConfig {
    match stage {
        Stage::Icv => cfg.icv_net,
        Stage::Tissue => cfg.tissue_net,
    }
}

fn stage_seed(seed: u64, stage: Stage) -> u64 {
    match stage {
        Stage::Icv => seed,
        Stage::Tissue => seed ^ 0x7155_0E00,
    }
}

pub fn train_config(cfg: &ExperimentConfig, stage: Stage, augment: AugmentConfig) -> TrainConfig {
    let (loss, batch_size, epochs) = match stage {
        Stage::Icv => (LossKind::CrossEntropy, cfg.icv_batch_size, cfg.icv_epochs),
        Stage::Tissue => (LossKind::SoftDice, cfg.tissue_batch_size, cfg.tissue_epochs),
    };
    TrainConfig {
        loss,
        batch_size,
        epochs,
        lr: cfg.learning_rate,
        augment,
        seed: stage_seed(cfg.seed, stage),
    }
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub net: UNet<f32>,
    pub report: TrainReport,
}

/// Trains one stage on the training split. Batch sizes larger than the
/// training set are clamped to it.
pub fn train_stage(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    stage: Stage,
    augment: AugmentConfig,
    progress: impl FnMut(usize, f64),
) -> Result<TrainedModel> {
    let net_cfg = stage_net(cfg, stage);
    let pairs = match stage {
        Stage::Icv => icv_pairs(ds.train_cases())?,
        Stage::Tissue => tissue_pairs(ds.train_cases(), cfg.roi_margin, net_cfg.multiple())?,
    };
    let mut tc = train_config(cfg, stage, augment);
    tc.batch_size = tc.batch_size.min(pairs.len());
    let mut net = UNet::new(net_cfg, stage_seed(cfg.seed, stage))?;
    let report = train_with_progress(&mut net, &pairs, &tc, progress)?;
    Ok(TrainedModel { net, report })
}

/// First-stage output for one volume.
#[derive(Clone, Debug, PartialEq)]
pub struct IcvResult {
    /// Mask after connected-component filtering.
    pub mask: BinaryMask3D,
    pub roi: RoiBox,
}

pub fn segment_icv(
    net: &UNet<f32>,
    volume: &IntensityVolume,
    cfg: &ExperimentConfig,
    tissue_multiple: usize,
) -> Result<IcvResult> {
    let g = *volume.geometry();
    let slices: Vec<_> = volume.slices().collect();
    let pred = predict_slices(net, &slices)?;
    // a slice without contrast carries no anatomy
    let data: Vec<bool> = pred
        .iter()
        .zip(&slices)
        .flat_map(|(p, s)| {
            let flat = s.data.iter().all(|&v| v == s.data[0]);
            p.data.iter().map(move |&v| v != 0 && !flat)
        })
        .collect();
    let raw = BinaryMask3D::new(g, data)?;
    let mask = filter_small_components(&raw, cfg.connectivity, cfg.cc_min_volume_mm3);
    let roi = compute_roi(&mask, cfg.roi_margin, tissue_multiple)?;
    Ok(IcvResult { mask, roi })
}

/// Second stage inside a given ICV result.
pub fn segment_tissue(net: &UNet<f32>, volume: &IntensityVolume, icv: &IcvResult) -> Result<LabelVolume> {
    let g = *volume.geometry();
    let crop = crop_to_roi(volume, &icv.roi)?;
    let slices: Vec<_> = crop.slices().collect();
    let pred = predict_slices(net, &slices)?;
    let labels = LabelVolume::from_slices(g.spacing[2], &pred)?;
    let full = embed_roi(&labels, &icv.roi, g, 0u8)?;
    let masked = full
        .data()
        .iter()
        .zip(&icv.mask.data)
        .map(|(&l, &m)| if m { l } else { 0 })
        .collect();
    Volume::new(g, masked)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub labels: LabelVolume,
    pub icv: IcvResult,
}

/// Full pipeline on one volume.
pub fn segment_volume(
    icv_net: &UNet<f32>,
    tissue_net: &UNet<f32>,
    volume: &IntensityVolume,
    cfg: &ExperimentConfig,
) -> Result<Segmentation> {
    let icv = segment_icv(icv_net, volume, cfg, tissue_net.config().multiple())?;
    let labels = segment_tissue(tissue_net, volume, &icv)?;
    Ok(Segmentation { labels, icv })
}

/// Per-slice scores of `pred` against every test case.
pub fn score_test_set(ds: &Dataset, preds: &[LabelVolume]) -> Result<Vec<SliceClassScore>> {
    let mut scores = Vec::new();
    for (case, pred) in ds.test_cases().zip(preds) {
        scores.extend(score_volume(&case.id, &case.truth, pred, &case.has_injected_artifact)?);
    }
    Ok(scores)
}

/// Shared state for experiments: the dataset, one ICV network and its
/// per-test-volume output, and every tissue network trained so far keyed by
/// augmentation config.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub dataset: Dataset,
    icv: OnceLock<(TrainedModel, Vec<IcvResult>)>,
    tissue: Mutex<HashMap<String, Arc<OnceLock<Arc<ArmResult>>>>>,
}

/// A trained tissue network and its test-set evaluation.
#[derive(Clone, Debug)]
pub struct ArmResult {
    pub augment: AugmentConfig,
    pub model: TrainedModel,
    pub scores: Vec<SliceClassScore>,
    pub report: MetricsReport,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        let dataset = build_dataset(&cfg)?;
        Ok(Self::with_dataset(cfg, dataset))
    }

    pub fn with_dataset(cfg: ExperimentConfig, dataset: Dataset) -> Self {
        Self {
            cfg,
            dataset,
            icv: OnceLock::new(),
            tissue: Mutex::new(HashMap::new()),
        }
    }

    /// ICV network (trained with flip + rotation + IIA at the configured
    /// proportion) and its output on every test volume.
    pub fn icv(&self) -> Result<&(TrainedModel, Vec<IcvResult>)> {
        if let Some(v) = self.icv.get() {
            return Ok(v);
        }
        let model = train_stage(
            &self.cfg,
            &self.dataset,
            Stage::Icv,
            sweep_augment(self.cfg.iia_proportion),
            |_, _| {},
        )?;
        let multiple = self.cfg.tissue_net.multiple();
        let results = self
            .dataset
            .test_cases()
            .map(|c| segment_icv(&model.net, &c.intensity, &self.cfg, multiple))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.icv.get_or_init(|| (model, results)))
    }

    /// Trains (once) and evaluates a tissue network for `augment`.
    pub fn arm(&self, augment: &AugmentConfig) -> Result<Arc<ArmResult>> {
        let key = format!("{augment:?}");
        let cell = {
            let mut map = self.tissue.lock().expect("cache lock");
            map.entry(key).or_default().clone()
        };
        if let Some(r) = cell.get() {
            return Ok(r.clone());
        }
        let (_, icv) = self.icv()?;
        let model = train_stage(&self.cfg, &self.dataset, Stage::Tissue, augment.clone(), |_, _| {})?;
        let preds = self
            .dataset
            .test_cases()
            .zip(icv)
            .map(|(c, r)| segment_tissue(&model.net, &c.intensity, r))
            .collect::<Result<Vec<_>>>()?;
        let scores = score_test_set(&self.dataset, &preds)?;
        let report = aggregate(&scores);
        let result = Arc::new(ArmResult {
            augment: augment.clone(),
            model,
            scores,
            report,
        });
        Ok(cell.get_or_init(|| result).clone())
    }

    /// Runs every config on a pool of `jobs` threads; results keep input order.
    pub fn arms(&self, augments: &[AugmentConfig], jobs: usize) -> Result<Vec<Arc<ArmResult>>> {
        self.icv()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?;
        pool.install(|| augments.par_iter().map(|a| self.arm(a)).collect())
    }

    pub fn ablation(&self, jobs: usize) -> Result<Vec<(AblationArm, Arc<ArmResult>)>> {
        let augments: Vec<_> = AblationArm::ALL
            .iter()
            .map(|a| a.augment(self.cfg.iia_proportion))
            .collect();
        let results = self.arms(&augments, jobs)?;
        Ok(AblationArm::ALL.into_iter().zip(results).collect())
    }

    pub fn sweep(&self, proportions: &[f64], jobs: usize) -> Result<Vec<(f64, Arc<ArmResult>)>> {
        for &p in proportions {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("proportion {p} outside [0, 1]")));
            }
        }
        let augments: Vec<_> = proportions.iter().map(|&p| sweep_augment(p)).collect();
        let results = self.arms(&augments, jobs)?;
        Ok(proportions.iter().copied().zip(results).collect())
    }
}

const COMPARISON_HEADER: &str =
    "dc_all,msd_all,dc_with_artifact,msd_with_artifact,dc_without_artifact,msd_without_artifact";

fn comparison_cells(report: &MetricsReport, class: Option<TissueClass>) -> String {
    Subset::ALL
        .iter()
        .map(|&s| {
            let m = match class {
                Some(c) => report.class(c, s),
                None => report.grand(s),
            };
            format!("{},{}", na(m.dc), na(m.msd))
        })
        .collect::<Vec<_>>()
        .join(",")
}

/// One row per (arm, foreground class).
pub fn ablation_csv(results: &[(AblationArm, Arc<ArmResult>)]) -> String {
    let mut s = format!("arm,class,{COMPARISON_HEADER}\n");
    for (arm, r) in results {
        for class in TissueClass::FOREGROUND {
            s.push_str(&format!("{arm},{class},{}\n", comparison_cells(&r.report, Some(class))));
        }
    }
    s
}

/// Mean over classes, one row per arm.
pub fn ablation_summary_csv(results: &[(AblationArm, Arc<ArmResult>)]) -> String {
    let mut s = format!("arm,{COMPARISON_HEADER}\n");
    for (arm, r) in results {
        s.push_str(&format!("{arm},{}\n", comparison_cells(&r.report, None)));
    }
    s
}

/// One row per (proportion, foreground class).
pub fn sweep_csv(results: &[(f64, Arc<ArmResult>)]) -> String {
    let mut s = format!("proportion,class,{COMPARISON_HEADER}\n");
    for (p, r) in results {
        for class in TissueClass::FOREGROUND {
            s.push_str(&format!("{p},{class},{}\n", comparison_cells(&r.report, Some(class))));
        }
    }
    s
}

pub fn sweep_summary_csv(results: &[(f64, Arc<ArmResult>)]) -> String {
    let mut s = format!("proportion,{COMPARISON_HEADER}\n");
    for (p, r) in results {
        s.push_str(&format!("{p},{}\n", comparison_cells(&r.report, None)));
    }
    s
}

/// Trains and evaluates the four arms; writes `ablation.csv` and
/// `ablation_summary.csv` under `<out>/ablation`.
pub fn cmd_ablation(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<(AblationArm, Arc<ArmResult>)>> {
    let exp = Experiment::new(cfg.clone())?;
    let results = exp.ablation(jobs)?;
    write_ablation(&cfg.out_dir.join("ablation"), &results)?;
    Ok(results)
}

pub fn write_ablation(dir: &Path, results: &[(AblationArm, Arc<ArmResult>)]) -> Result<()> {
    ensure_dir(dir)?;
    write(&dir.join("ablation.csv"), &ablation_csv(results))?;
    write(&dir.join("ablation_summary.csv"), &ablation_summary_csv(results))?;
    for (arm, r) in results {
        write(
            &dir.join(format!("loss_{}.csv", arm.slug())),
            &checkpoint::loss_history_csv(&r.model.report.history),
        )?;
    }
    Ok(())
}

pub fn cmd_sweep(cfg: &ExperimentConfig, proportions: &[f64], jobs: usize) -> Result<Vec<(f64, Arc<ArmResult>)>> {
    let exp = Experiment::new(cfg.clone())?;
    let results = exp.sweep(proportions, jobs)?;
    write_sweep(&cfg.out_dir.join("sweep"), &results)?;
    Ok(results)
}

pub fn write_sweep(dir: &Path, results: &[(f64, Arc<ArmResult>)]) -> Result<()> {
    ensure_dir(dir)?;
    write(&dir.join("sweep.csv"), &sweep_csv(results))?;
    write(&dir.join("sweep_summary.csv"), &sweep_summary_csv(results))
}

pub fn models_dir(out: &Path) -> PathBuf {
    out.join("models")
}

pub fn checkpoint_path(out: &Path, stage: Stage, arm: AblationArm) -> PathBuf {
    models_dir(out).join(format!("{}_{}.unet", stage.name(), arm.slug()))
}

/// Trains one stage from the dataset in `<out>/data` (generated first if
/// missing) and writes the checkpoint plus `<name>_loss.csv`.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    stage: Stage,
    arm: AblationArm,
    progress: impl FnMut(usize, f64),
) -> Result<(PathBuf, TrainedModel)> {
    let dir = data_dir(&cfg.out_dir);
    let ds = if dir.join("manifest.txt").exists() {
        load_dataset(&dir)?
    } else {
        cmd_phantom(cfg)?
    };
    let model = train_stage(cfg, &ds, stage, arm.augment(cfg.iia_proportion), progress)?;
    ensure_dir(&models_dir(&cfg.out_dir))?;
    let path = checkpoint_path(&cfg.out_dir, stage, arm);
    checkpoint::save(&model.net, &path)?;
    write(
        &path.with_extension("loss.csv"),
        &checkpoint::loss_history_csv(&model.report.history),
    )?;
    Ok((path, model))
}

fn check_stage(net: &UNet<f32>, classes: usize, what: &str) -> Result<()> {
    if net.config().out_classes != classes || net.config().in_channels != 1 {
        return Err(Error::Config(format!(
            "{what} checkpoint has {} classes, expected {classes}",
            net.config().out_classes
        )));
    }
    Ok(())
}

/// Segments one `.mvol` and writes the label volume.
pub fn cmd_segment(
    cfg: &ExperimentConfig,
    input: &Path,
    icv_checkpoint: &Path,
    tissue_checkpoint: &Path,
    output: &Path,
) -> Result<Segmentation> {
    let icv: UNet<f32> = checkpoint::load(icv_checkpoint)?;
    let tissue: UNet<f32> = checkpoint::load(tissue_checkpoint)?;
    check_stage(&icv, 2, "ICV")?;
    check_stage(&tissue, crate::tissue::NUM_CLASSES, "tissue")?;
    let volume = load_intensity(input)?;
    let seg = segment_volume(&icv, &tissue, &volume, cfg)?;
    if let Some(parent) = output.parent() {
        ensure_dir(parent)?;
    }
    save_volume(&seg.labels, output)?;
    Ok(seg)
}

pub fn prediction_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_pred.mvol"))
}

/// Scores `<pred_dir>/<id>_pred.mvol` against the reference of every test
/// case in `data_dir`; writes `scores.csv` and `report.csv` to `out`.
pub fn cmd_evaluate(data_dir: &Path, pred_dir: &Path, out: &Path) -> Result<(Vec<SliceClassScore>, MetricsReport)> {
    let manifest = Manifest::load(data_dir.join("manifest.txt"))?;
    let mut scores = Vec::new();
    for e in manifest.entries.iter().filter(|e| e.test) {
        let reference = load_labels(labels_path(data_dir, &e.id))?;
        let pred = load_labels(prediction_path(pred_dir, &e.id))?;
        scores.extend(score_volume(&e.id, &reference, &pred, &e.artifact)?);
    }
    let report = aggregate(&scores);
    ensure_dir(out)?;
    write(&out.join("scores.csv"), &scores_to_csv(&scores))?;
    write(&out.join("report.csv"), &report.to_csv())?;
    Ok((scores, report))
}

/// Panels (original | multiplier | augmented) for slice `z`, each rescaled
/// to `[0, 1023]`, plus the draw used.
pub fn preview_triptych(
    volume: &IntensityVolume,
    z: usize,
    params: &IiaParams,
    seed: u64,
) -> Result<(Slice2D<f32>, IiaDraw)> {
    let slice = volume.get_slice(z)?;
    let mut rng = substream(seed, &[tag::AUGMENT, u64::MAX, z as u64]);
    let draw = IiaDraw::draw(params, &mut rng);
    let field = draw.field(slice.width, slice.height);
    let augmented = apply_iia_with(&slice, &draw);
    let field_slice = slice.with_data(field.values.iter().map(|&v| v as f32).collect());
    let panels = [normalize_slice(&slice), normalize_slice(&field_slice), augmented];
    let (w, h) = (slice.width, slice.height);
    let mut data = vec![0.0f32; 3 * w * h];
    for (k, p) in panels.iter().enumerate() {
        for y in 0..h {
            data[y * 3 * w + k * w..y * 3 * w + (k + 1) * w].copy_from_slice(&p.data[y * w..(y + 1) * w]);
        }
    }
    Ok((Slice2D::new(3 * w, h, slice.spacing, data)?, draw))
}

/// Writes `<stem>_z<k>.pgm` triptychs for every slice of `input`.
pub fn cmd_augment_preview(input: &Path, out: &Path, params: &IiaParams, seed: u64) -> Result<Vec<PathBuf>> {
    let volume = load_intensity(input)?;
    ensure_dir(out)?;
    let stem = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "volume".into());
    let mut paths = Vec::new();
    for z in 0..volume.geometry().depth {
        let (tri, _) = preview_triptych(&volume, z, params, seed)?;
        let path = out.join(format!("{stem}_z{z}.pgm"));
        write_pgm(&tri, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Draw log of one augmented batch, for inspecting what an arm does.
pub fn batch_draws(pairs: &[Pair], augment: &AugmentConfig, seed: u64) -> Result<Vec<DrawLog>> {
    let mut rng = substream(seed, &[tag::AUGMENT, 0, 0]);
    Ok(compose_batch(pairs, augment, &mut rng)?.log)
}
