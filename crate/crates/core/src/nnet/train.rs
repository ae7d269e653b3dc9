use rand::seq::SliceRandom;

use super::loss::{loss_and_grad, LossKind};
use super::optim::NadamState;
use super::unet::{Mode, UNet};
use super::Tensor4;
use crate::augment::{compose_batch, AugmentConfig, DrawLog};
use crate::error::{Error, Result};
use crate::rng::{substream, tag};
use crate::volume::{normalize_slice, Slice2D, NORMALIZED_MAX};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > dataset_len {
            return Err(Error::Config(format!(
                "batch size {} must be in 1..={dataset_len}",
                self.batch_size
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        self.augment.validate()
    }
}

/// Counts of augmentation draws over a whole run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DrawSummary {
    pub slices: usize,
    pub flipped: usize,
    pub rotated: usize,
    pub iia: usize,
}

impl DrawSummary {
    fn add(&mut self, log: &DrawLog) {
        self.slices += 1;
        self.flipped += log.flip.map_or(0, |f| usize::from(f.horizontal || f.vertical));
        self.rotated += usize::from(log.rotation.is_some());
        self.iia += usize::from(log.iia.is_some());
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss per epoch.
    pub history: Vec<f64>,
    pub steps: u64,
    pub draws: DrawSummary,
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Stacks normalized slices into an `n x 1 x h x w` tensor scaled to `[0, 1]`,
/// zero-padding each on the right and bottom to the common size.
pub fn stack_images(images: &[Slice2D<f32>], multiple: usize) -> (Tensor4<f32>, usize, usize) {
    let h = round_up(images.iter().map(|s| s.height).max().unwrap_or(1), multiple);
    let w = round_up(images.iter().map(|s| s.width).max().unwrap_or(1), multiple);
    let mut t = Tensor4::zeros(images.len(), 1, h, w);
    for (i, s) in images.iter().enumerate() {
        let dst = t.sample_mut(i);
        for y in 0..s.height {
            for x in 0..s.width {
                dst[y * w + x] = s.at(x, y) / NORMALIZED_MAX;
            }
        }
    }
    (t, h, w)
}

fn stack_labels(labels: &[Slice2D<u8>], h: usize, w: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(labels.len() * h * w);
    for s in labels {
        out.extend(s.padded(w, h, 0).data);
    }
    out
}

pub fn train(net: &mut UNet<f32>, data: &[(Slice2D<f32>, Slice2D<u8>)], config: &TrainConfig) -> Result<TrainReport> {
    train_with_progress(net, data, config, |_, _| {})
}

/// Mini-batch training; `progress(epoch, mean_loss)` runs after every epoch.
pub fn train_with_progress(
    net: &mut UNet<f32>,
    data: &[(Slice2D<f32>, Slice2D<u8>)],
    config: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    config.validate(data.len())?;
    let classes = net.config().out_classes;
    for (_, l) in data {
        if let Some(&bad) = l.data.iter().find(|&&v| v as usize >= classes) {
            return Err(Error::InvalidLabel(bad));
        }
    }
    let multiple = net.config().multiple();
    let mut opt = NadamState::with_lr(net.params.len(), config.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport {
        history: Vec::with_capacity(config.epochs),
        steps: 0,
        draws: DrawSummary::default(),
    };
    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut substream(config.seed, &[tag::SHUFFLE, epoch as u64]));
        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let pairs: Vec<_> = chunk.iter().map(|&i| data[i].clone()).collect();
            let mut rng = substream(config.seed, &[tag::AUGMENT, epoch as u64, b as u64]);
            let batch = compose_batch(&pairs, &config.augment, &mut rng)?;
            batch.log.iter().for_each(|l| report.draws.add(l));
            let (x, h, w) = stack_images(&batch.images, multiple);
            let target = stack_labels(&batch.labels, h, w);
            let cache = net.forward(&x, Mode::Train)?;
            let (loss, dprobs) = loss_and_grad(config.loss, &cache.probs, &target)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("loss became {loss} in epoch {}", epoch + 1)));
            }
            let grad = net.backward(&cache, &dprobs)?;
            opt.step(&mut net.params, &grad)?;
            net.update_running_stats(&cache);
            total += loss;
            batches += 1;
        }
        let mean = total / batches as f64;
        report.history.push(mean);
        progress(epoch + 1, mean);
    }
    report.steps = opt.step;
    Ok(report)
}

/// Eval-mode labels for each slice. Slices are normalized, padded to the
/// network multiple and cropped back.
pub fn predict_slices(net: &UNet<f32>, slices: &[Slice2D<f32>]) -> Result<Vec<Slice2D<u8>>> {
    let multiple = net.config().multiple();
    slices
        .iter()
        .map(|s| {
            let (x, _, w) = stack_images(&[normalize_slice(s)], multiple);
            let labels = net.predict(&x)?;
            let mut out = Vec::with_capacity(s.width * s.height);
            for y in 0..s.height {
                out.extend_from_slice(&labels[y * w..y * w + s.width]);
            }
            Ok(s.with_data(out))
        })
        .collect()
}

/// Mean loss of the network in eval mode over `data`, without augmentation.
pub fn evaluate_loss(net: &UNet<f32>, data: &[(Slice2D<f32>, Slice2D<u8>)], kind: LossKind) -> Result<f64> {
    let multiple = net.config().multiple();
    let images: Vec<_> = data.iter().map(|(i, _)| normalize_slice(i)).collect();
    let labels: Vec<_> = data.iter().map(|(_, l)| l.clone()).collect();
    let (x, h, w) = stack_images(&images, multiple);
    let probs = net.forward(&x, Mode::Eval)?.probs;
    Ok(loss_and_grad(kind, &probs, &stack_labels(&labels, h, w))?.0)
}
