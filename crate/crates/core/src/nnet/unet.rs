//! U-net with a flat parameter layout.
//!
//! Layer order (also the checkpoint payload order):
//! encoder levels `0..depth` each with `conv_a`, `conv_b`; bottom `conv_a`,
//! `conv_b`; decoder levels from deepest to shallowest each with `up`,
//! `conv_a`, `conv_b`; final 1x1 conv. Within a layer the payload is the
//! kernel `[out][in][k][k]`, then either batch-norm scale and shift or, for
//! the final layer, the bias.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::layers::{self, BnCache, ConvShape};
use super::{Real, Tensor4};
use crate::error::{Error, Result};
use crate::rng::{substream, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_classes: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 16,
            in_channels: 1,
            out_classes: 2,
        }
    }
}

impl UNetConfig {
    pub fn with_classes(out_classes: usize) -> Self {
        Self {
            out_classes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_classes < 2 {
            return Err(Error::Config(format!(
                "out_classes must be at least 2, got {}",
                self.out_classes
            )));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.depth > 8 {
            return Err(Error::Config(format!("depth {} is too large", self.depth)));
        }
        Ok(())
    }

    /// Input height and width must be multiples of this.
    pub fn multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.multiple();
        if !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by {m} (depth {})",
                self.depth
            )));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One convolution in the parameter table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub shape: ConvShape,
    pub weight: usize,
    /// Offset of `[gamma; out_c]` followed by `[beta; out_c]`, or of the bias.
    pub affine: usize,
    pub batchnorm: bool,
    /// Offset into the running statistics (`[mean; out_c]`, `[var; out_c]`).
    pub stats: usize,
}

impl ConvSpec {
    fn end(&self) -> usize {
        self.affine + if self.batchnorm { 2 } else { 1 } * self.shape.out_c
    }
}

fn layer_table(cfg: &UNetConfig) -> (Vec<ConvSpec>, usize, usize) {
    let mut specs = Vec::new();
    let (mut p, mut s) = (0usize, 0usize);
    let mut push = |shape: ConvShape, batchnorm: bool| {
        let spec = ConvSpec {
            shape,
            weight: p,
            affine: p + shape.weight_len(),
            batchnorm,
            stats: s,
        };
        p = spec.end();
        if batchnorm {
            s += 2 * shape.out_c;
        }
        specs.push(spec);
    };
    let d = cfg.depth;
    for l in 0..d {
        let in_c = if l == 0 { cfg.in_channels } else { cfg.width(l - 1) };
        push(ConvShape::same(in_c, cfg.width(l), 3), true);
        push(ConvShape::same(cfg.width(l), cfg.width(l), 3), true);
    }
    let bottom_in = if d == 0 { cfg.in_channels } else { cfg.width(d - 1) };
    push(ConvShape::same(bottom_in, cfg.width(d), 3), true);
    push(ConvShape::same(cfg.width(d), cfg.width(d), 3), true);
    for l in (0..d).rev() {
        push(ConvShape::same(cfg.width(l + 1), cfg.width(l), 2), true);
        push(ConvShape::same(2 * cfg.width(l), cfg.width(l), 3), true);
        push(ConvShape::same(cfg.width(l), cfg.width(l), 3), true);
    }
    push(ConvShape::same(cfg.width(0), cfg.out_classes, 1), false);
    (specs, p, s)
}

/// Cached activations of one conv → BN → ReLU block.
#[derive(Clone, Debug)]
struct BlockCache<T> {
    input: Tensor4<T>,
    bn: BnCache<T>,
    output: Tensor4<T>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    blocks: Vec<BlockCache<T>>,
    pools: Vec<(Vec<u32>, (usize, usize, usize, usize))>,
    final_input: Tensor4<T>,
    pub probs: Tensor4<T>,
}

impl<T: Real> ForwardCache<T> {
    /// Which ReLUs fired and which input each pooling window selected. The
    /// network is smooth in its parameters while this stays fixed.
    pub fn activation_pattern(&self) -> (Vec<bool>, Vec<u32>) {
        let relu = self
            .blocks
            .iter()
            .flat_map(|b| b.output.data.iter().map(|&v| v > T::zero()))
            .collect();
        let pool = self.pools.iter().flat_map(|(arg, _)| arg.iter().copied()).collect();
        (relu, pool)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNet<T> {
    config: UNetConfig,
    specs: Vec<ConvSpec>,
    pub params: Vec<T>,
    pub stats: Vec<T>,
}

impl<T: Real> UNet<T> {
    /// He-initialised network; batch-norm scale 1, shift 0, running
    /// mean 0 and variance 1.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (specs, n_params, n_stats) = layer_table(&config);
        let mut params = vec![T::zero(); n_params];
        let mut stats = vec![T::zero(); n_stats];
        let mut rng = substream(seed, &[tag::INIT]);
        for spec in &specs {
            let fan_in = (spec.shape.in_c * spec.shape.k * spec.shape.k) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            for w in &mut params[spec.weight..spec.affine] {
                *w = T::from_f64(normal.sample(&mut rng));
            }
            if spec.batchnorm {
                let c = spec.shape.out_c;
                params[spec.affine..spec.affine + c].fill(T::one());
                stats[spec.stats + c..spec.stats + 2 * c].fill(T::one());
            }
        }
        Ok(Self {
            config,
            specs,
            params,
            stats,
        })
    }

    /// Rebuilds a network from stored parameters and statistics.
    pub fn from_parts(config: UNetConfig, params: Vec<T>, stats: Vec<T>) -> Result<Self> {
        config.validate()?;
        let (specs, n_params, n_stats) = layer_table(&config);
        if params.len() != n_params || stats.len() != n_stats {
            return Err(Error::Shape(format!(
                "expected {n_params} parameters and {n_stats} statistics, got {} and {}",
                params.len(),
                stats.len()
            )));
        }
        Ok(Self {
            config,
            specs,
            params,
            stats,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ConvSpec] {
        &self.specs
    }

    pub fn cast<U: Real>(&self) -> UNet<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::from_f64(x.to_f64().expect("finite"))).collect();
        UNet {
            config: self.config,
            specs: self.specs.clone(),
            params: conv(&self.params),
            stats: conv(&self.stats),
        }
    }

    fn block_forward(
        &self,
        idx: usize,
        x: Tensor4<T>,
        mode: Mode,
        caches: &mut Vec<BlockCache<T>>,
    ) -> Result<Tensor4<T>> {
        let spec = &self.specs[idx];
        let c = spec.shape.out_c;
        let y = layers::conv_forward(&x, &spec.shape, &self.params[spec.weight..spec.affine], None)?;
        let (mut y, bn) = layers::batchnorm_forward(
            &y,
            &self.params[spec.affine..spec.affine + c],
            &self.params[spec.affine + c..spec.affine + 2 * c],
            &self.stats[spec.stats..spec.stats + c],
            &self.stats[spec.stats + c..spec.stats + 2 * c],
            mode == Mode::Train,
        );
        layers::relu_inplace(&mut y);
        caches.push(BlockCache {
            input: x,
            bn,
            output: y.clone(),
        });
        Ok(y)
    }

    /// Distance of every ReLU input from zero and of every pooling maximum
    /// from its runner-up, in forward order. The output is smooth in the
    /// parameters while none of these cross zero.
    pub fn switch_margins(&self, cache: &ForwardCache<T>) -> Vec<T> {
        let mut out = Vec::new();
        for (spec, block) in self.specs.iter().zip(&cache.blocks) {
            let c = spec.shape.out_c;
            let (gamma, beta) = self.params[spec.affine..spec.affine + 2 * c].split_at(c);
            let xhat = &block.bn.xhat;
            let hw = xhat.plane();
            for (j, &v) in xhat.data.iter().enumerate() {
                let ch = (j / hw) % c;
                out.push(gamma[ch] * v + beta[ch]);
            }
        }
        for (level, (arg, (_, _, h, w))) in cache.pools.iter().enumerate() {
            let x = &cache.blocks[2 * level + 1].output;
            let (oh, ow) = (h / 2, w / 2);
            for (o, &best) in arg.iter().enumerate() {
                let (p, y, xo) = (o / (oh * ow), (o / ow) % oh, o % ow);
                let base = p * h * w + 2 * y * w + 2 * xo;
                let second = [base, base + 1, base + w, base + w + 1]
                    .into_iter()
                    .filter(|&j| j != best as usize)
                    .map(|j| x.data[j])
                    .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
                out.push(x.data[best as usize] - second);
            }
        }
        out
    }

    /// Per-pixel class probabilities plus the backward cache.
    pub fn forward(&self, x: &Tensor4<T>, mode: Mode) -> Result<ForwardCache<T>> {
        let cfg = &self.config;
        if x.c != cfg.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {}",
                cfg.in_channels, x.c
            )));
        }
        cfg.check_input(x.h, x.w)?;
        let d = cfg.depth;
        let mut blocks = Vec::with_capacity(self.specs.len());
        let mut pools = Vec::with_capacity(d);
        let mut skips = Vec::with_capacity(d);
        let mut idx = 0;
        let mut h = x.clone();
        for _ in 0..d {
            h = self.block_forward(idx, h, mode, &mut blocks)?;
            h = self.block_forward(idx + 1, h, mode, &mut blocks)?;
            idx += 2;
            let (p, arg) = layers::maxpool_forward(&h)?;
            pools.push((arg, h.dims()));
            skips.push(h);
            h = p;
        }
        h = self.block_forward(idx, h, mode, &mut blocks)?;
        h = self.block_forward(idx + 1, h, mode, &mut blocks)?;
        idx += 2;
        for _ in 0..d {
            let up = layers::upsample_forward(&h);
            let up = self.block_forward(idx, up, mode, &mut blocks)?;
            let skip = skips.pop().expect("one skip per level");
            let cat = layers::concat_forward(&skip, &up)?;
            h = self.block_forward(idx + 1, cat, mode, &mut blocks)?;
            h = self.block_forward(idx + 2, h, mode, &mut blocks)?;
            idx += 3;
        }
        let spec = &self.specs[idx];
        let logits = layers::conv_forward(
            &h,
            &spec.shape,
            &self.params[spec.weight..spec.affine],
            Some(&self.params[spec.affine..spec.end()]),
        )?;
        let probs = layers::softmax_forward(&logits);
        Ok(ForwardCache {
            blocks,
            pools,
            final_input: h,
            probs,
        })
    }

    fn block_backward(&self, idx: usize, cache: &BlockCache<T>, mut dy: Tensor4<T>, grad: &mut [T]) -> Tensor4<T> {
        let spec = &self.specs[idx];
        let c = spec.shape.out_c;
        layers::relu_backward_inplace(&mut dy, &cache.output);
        let (head, tail) = grad.split_at_mut(spec.affine);
        let (dgamma, rest) = tail.split_at_mut(c);
        let dz = layers::batchnorm_backward(
            &dy,
            &cache.bn,
            &self.params[spec.affine..spec.affine + c],
            dgamma,
            &mut rest[..c],
        );
        layers::conv_backward(
            &cache.input,
            &dz,
            &spec.shape,
            &self.params[spec.weight..spec.affine],
            &mut head[spec.weight..],
            None,
        )
    }

    /// Gradient of the loss w.r.t. all parameters given `dL/dprobs`.
    pub fn backward(&self, cache: &ForwardCache<T>, dprobs: &Tensor4<T>) -> Result<Vec<T>> {
        if !dprobs.same_dims(&cache.probs) {
            return Err(Error::Shape(format!(
                "gradient dims {:?} != output dims {:?}",
                dprobs.dims(),
                cache.probs.dims()
            )));
        }
        let d = self.config.depth;
        let mut grad = vec![T::zero(); self.params.len()];
        let dlogits = layers::softmax_backward(&cache.probs, dprobs);
        let last = self.specs.len() - 1;
        let spec = &self.specs[last];
        let (head, tail) = grad.split_at_mut(spec.affine);
        let mut dh = layers::conv_backward(
            &cache.final_input,
            &dlogits,
            &spec.shape,
            &self.params[spec.weight..spec.affine],
            &mut head[spec.weight..],
            Some(&mut tail[..spec.shape.out_c]),
        );
        // Blocks are cached in spec order. Walking backwards visits the
        // decoder from the shallowest level down.
        let mut skip_grads: Vec<Tensor4<T>> = Vec::with_capacity(d);
        let mut idx = last;
        for l in 0..d {
            idx -= 3;
            dh = self.block_backward(idx + 2, &cache.blocks[idx + 2], dh, &mut grad);
            let dcat = self.block_backward(idx + 1, &cache.blocks[idx + 1], dh, &mut grad);
            let skip_c = self.config.width(l);
            let (dskip, dup) = layers::concat_backward(&dcat, skip_c);
            skip_grads.push(dskip);
            let dup = self.block_backward(idx, &cache.blocks[idx], dup, &mut grad);
            dh = layers::upsample_backward(&dup);
        }
        idx -= 2;
        dh = self.block_backward(idx + 1, &cache.blocks[idx + 1], dh, &mut grad);
        dh = self.block_backward(idx, &cache.blocks[idx], dh, &mut grad);
        for l in (0..d).rev() {
            let (arg, dims) = &cache.pools[l];
            let mut dskip = layers::maxpool_backward(&dh, arg, *dims);
            let s = skip_grads.pop().expect("one skip gradient per level");
            for (a, b) in dskip.data.iter_mut().zip(&s.data) {
                *a += *b;
            }
            idx -= 2;
            dh = self.block_backward(idx + 1, &cache.blocks[idx + 1], dskip, &mut grad);
            dh = self.block_backward(idx, &cache.blocks[idx], dh, &mut grad);
        }
        Ok(grad)
    }

    /// Moves running statistics towards the batch statistics of a
    /// train-mode forward pass.
    pub fn update_running_stats(&mut self, cache: &ForwardCache<T>) {
        let m = T::from_f64(layers::BN_MOMENTUM);
        let one_m = T::one() - m;
        let mut blocks = cache.blocks.iter();
        for spec in self.specs.iter().filter(|s| s.batchnorm) {
            let bc = blocks.next().expect("one cache per batch-norm layer");
            if !bc.bn.train {
                continue;
            }
            let c = spec.shape.out_c;
            for ch in 0..c {
                let rm = &mut self.stats[spec.stats + ch];
                *rm = m * *rm + one_m * bc.bn.batch_mean[ch];
                let rv = &mut self.stats[spec.stats + c + ch];
                *rv = m * *rv + one_m * bc.bn.batch_var[ch];
            }
        }
    }

    /// Eval-mode arg-max labels, one `h·w` plane per sample.
    pub fn predict(&self, x: &Tensor4<T>) -> Result<Vec<u8>> {
        let probs = self.forward(x, Mode::Eval)?.probs;
        Ok(argmax_channels(&probs))
    }
}

pub fn argmax_channels<T: Real>(probs: &Tensor4<T>) -> Vec<u8> {
    let hw = probs.plane();
    let mut out = Vec::with_capacity(probs.n * hw);
    for i in 0..probs.n {
        let s = probs.sample(i);
        for p in 0..hw {
            let mut best = 0;
            for c in 1..probs.c {
                if s[c * hw + p] > s[best * hw + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

/// Random draw helper shared by tests and the gradient checker.
pub fn random_tensor<T: Real>(rng: &mut impl Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor4<T> {
    let data = (0..n * c * h * w)
        .map(|_| T::from_f64(rng.gen_range(-1.0..1.0)))
        .collect();
    Tensor4 { n, c, h, w, data }
}
