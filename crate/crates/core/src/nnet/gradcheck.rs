//! Central finite-difference checks in double precision.

use rand::Rng;

use super::layers::{self, ConvShape};
use super::loss::{loss_and_grad, LossKind};
use super::unet::{random_tensor, ForwardCache, Mode, UNet, UNetConfig};
use super::Tensor4;
use crate::error::Result;
use crate::rng::substream;

pub const STEP: f64 = 1e-5;
/// Starting step of the five-point stencil used for the whole network, where
/// the loss carries enough roundoff that small steps lose small gradients.
pub const NETWORK_STEP: f64 = 2e-4;
/// Narrowest smooth window that still gets the five-point stencil.
pub const STENCIL_WIDTH: f64 = 5e-5;
/// Step used to measure how fast each switch margin moves.
pub const PROBE_STEP: f64 = 1e-7;
/// Smallest step tried when a perturbation changes the activation pattern.
pub const MIN_STEP: f64 = 1e-8;
/// Gradients smaller than this are compared in absolute terms.
pub const FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

impl CheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares `analytic[i]` with the central difference of `f` along `x[i]`.
pub fn compare<F: FnMut(&[f64]) -> Result<f64>>(
    name: &str,
    x: &mut [f64],
    analytic: &[f64],
    indices: impl IntoIterator<Item = usize>,
    mut f: F,
) -> Result<CheckReport> {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for i in indices {
        let orig = x[i];
        x[i] = orig + STEP;
        let up = f(x)?;
        x[i] = orig - STEP;
        let down = f(x)?;
        x[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max(relative_error(analytic[i], numeric));
        checked += 1;
    }
    Ok(CheckReport {
        name: name.to_string(),
        checked,
        max_rel_error: worst,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// 3x3 conv on a random 1x1x4x4 input against `L = Σ r·y`; checks input,
/// kernel and bias gradients.
pub fn check_conv(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = substream(seed, &[0xC0]);
    let shape = ConvShape::same(1, 2, 3);
    let mut x = random_tensor::<f64>(&mut rng, 1, 1, 4, 4);
    let mut w: Vec<f64> = (0..shape.weight_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut b: Vec<f64> = vec![0.1, -0.3];
    let r = random_tensor::<f64>(&mut rng, 1, 2, 4, 4);
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; 2];
    let dx = layers::conv_backward(&x, &r, &shape, &w, &mut dw, Some(&mut db));
    let (wc, bc, xc) = (w.clone(), b.clone(), x.clone());
    let rep_x = compare("conv3x3 input", &mut x.data, &dx.data, 0..16, |d| {
        let t = Tensor4::from_vec(1, 1, 4, 4, d.to_vec())?;
        Ok(dot(&layers::conv_forward(&t, &shape, &wc, Some(&bc))?.data, &r.data))
    })?;
    let n = w.len();
    let rep_w = compare("conv3x3 kernel", &mut w, &dw, 0..n, |k| {
        Ok(dot(&layers::conv_forward(&xc, &shape, k, Some(&bc))?.data, &r.data))
    })?;
    let rep_b = compare("conv3x3 bias", &mut b, &db, 0..2, |bb| {
        Ok(dot(&layers::conv_forward(&xc, &shape, &wc, Some(bb))?.data, &r.data))
    })?;
    Ok(vec![rep_x, rep_w, rep_b])
}

/// Batch norm (train mode), 2x2 up-conv, pooling, upsampling and softmax
/// against random linear readouts.
pub fn check_layers(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = substream(seed, &[0xC1]);
    let mut out = Vec::new();

    let mut x = random_tensor::<f64>(&mut rng, 2, 3, 4, 4);
    let gamma = [1.2, 0.7, -0.4];
    let beta = [0.1, 0.0, -0.2];
    let r = random_tensor::<f64>(&mut rng, 2, 3, 4, 4);
    let bn = |t: &Tensor4<f64>| layers::batchnorm_forward(t, &gamma, &beta, &[0.0; 3], &[1.0; 3], true);
    let (_, cache) = bn(&x);
    let (mut dg, mut dbeta) = ([0.0; 3], [0.0; 3]);
    let dx = layers::batchnorm_backward(&r, &cache, &gamma, &mut dg, &mut dbeta);
    let n = x.data.len();
    out.push(compare("batchnorm input", &mut x.data, &dx.data, 0..n, |d| {
        let t = Tensor4::from_vec(2, 3, 4, 4, d.to_vec())?;
        Ok(dot(&bn(&t).0.data, &r.data))
    })?);

    let shape = ConvShape::same(2, 1, 2);
    let mut x = random_tensor::<f64>(&mut rng, 1, 2, 4, 4);
    let w: Vec<f64> = (0..shape.weight_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r = random_tensor::<f64>(&mut rng, 1, 1, 4, 4);
    let mut dw = vec![0.0; w.len()];
    let dx = layers::conv_backward(&x, &r, &shape, &w, &mut dw, None);
    let n = x.data.len();
    out.push(compare("conv2x2 input", &mut x.data, &dx.data, 0..n, |d| {
        let t = Tensor4::from_vec(1, 2, 4, 4, d.to_vec())?;
        Ok(dot(&layers::conv_forward(&t, &shape, &w, None)?.data, &r.data))
    })?);

    let mut x = random_tensor::<f64>(&mut rng, 1, 2, 4, 4);
    let r = random_tensor::<f64>(&mut rng, 1, 2, 2, 2);
    let (_, arg) = layers::maxpool_forward(&x)?;
    let dx = layers::maxpool_backward(&r, &arg, x.dims());
    let n = x.data.len();
    out.push(compare("maxpool input", &mut x.data, &dx.data, 0..n, |d| {
        let t = Tensor4::from_vec(1, 2, 4, 4, d.to_vec())?;
        Ok(dot(&layers::maxpool_forward(&t)?.0.data, &r.data))
    })?);

    let mut x = random_tensor::<f64>(&mut rng, 1, 2, 2, 3);
    let r = random_tensor::<f64>(&mut rng, 1, 2, 4, 6);
    let dx = layers::upsample_backward(&r);
    let n = x.data.len();
    out.push(compare("upsample input", &mut x.data, &dx.data, 0..n, |d| {
        let t = Tensor4::from_vec(1, 2, 2, 3, d.to_vec())?;
        Ok(dot(&layers::upsample_forward(&t).data, &r.data))
    })?);

    let mut x = random_tensor::<f64>(&mut rng, 2, 4, 2, 2);
    let r = random_tensor::<f64>(&mut rng, 2, 4, 2, 2);
    let p = layers::softmax_forward(&x);
    let dx = layers::softmax_backward(&p, &r);
    let n = x.data.len();
    out.push(compare("softmax input", &mut x.data, &dx.data, 0..n, |d| {
        let t = Tensor4::from_vec(2, 4, 2, 2, d.to_vec())?;
        Ok(dot(&layers::softmax_forward(&t).data, &r.data))
    })?);
    Ok(out)
}

fn random_probs(rng: &mut impl Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor4<f64> {
    let logits = random_tensor::<f64>(rng, n, c, h, w);
    layers::softmax_forward(&logits)
}

/// Loss gradients w.r.t. the probabilities.
pub fn check_losses(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = substream(seed, &[0xC2]);
    let mut out = Vec::new();
    for kind in [LossKind::CrossEntropy, LossKind::SoftDice] {
        let (n, c, h, w) = (2, 4, 3, 3);
        let mut p = random_probs(&mut rng, n, c, h, w);
        let target: Vec<u8> = (0..n * h * w).map(|_| rng.gen_range(0..c as u8)).collect();
        let (_, g) = loss_and_grad(kind, &p, &target)?;
        let len = p.data.len();
        out.push(compare(
            &format!("{kind} probabilities"),
            &mut p.data,
            &g.data,
            0..len,
            |d| {
                let t = Tensor4::from_vec(n, c, h, w, d.to_vec())?;
                Ok(loss_and_grad(kind, &t, &target)?.0)
            },
        )?);
    }
    Ok(out)
}

/// Whole-network parameter gradient in train mode, one report per loss. The
/// losses share the network, the batch and every perturbed forward pass.
pub fn check_network(
    config: UNetConfig,
    size: usize,
    batch: usize,
    kinds: &[LossKind],
    seed: u64,
) -> Result<Vec<CheckReport>> {
    let mut rng = substream(seed, &[0xC3]);
    let mut net = UNet::<f64>::new(config, seed)?;
    let x = random_tensor::<f64>(&mut rng, batch, config.in_channels, size, size);
    let target: Vec<u8> = (0..batch * size * size)
        .map(|_| rng.gen_range(0..config.out_classes as u8))
        .collect();
    let cache = net.forward(&x, Mode::Train)?;
    let grads = kinds
        .iter()
        .map(|&kind| {
            let (_, dp) = loss_and_grad(kind, &cache.probs, &target)?;
            net.backward(&cache, &dp)
        })
        .collect::<Result<Vec<_>>>()?;
    let base = cache.activation_pattern();
    let margins = net.switch_margins(&cache);
    let mut params = std::mem::take(&mut net.params);
    let trial = |p: &[f64]| -> Result<(UNet<f64>, ForwardCache<f64>)> {
        let t = UNet::from_parts(config, p.to_vec(), net.stats.clone())?;
        let c = t.forward(&x, Mode::Train)?;
        Ok((t, c))
    };
    let mut worst = vec![0.0f64; kinds.len()];
    for i in 0..params.len() {
        let orig = params[i];
        // largest step before the first ReLU or pooling switch, to first order
        params[i] = orig + PROBE_STEP;
        let (t, c) = trial(&params)?;
        let moved = t.switch_margins(&c);
        let reach = margins
            .iter()
            .zip(&moved)
            .map(|(&m, &n)| (m - n).abs() / PROBE_STEP)
            .zip(&margins)
            .filter(|&(rate, _)| rate > 0.0)
            .map(|(rate, &m)| m.abs() / rate)
            .fold(f64::INFINITY, f64::min);
        // f(x + h) - f(x - h) per loss, and whether both sides kept the activation pattern
        let mut diff = |h: f64| -> Result<(Vec<f64>, bool)> {
            let mut side = |v: f64| -> Result<(Vec<f64>, bool)> {
                params[i] = v;
                let (_, c) = trial(&params)?;
                let losses = kinds
                    .iter()
                    .map(|&kind| Ok(loss_and_grad(kind, &c.probs, &target)?.0))
                    .collect::<Result<Vec<_>>>()?;
                Ok((losses, c.activation_pattern() == base))
            };
            let (up, up_same) = side(orig + h)?;
            let (down, down_same) = side(orig - h)?;
            params[i] = orig;
            Ok((up.iter().zip(&down).map(|(u, d)| u - d).collect(), up_same && down_same))
        };
        // widest offset sampled; a five-point stencil when the smooth piece
        // is wide, otherwise a central difference, which amplifies roundoff less
        let mut width = (reach / 2.0).clamp(MIN_STEP, 2.0 * NETWORK_STEP);
        let numeric: Vec<f64> = loop {
            if width >= STENCIL_WIDTH {
                let (d1, ok1) = diff(width / 2.0)?;
                let (d2, ok2) = diff(width)?;
                if ok1 && ok2 {
                    break d1.iter().zip(&d2).map(|(a, b)| (8.0 * a - b) / (6.0 * width)).collect();
                }
            } else {
                let (d, ok) = diff(width)?;
                if ok || width <= MIN_STEP {
                    break d.iter().map(|v| v / (2.0 * width)).collect();
                }
            }
            // a step across a switch measures the kink, not the slope
            width = (width / 1.5).max(MIN_STEP);
        };
        for ((w, g), n) in worst.iter_mut().zip(&grads).zip(&numeric) {
            *w = w.max(relative_error(g[i], *n));
        }
    }
    Ok(kinds
        .iter()
        .zip(worst)
        .map(|(kind, max_rel_error)| CheckReport {
            name: format!("network ({kind})"),
            checked: params.len(),
            max_rel_error,
        })
        .collect())
}

/// Every check at the sizes used by the command-line `gradcheck`.
pub fn run_all(seed: u64) -> Result<Vec<(CheckReport, f64)>> {
    let mut out = Vec::new();
    for r in check_conv(seed)?
        .into_iter()
        .chain(check_layers(seed)?)
        .chain(check_losses(seed)?)
    {
        out.push((r, 1e-6));
    }
    let cfg = UNetConfig {
        depth: 2,
        base_channels: 4,
        in_channels: 1,
        out_classes: 3,
    };
    for r in check_network(cfg, 16, 2, &[LossKind::CrossEntropy, LossKind::SoftDice], seed)? {
        out.push((r, 1e-4));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-12, 0.0) < 1e-4);
    }
}
