use std::fmt;
use std::str::FromStr;

use super::{Real, Tensor4};
use crate::error::{Error, Result};

pub const DICE_SMOOTH: f64 = 1.0;
const PROB_FLOOR: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    SoftDice,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::SoftDice => "soft_dice",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "cross_entropy" | "ce" => Ok(LossKind::CrossEntropy),
            "soft_dice" | "dice" => Ok(LossKind::SoftDice),
            other => Err(Error::Config(format!("unknown loss '{other}'"))),
        }
    }
}

fn check_target<T: Real>(probs: &Tensor4<T>, target: &[u8]) -> Result<()> {
    if target.len() != probs.n * probs.plane() {
        return Err(Error::Shape(format!(
            "target has {} pixels, prediction has {}",
            target.len(),
            probs.n * probs.plane()
        )));
    }
    if let Some(&bad) = target.iter().find(|&&t| t as usize >= probs.c) {
        return Err(Error::InvalidLabel(bad));
    }
    Ok(())
}

/// Mean `-ln p[true class]` over all pixels, and its gradient w.r.t. `probs`.
pub fn cross_entropy<T: Real>(probs: &Tensor4<T>, target: &[u8]) -> Result<(f64, Tensor4<T>)> {
    check_target(probs, target)?;
    let hw = probs.plane();
    let count = (probs.n * hw) as f64;
    let floor = T::from_f64(PROB_FLOOR);
    let scale = T::from_f64(-1.0 / count);
    let mut grad = Tensor4::zeros(probs.n, probs.c, probs.h, probs.w);
    let mut total = 0.0f64;
    for i in 0..probs.n {
        let (p, g) = (probs.sample(i), grad.sample_mut(i));
        for px in 0..hw {
            let j = target[i * hw + px] as usize * hw + px;
            let v = p[j].max(floor);
            total -= v.to_f64().expect("finite").ln();
            if p[j] >= floor {
                g[j] = scale / v;
            }
        }
    }
    Ok((total / count, grad))
}

/// `1 - mean_c (2·Σpt + s)/(Σp + Σt + s)` over all classes `0..C`,
/// sums taken over the whole batch.
pub fn soft_dice<T: Real>(probs: &Tensor4<T>, target: &[u8]) -> Result<(f64, Tensor4<T>)> {
    check_target(probs, target)?;
    let (n, c, hw) = (probs.n, probs.c, probs.plane());
    let mut inter = vec![0.0f64; c];
    let mut psum = vec![0.0f64; c];
    let mut tsum = vec![0.0f64; c];
    for i in 0..n {
        let p = probs.sample(i);
        for px in 0..hw {
            let t = target[i * hw + px] as usize;
            tsum[t] += 1.0;
            inter[t] += p[t * hw + px].to_f64().expect("finite");
            for (ch, s) in psum.iter_mut().enumerate() {
                *s += p[ch * hw + px].to_f64().expect("finite");
            }
        }
    }
    let k = c as f64;
    let mut loss = 1.0;
    // dL/dp = -(1/k)·(2t·den - num)/den²
    let mut coef_t = vec![T::zero(); c];
    let mut coef_p = vec![T::zero(); c];
    for ch in 0..c {
        let num = 2.0 * inter[ch] + DICE_SMOOTH;
        let den = psum[ch] + tsum[ch] + DICE_SMOOTH;
        loss -= num / den / k;
        coef_t[ch] = T::from_f64(-2.0 / (den * k));
        coef_p[ch] = T::from_f64(num / (den * den * k));
    }
    let mut grad = Tensor4::zeros(n, c, probs.h, probs.w);
    for i in 0..n {
        let g = grad.sample_mut(i);
        for ch in 0..c {
            g[ch * hw..(ch + 1) * hw].fill(coef_p[ch]);
        }
        for px in 0..hw {
            let t = target[i * hw + px] as usize;
            g[t * hw + px] += coef_t[t];
        }
    }
    Ok((loss, grad))
}

pub fn loss_and_grad<T: Real>(kind: LossKind, probs: &Tensor4<T>, target: &[u8]) -> Result<(f64, Tensor4<T>)> {
    match kind {
        LossKind::CrossEntropy => cross_entropy(probs, target),
        LossKind::SoftDice => soft_dice(probs, target),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(target: &[u8], c: usize) -> Tensor4<f64> {
        let hw = target.len();
        let mut t = Tensor4::zeros(1, c, 1, hw);
        for (px, &v) in target.iter().enumerate() {
            t.data[v as usize * hw + px] = 1.0;
        }
        t
    }

    #[test]
    fn cross_entropy_examples() {
        let target = [0u8, 1, 1, 0];
        assert_eq!(cross_entropy(&one_hot(&target, 2), &target).unwrap().0, 0.0);
        let uniform = Tensor4::from_vec(1, 2, 1, 4, vec![0.5f64; 8]).unwrap();
        let (l, _) = cross_entropy(&uniform, &target).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(
            cross_entropy(&uniform, &[0, 2, 0, 0]),
            Err(Error::InvalidLabel(2))
        ));
    }

    #[test]
    fn soft_dice_examples() {
        let target = [0u8, 1, 2, 3, 1, 2, 3, 0];
        let (l, _) = soft_dice(&one_hot(&target, 4), &target).unwrap();
        assert!(l.abs() < 1e-12);
        // every foreground pixel predicted as some other foreground class
        let shifted: Vec<u8> = target.iter().map(|&t| if t == 0 { 0 } else { t % 3 + 1 }).collect();
        let (l, _) = soft_dice(&one_hot(&shifted, 4), &target).unwrap();
        // background exact, each foreground class scores s/(2+2+s) with s = 1
        assert!((l - 0.6).abs() < 1e-12);
        assert!(l <= 1.0);
    }

    #[test]
    fn loss_kind_parses() {
        assert_eq!("soft-dice".parse::<LossKind>().unwrap(), LossKind::SoftDice);
        assert_eq!("CE".parse::<LossKind>().unwrap(), LossKind::CrossEntropy);
        assert!("l2".parse::<LossKind>().is_err());
    }
}
