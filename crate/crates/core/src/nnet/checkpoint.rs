//! Checkpoint file: the line `UNET1`, a config line
//! `kind=<f32|f64> depth= base= in= classes= params= stats=`, then the
//! parameters and running statistics as little-endian floats in layer order.

use std::fs;
use std::path::Path;

use super::unet::{UNet, UNetConfig};
use super::Real;
use crate::error::{Error, Result};

pub const MAGIC: &str = "UNET1";

pub fn to_bytes<T: Real>(net: &UNet<T>) -> Vec<u8> {
    let c = net.config();
    let mut out = format!(
        "{MAGIC}\nkind={} depth={} base={} in={} classes={} params={} stats={}\n",
        T::NAME,
        c.depth,
        c.base_channels,
        c.in_channels,
        c.out_classes,
        net.params.len(),
        net.stats.len()
    )
    .into_bytes();
    out.reserve((net.params.len() + net.stats.len()) * T::BYTES);
    for &v in net.params.iter().chain(&net.stats) {
        v.to_le(&mut out);
    }
    out
}

fn split_line(bytes: &[u8]) -> Result<(&str, &[u8])> {
    let end = bytes
        .iter()
        .take(256)
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Header("checkpoint header line missing".into()))?;
    let line = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::Header("checkpoint header is not text".into()))?;
    Ok((line, &bytes[end + 1..]))
}

fn decode<T: Real>(payload: &[u8], count: usize, width: usize) -> Vec<T> {
    payload[..count * width]
        .chunks_exact(width)
        .map(|c| {
            if width == 4 {
                T::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            } else {
                T::from_f64(f64::from_le_bytes(c.try_into().expect("8 bytes")))
            }
        })
        .collect()
}

/// Reads a checkpoint of either precision into a network of precision `T`.
pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<UNet<T>> {
    let (magic, rest) = split_line(bytes)?;
    if magic != MAGIC {
        return Err(Error::Header(format!("bad checkpoint magic '{magic}'")));
    }
    let (line, payload) = split_line(rest)?;
    let mut kind = None;
    let mut nums = std::collections::HashMap::new();
    for field in line.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| Error::Header(format!("malformed checkpoint field '{field}'")))?;
        if k == "kind" {
            kind = Some(v.to_string());
        } else {
            let n: usize = v
                .parse()
                .map_err(|_| Error::Header(format!("bad value in checkpoint field '{field}'")))?;
            nums.insert(k.to_string(), n);
        }
    }
    let get = |k: &str| {
        nums.get(k)
            .copied()
            .ok_or_else(|| Error::Header(format!("checkpoint field '{k}' missing")))
    };
    let width = match kind.as_deref() {
        Some("f32") => 4,
        Some("f64") => 8,
        Some(other) => return Err(Error::UnknownKind(other.to_string())),
        None => return Err(Error::Header("checkpoint field 'kind' missing".into())),
    };
    let config = UNetConfig {
        depth: get("depth")?,
        base_channels: get("base")?,
        in_channels: get("in")?,
        out_classes: get("classes")?,
    };
    let (np, ns) = (get("params")?, get("stats")?);
    let expected = (np + ns) * width;
    if payload.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            found: payload.len(),
        });
    }
    let params = decode(payload, np, width);
    let stats = decode(&payload[np * width..], ns, width);
    UNet::from_parts(config, params, stats)
}

pub fn save<T: Real>(net: &UNet<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(net)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<UNet<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// `epoch,loss` with 1-based epochs.
pub fn loss_history_csv(history: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in history.iter().enumerate() {
        s.push_str(&format!("{},{}\n", i + 1, l));
    }
    s
}

pub fn parse_loss_history(text: &str) -> Result<Vec<f64>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("epoch,loss") {
        return Err(Error::Header("loss history must start with 'epoch,loss'".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .nth(1)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Header(format!("bad loss history row '{l}'")))
        })
        .collect()
}
