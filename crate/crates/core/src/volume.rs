//! Intensity and label volumes, 2D slices, and the `.mvol` file format.
//!
//! A `.mvol` file is a 64-byte ASCII header line
//!
//! ```text
//! MVOL1 kind=<f32|u8> w=<int> h=<int> d=<int> sx=<mm> sy=<mm> sz=<mm>
//! ```
//!
//! padded with spaces and terminated by `\n` at byte 63, followed by the raw
//! little-endian payload. Voxels are stored row-major within a slice and
//! slice-major along depth, so index = `(z * h + y) * w + x`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tissue::{TissueClass, NUM_CLASSES};

pub const HEADER_LEN: usize = 64;
const MAGIC: &str = "MVOL1";

/// Scalar types that can live in a volume file.
pub trait Voxel: Copy + Default + PartialEq + Send + Sync + std::fmt::Debug + 'static {
    const KIND: &'static str;
    const WIDTH: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    fn validate(self) -> Result<()> {
        Ok(())
    }
}

impl Voxel for f32 {
    const KIND: &'static str = "f32";
    const WIDTH: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Voxel for u8 {
    const KIND: &'static str = "u8";
    const WIDTH: usize = 1;

    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }

    fn read_le(bytes: &[u8]) -> Self {
        bytes[0]
    }

    fn validate(self) -> Result<()> {
        if (self as usize) < NUM_CLASSES {
            Ok(())
        } else {
            Err(Error::InvalidLabel(self))
        }
    }
}

/// Voxel grid dimensions with physical spacing in mm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub width: usize,
    pub height: usize,
    pub depth: usize,
    pub spacing: [f64; 3],
}

impl Geometry {
    pub fn new(width: usize, height: usize, depth: usize, spacing: [f64; 3]) -> Result<Self> {
        if width == 0 || height == 0 || depth == 0 {
            return Err(Error::Geometry(format!(
                "dimensions must be positive, got {width}x{height}x{depth}"
            )));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Geometry(format!(
                "spacing must be strictly positive, got {spacing:?}"
            )));
        }
        Ok(Self {
            width,
            height,
            depth,
            spacing,
        })
    }

    pub fn len(&self) -> usize {
        self.width * self.height * self.depth
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice_len(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.height + y) * self.width + x
    }

    /// Physical volume of one voxel in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    pub fn in_plane_spacing(&self) -> [f64; 2] {
        [self.spacing[0], self.spacing[1]]
    }
}

/// Dense 3D grid. See [`IntensityVolume`] and [`LabelVolume`].
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    geometry: Geometry,
    data: Vec<T>,
}

pub type IntensityVolume = Volume<f32>;
pub type LabelVolume = Volume<u8>;

impl<T: Voxel> Volume<T> {
    pub fn new(geometry: Geometry, data: Vec<T>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::SizeMismatch {
                expected: geometry.len(),
                found: data.len(),
            });
        }
        for v in &data {
            v.validate()?;
        }
        Ok(Self { geometry, data })
    }

    pub fn filled(geometry: Geometry, value: T) -> Result<Self> {
        Self::new(geometry, vec![value; geometry.len()])
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.geometry.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: T) -> Result<()> {
        value.validate()?;
        let i = self.geometry.index(x, y, z);
        self.data[i] = value;
        Ok(())
    }

    /// Contiguous view of slice `z`.
    pub fn slice_data(&self, z: usize) -> Result<&[T]> {
        if z >= self.geometry.depth {
            return Err(Error::OutOfRange {
                index: z,
                len: self.geometry.depth,
            });
        }
        let n = self.geometry.slice_len();
        Ok(&self.data[z * n..(z + 1) * n])
    }

    pub fn get_slice(&self, z: usize) -> Result<Slice2D<T>> {
        let data = self.slice_data(z)?.to_vec();
        Ok(Slice2D {
            width: self.geometry.width,
            height: self.geometry.height,
            spacing: self.geometry.in_plane_spacing(),
            data,
        })
    }

    /// Overwrite slice `z` with `slice`, which must match in-plane geometry.
    pub fn put_slice(&mut self, z: usize, slice: &Slice2D<T>) -> Result<()> {
        if z >= self.geometry.depth {
            return Err(Error::OutOfRange {
                index: z,
                len: self.geometry.depth,
            });
        }
        if slice.width != self.geometry.width || slice.height != self.geometry.height {
            return Err(Error::Geometry(format!(
                "slice {}x{} does not fit volume {}x{}",
                slice.width, slice.height, self.geometry.width, self.geometry.height
            )));
        }
        for v in &slice.data {
            v.validate()?;
        }
        let n = self.geometry.slice_len();
        self.data[z * n..(z + 1) * n].copy_from_slice(&slice.data);
        Ok(())
    }

    pub fn slices(&self) -> impl Iterator<Item = Slice2D<T>> + '_ {
        (0..self.geometry.depth).map(move |z| self.get_slice(z).expect("z in range"))
    }

    pub fn from_slices(spacing_z: f64, slices: &[Slice2D<T>]) -> Result<Self> {
        let first = slices.first().ok_or_else(|| Error::Geometry("no slices".into()))?;
        let geometry = Geometry::new(
            first.width,
            first.height,
            slices.len(),
            [first.spacing[0], first.spacing[1], spacing_z],
        )?;
        let mut data = Vec::with_capacity(geometry.len());
        for s in slices {
            if s.width != first.width || s.height != first.height {
                return Err(Error::Geometry("slices differ in size".into()));
            }
            data.extend_from_slice(&s.data);
        }
        Self::new(geometry, data)
    }

    fn header(&self) -> Result<[u8; HEADER_LEN]> {
        let g = &self.geometry;
        let text = format!(
            "{MAGIC} kind={} w={} h={} d={} sx={} sy={} sz={}",
            T::KIND,
            g.width,
            g.height,
            g.depth,
            g.spacing[0],
            g.spacing[1],
            g.spacing[2]
        );
        if text.len() > HEADER_LEN - 1 {
            return Err(Error::Header(format!(
                "header text is {} bytes, limit {}",
                text.len(),
                HEADER_LEN - 1
            )));
        }
        let mut out = [b' '; HEADER_LEN];
        out[..text.len()].copy_from_slice(text.as_bytes());
        out[HEADER_LEN - 1] = b'\n';
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        for v in &self.data {
            v.validate()?;
        }
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * T::WIDTH);
        out.extend_from_slice(&self.header()?);
        for v in &self.data {
            v.write_le(&mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (kind, geometry) = parse_header(bytes)?;
        if kind != T::KIND {
            return Err(Error::UnknownKind(format!("{kind} (expected {})", T::KIND)));
        }
        decode_payload(geometry, &bytes[HEADER_LEN..])
    }
}

fn decode_payload<T: Voxel>(geometry: Geometry, payload: &[u8]) -> Result<Volume<T>> {
    let expected = geometry.len() * T::WIDTH;
    if payload.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            found: payload.len(),
        });
    }
    let data = payload.chunks_exact(T::WIDTH).map(T::read_le).collect();
    Volume::new(geometry, data)
}

fn parse_header(bytes: &[u8]) -> Result<(String, Geometry)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Header(format!(
            "file is {} bytes, shorter than the header",
            bytes.len()
        )));
    }
    if bytes[HEADER_LEN - 1] != b'\n' {
        return Err(Error::Header("header not newline-terminated at byte 63".into()));
    }
    let text =
        std::str::from_utf8(&bytes[..HEADER_LEN - 1]).map_err(|_| Error::Header("header is not ASCII".into()))?;
    let mut fields = text.split_ascii_whitespace();
    if fields.next() != Some(MAGIC) {
        return Err(Error::Header("missing MVOL1 magic".into()));
    }

    let mut kind = None;
    let (mut w, mut h, mut d) = (None, None, None);
    let mut spacing = [None; 3];
    for field in fields {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| Error::Header(format!("field `{field}` is not key=value")))?;
        let int = || {
            value
                .parse::<usize>()
                .map_err(|_| Error::Header(format!("bad integer for {key}: `{value}`")))
        };
        let real = || {
            value
                .parse::<f64>()
                .map_err(|_| Error::Header(format!("bad number for {key}: `{value}`")))
        };
        match key {
            "kind" => kind = Some(value.to_string()),
            "w" => w = Some(int()?),
            "h" => h = Some(int()?),
            "d" => d = Some(int()?),
            "sx" => spacing[0] = Some(real()?),
            "sy" => spacing[1] = Some(real()?),
            "sz" => spacing[2] = Some(real()?),
            _ => return Err(Error::Header(format!("unknown field `{key}`"))),
        }
    }
    let missing = |name: &str| Error::Header(format!("missing field `{name}`"));
    let kind = kind.ok_or_else(|| missing("kind"))?;
    let geometry = Geometry::new(
        w.ok_or_else(|| missing("w"))?,
        h.ok_or_else(|| missing("h"))?,
        d.ok_or_else(|| missing("d"))?,
        [
            spacing[0].ok_or_else(|| missing("sx"))?,
            spacing[1].ok_or_else(|| missing("sy"))?,
            spacing[2].ok_or_else(|| missing("sz"))?,
        ],
    )
    .map_err(|e| Error::Header(e.to_string()))?;
    Ok((kind, geometry))
}

/// A volume read from disk whose payload kind is only known at runtime.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyVolume {
    Intensity(IntensityVolume),
    Label(LabelVolume),
}

impl AnyVolume {
    pub fn geometry(&self) -> &Geometry {
        match self {
            AnyVolume::Intensity(v) => v.geometry(),
            AnyVolume::Label(v) => v.geometry(),
        }
    }
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<AnyVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (kind, geometry) = parse_header(&bytes)?;
    match kind.as_str() {
        "f32" => decode_payload(geometry, &bytes[HEADER_LEN..]).map(AnyVolume::Intensity),
        "u8" => decode_payload(geometry, &bytes[HEADER_LEN..]).map(AnyVolume::Label),
        other => Err(Error::UnknownKind(other.to_string())),
    }
}

pub fn load_intensity(path: impl AsRef<Path>) -> Result<IntensityVolume> {
    match load_volume(path)? {
        AnyVolume::Intensity(v) => Ok(v),
        AnyVolume::Label(_) => Err(Error::UnknownKind("u8 (expected f32)".into())),
    }
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    match load_volume(path)? {
        AnyVolume::Label(v) => Ok(v),
        AnyVolume::Intensity(_) => Err(Error::UnknownKind("f32 (expected u8)".into())),
    }
}

pub fn save_volume<T: Voxel>(volume: &Volume<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = volume.to_bytes()?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// A single 2D slice with in-plane spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice2D<T> {
    pub width: usize,
    pub height: usize,
    pub spacing: [f64; 2],
    pub data: Vec<T>,
}

impl<T: Copy> Slice2D<T> {
    pub fn new(width: usize, height: usize, spacing: [f64; 2], data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::SizeMismatch {
                expected: width * height,
                found: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            spacing,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, spacing: [f64; 2], value: T) -> Self {
        Self {
            width,
            height,
            spacing,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    pub fn same_shape<U>(&self, other: &Slice2D<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Same geometry, new payload.
    pub fn with_data<U>(&self, data: Vec<U>) -> Slice2D<U> {
        debug_assert_eq!(data.len(), self.data.len());
        Slice2D {
            width: self.width,
            height: self.height,
            spacing: self.spacing,
            data,
        }
    }

    /// Zero-pad (or `fill`-pad) on the right and bottom to `width` x `height`.
    pub fn padded(&self, width: usize, height: usize, fill: T) -> Slice2D<T> {
        assert!(width >= self.width && height >= self.height);
        let mut data = vec![fill; width * height];
        for y in 0..self.height {
            data[y * width..y * width + self.width].copy_from_slice(&self.data[y * self.width..(y + 1) * self.width]);
        }
        Slice2D {
            width,
            height,
            spacing: self.spacing,
            data,
        }
    }
}

pub const NORMALIZED_MAX: f32 = 1023.0;

/// Affine rescale to `[0, 1023]`. Constant slices map to all zeros.
pub fn normalize_slice(slice: &Slice2D<f32>) -> Slice2D<f32> {
    let values = normalize_values(slice.data.iter().map(|&v| v as f64));
    slice.with_data(values)
}

/// Normalize an arbitrary stream of values (computed in f64) to `[0, 1023]` f32.
pub(crate) fn normalize_values(values: impl Iterator<Item = f64> + Clone) -> Vec<f32> {
    let (min, max) = values
        .clone()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let range = max - min;
    if !(range > 0.0) || !range.is_finite() {
        return values.map(|_| 0.0).collect();
    }
    let scale = NORMALIZED_MAX as f64 / range;
    values.map(|v| ((v - min) * scale) as f32).collect()
}

/// Binary PGM (P5) with intensities linearly rescaled to 0..=255.
pub fn write_pgm(slice: &Slice2D<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (min, max) = slice
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = max - min;
    let mut out = format!("P5\n{} {}\n255\n", slice.width, slice.height).into_bytes();
    out.extend(slice.data.iter().map(|&v| {
        if range > 0.0 {
            (((v - min) / range) * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Binary PPM (P6) using the fixed tissue palette.
pub fn write_label_ppm(slice: &Slice2D<u8>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("P6\n{} {}\n255\n", slice.width, slice.height).into_bytes();
    for &code in &slice.data {
        out.extend_from_slice(&TissueClass::from_code(code)?.color());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
