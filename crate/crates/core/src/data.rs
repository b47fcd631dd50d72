//! Seeded synthetic datasets and the `RNL1` binary format.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! "RNL1"  u32 kind (0 = vector, 1 = grid)  u32 class_count  u32 sample_count
//! vector: u32 dim            grid: u32 height  u32 width  u32 channels
//! f32 payload[sample_count * sample_len]   u16 labels[sample_count]
//! ```
//!
//! Generators round every value to `f32` so a save/load round trip is exact.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perturb::{apply_keyed, Grid, PerturbationSpec};
use crate::rng::{derive_seed, NoiseStream};

const MAGIC: [u8; 4] = *b"RNL1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SampleKind {
    Vector { dim: usize },
    Grid(Grid),
}

impl SampleKind {
    pub fn sample_len(&self) -> usize {
        match self {
            Self::Vector { dim } => *dim,
            Self::Grid(g) => g.len(),
        }
    }

    pub fn grid(&self) -> Option<&Grid> {
        match self {
            Self::Grid(g) => Some(g),
            Self::Vector { .. } => None,
        }
    }
}

/// Labelled samples of one shape, stored as a flat row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    kind: SampleKind,
    class_count: usize,
    values: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(kind: SampleKind, class_count: usize, values: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let len = kind.sample_len();
        if len == 0 {
            return Err(Error::InvalidArgument("samples must have at least one value".into()));
        }
        if values.len() != labels.len() * len {
            return Err(Error::Dimension(format!(
                "{} values for {} samples of length {}",
                values.len(),
                labels.len(),
                len
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: class_count,
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset values".into()));
        }
        Ok(Self {
            kind,
            class_count,
            values,
            labels,
        })
    }

    pub fn kind(&self) -> SampleKind {
        self.kind
    }

    pub fn grid(&self) -> Option<&Grid> {
        self.kind.grid()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.kind.sample_len()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let values = indices.iter().flat_map(|&i| self.sample(i).iter().copied()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset {
            kind: self.kind,
            class_count: self.class_count,
            values,
            labels,
        }
    }

    /// Sample indices per class, ascending.
    pub fn indices_by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in self.labels.iter().enumerate() {
            out.entry(y).or_default().push(i);
        }
        out
    }

    /// Copy with every sample perturbed by its own `(seed, index)` stream.
    pub fn perturbed(&self, spec: &PerturbationSpec, seed: u64) -> Result<Dataset> {
        let mut values = Vec::with_capacity(self.values.len());
        for i in 0..self.len() {
            values.extend(apply_keyed(spec, self.sample(i), self.grid(), seed, i as u64)?);
        }
        Ok(Dataset {
            values,
            ..self.clone()
        })
    }

    /// Splits every class so that `ratio` of it lands in the first part.
    pub fn stratified_split(&self, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::InvalidArgument(format!("split ratio {ratio} outside [0, 1]")));
        }
        let (mut first, mut second) = (Vec::new(), Vec::new());
        for (c, mut idx) in self.indices_by_class() {
            let mut rng = NoiseStream::keyed(derive_seed(seed, 0x5EED_5911), c as u64);
            for k in (1..idx.len()).rev() {
                idx.swap(k, rng.below(k + 1));
            }
            let take = (ratio * idx.len() as f64).round() as usize;
            first.extend_from_slice(&idx[..take]);
            second.extend_from_slice(&idx[take..]);
        }
        first.sort_unstable();
        second.sort_unstable();
        Ok((self.subset(&first), self.subset(&second)))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.class_count > u16::MAX as usize + 1 {
            return Err(Error::InvalidArgument("too many classes for u16 labels".into()));
        }
        let u32_of = |v: usize| {
            u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit the u32 header")))
        };
        let mut out = Vec::with_capacity(32 + self.values.len() * 4 + self.labels.len() * 2);
        out.extend_from_slice(&MAGIC);
        let (kind, extents) = match self.kind {
            SampleKind::Vector { dim } => (0u32, vec![dim]),
            SampleKind::Grid(g) => (1u32, vec![g.height, g.width, g.channels]),
        };
        out.extend_from_slice(&kind.to_le_bytes());
        out.extend_from_slice(&u32_of(self.class_count)?.to_le_bytes());
        out.extend_from_slice(&u32_of(self.len())?.to_le_bytes());
        for e in extents {
            out.extend_from_slice(&u32_of(e)?.to_le_bytes());
        }
        for &v in &self.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &y in &self.labels {
            out.extend_from_slice(&(y as u16).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::MalformedHeader(format!("{} bytes is shorter than the magic", bytes.len())));
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("length checked");
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let mut pos = 4;
        let mut word = |what: &str| -> Result<usize> {
            let b = bytes
                .get(pos..pos + 4)
                .ok_or_else(|| Error::MalformedHeader(format!("header ends before {what}")))?;
            pos += 4;
            Ok(u32::from_le_bytes(b.try_into().expect("slice of four")) as usize)
        };
        let kind_tag = word("kind")?;
        let class_count = word("class count")?;
        let count = word("sample count")?;
        let kind = match kind_tag {
            0 => SampleKind::Vector { dim: word("dim")? },
            1 => {
                let (h, w, c) = (word("height")?, word("width")?, word("channels")?);
                SampleKind::Grid(Grid::new(h, w, c).map_err(|e| Error::MalformedHeader(e.to_string()))?)
            }
            other => return Err(Error::MalformedHeader(format!("unknown sample kind {other}"))),
        };
        let len = kind.sample_len();
        if len == 0 || class_count == 0 {
            return Err(Error::MalformedHeader("zero extent or class count".into()));
        }
        let expected = count
            .checked_mul(len)
            .and_then(|v| v.checked_mul(4))
            .and_then(|v| v.checked_add(count * 2))
            .ok_or_else(|| Error::MalformedHeader("declared payload overflows".into()))?;
        let body = &bytes[pos..];
        if body.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                found: body.len(),
            });
        }
        let (payload, label_bytes) = body.split_at(count * len * 4);
        let values = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("chunk of four")) as f64)
            .collect();
        let labels = label_bytes
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes(b.try_into().expect("chunk of two")) as usize)
            .collect();
        Dataset::new(kind, class_count, values, labels)
    }

    /// One row per sample: `label,v0,v1,…` after a header line.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let header: Vec<String> = std::iter::once("label".to_string())
            .chain((0..self.sample_len()).map(|k| format!("v{k}")))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.len() {
            let mut line = self.labels[i].to_string();
            for v in self.sample(i) {
                line.push(',');
                line.push_str(&v.to_string());
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

fn round32(v: f64) -> f64 {
    v as f32 as f64
}

/// Isotropic Gaussian classes with means `(4·spread/√2)·e_c`, so every pair of
/// means is `4·spread` apart.
pub fn gen_blobs(class_count: usize, n_per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if class_count < 2 || n_per_class == 0 {
        return Err(Error::InvalidArgument(format!(
            "blobs need >= 2 classes and >= 1 sample each, got {class_count} x {n_per_class}"
        )));
    }
    if dim < class_count {
        return Err(Error::InvalidArgument(format!(
            "blobs place class means on axes, so dim ({dim}) must be >= class count ({class_count})"
        )));
    }
    if !(spread >= 0.0) || !spread.is_finite() {
        return Err(Error::InvalidArgument(format!("spread must be >= 0, got {spread}")));
    }
    let scale = 4.0 * spread / 2f64.sqrt();
    let mut values = Vec::with_capacity(class_count * n_per_class * dim);
    let mut labels = Vec::with_capacity(class_count * n_per_class);
    for c in 0..class_count {
        for k in 0..n_per_class {
            let mut rng = NoiseStream::keyed(seed, (c * n_per_class + k) as u64);
            for j in 0..dim {
                let mean = if j == c { scale } else { 0.0 };
                values.push(round32(mean + spread * rng.normal()));
            }
            labels.push(c);
        }
    }
    Dataset::new(SampleKind::Vector { dim }, class_count, values, labels)
}

/// Concentric 2-D annuli of radius `1, 2, …, C` with radial jitter uniform in
/// `±0.1`.
pub fn gen_rings(class_count: usize, n_per_class: usize, seed: u64) -> Result<Dataset> {
    if class_count == 0 || n_per_class == 0 {
        return Err(Error::InvalidArgument("rings need >= 1 class and >= 1 sample".into()));
    }
    let mut values = Vec::with_capacity(class_count * n_per_class * 2);
    let mut labels = Vec::with_capacity(class_count * n_per_class);
    for c in 0..class_count {
        for k in 0..n_per_class {
            let mut rng = NoiseStream::keyed(seed, (c * n_per_class + k) as u64);
            let angle = rng.uniform(0.0, 2.0 * PI);
            let r = (c + 1) as f64 + rng.uniform(-0.1, 0.1);
            values.push(round32(r * angle.cos()));
            values.push(round32(r * angle.sin()));
            labels.push(c);
        }
    }
    Dataset::new(SampleKind::Vector { dim: 2 }, class_count, values, labels)
}

/// Noise-free pattern of texture class `c` on an `h × w` grid, values in `[0.1, 0.9]`.
///
/// Classes cycle through horizontal stripes, vertical stripes, diagonal
/// stripes and checkerboards, with frequency growing every four classes.
pub fn texture_pattern(c: usize, h: usize, w: usize) -> Vec<f64> {
    let f = (1 + c / 4) as f64;
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for col in 0..w {
            let (y, x) = (r as f64 / h as f64, col as f64 / w as f64);
            let s = match c % 4 {
                0 => (2.0 * PI * f * y).sin(),
                1 => (2.0 * PI * f * x).sin(),
                2 => (2.0 * PI * f * (x + y)).sin(),
                _ => (2.0 * PI * f * x).sin() * (2.0 * PI * f * y).sin(),
            };
            out.push(0.5 + 0.4 * s);
        }
    }
    out
}

/// Single-channel textures: class pattern plus per-pixel Gaussian jitter (σ = 0.1).
pub fn gen_textures(class_count: usize, n_per_class: usize, h: usize, w: usize, seed: u64) -> Result<Dataset> {
    gen_textures_with_jitter(class_count, n_per_class, h, w, 0.1, seed)
}

pub fn gen_textures_with_jitter(
    class_count: usize,
    n_per_class: usize,
    h: usize,
    w: usize,
    jitter: f64,
    seed: u64,
) -> Result<Dataset> {
    if class_count < 2 || n_per_class == 0 || h < 8 || w < 8 {
        return Err(Error::InvalidArgument(format!(
            "textures need >= 2 classes, >= 1 sample and an 8x8 grid, got {class_count} x {n_per_class} on {h}x{w}"
        )));
    }
    if !(jitter >= 0.0) {
        return Err(Error::InvalidArgument(format!("jitter must be >= 0, got {jitter}")));
    }
    let grid = Grid::new(h, w, 1)?;
    let mut values = Vec::with_capacity(class_count * n_per_class * h * w);
    let mut labels = Vec::with_capacity(class_count * n_per_class);
    for c in 0..class_count {
        let pattern = texture_pattern(c, h, w);
        for k in 0..n_per_class {
            let mut rng = NoiseStream::keyed(seed, (c * n_per_class + k) as u64);
            values.extend(pattern.iter().map(|p| round32(p + jitter * rng.normal())));
            labels.push(c);
        }
    }
    Dataset::new(SampleKind::Grid(grid), class_count, values, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_spread_collapses_to_means() {
        let d = gen_blobs(3, 4, 3, 0.0, 1).unwrap();
        for i in 0..d.len() {
            assert!(d.sample(i).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn blob_means_are_four_spreads_apart() {
        let d = gen_blobs(3, 1, 3, 0.0, 1).unwrap();
        assert_eq!(d.len(), 3);
        let d = gen_blobs(2, 1, 2, 1.0, 1).unwrap();
        assert_eq!(d.class_count(), 2);
        assert!(gen_blobs(4, 2, 3, 1.0, 0).is_err());
        assert!(gen_blobs(1, 2, 3, 1.0, 0).is_err());
    }

    #[test]
    fn zero_jitter_textures_repeat_the_pattern() {
        let d = gen_textures_with_jitter(3, 4, 8, 8, 0.0, 2).unwrap();
        for i in 0..d.len() {
            let c = d.labels()[i];
            let p: Vec<f64> = texture_pattern(c, 8, 8).into_iter().map(round32).collect();
            assert_eq!(d.sample(i), p.as_slice());
        }
        assert!(gen_textures(2, 1, 7, 8, 0).is_err());
    }

    #[test]
    fn header_errors_are_distinct() {
        let d = gen_rings(2, 3, 0).unwrap();
        let bytes = d.to_bytes().unwrap();
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), d);

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&magic), Err(Error::BadMagic { .. })));
        assert!(matches!(
            Dataset::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(Dataset::from_bytes(&bytes[..10]), Err(Error::MalformedHeader(_))));
        let mut kind = bytes.clone();
        kind[4] = 9;
        assert!(matches!(Dataset::from_bytes(&kind), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn stratified_split_keeps_proportions() {
        let d = gen_blobs(3, 11, 3, 1.0, 4).unwrap();
        let (a, b) = d.stratified_split(0.7, 9).unwrap();
        assert_eq!(a.len() + b.len(), d.len());
        for (_, idx) in a.indices_by_class() {
            assert!((idx.len() as f64 - 7.7).abs() <= 1.0);
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let d = gen_rings(2, 2, 0).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "label,v0,v1");
        assert_eq!(lines.len(), 5);
    }
}
