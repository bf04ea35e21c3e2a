//! On-disk containers.
//!
//! `SCV1` holds one subject per file:
//!
//! ```text
//! "SCV1" | version u8 | height u32 LE | width u32 LE | presence u8 | grids...
//! ```
//!
//! Each present grid (in bit order: image, labels, eval_mask,
//! reference_posterior, logits, probability) is `height * width` f64 LE
//! values in row-major order. The subject id is the file stem.
//!
//! `SCW1` holds network or calibrator parameters:
//!
//! ```text
//! "SCW1" | version u8 | kind u8 | fingerprint u64 LE | shape u32 LE | count u32 LE | values f64 LE... | [frozen u8 x 4]
//! ```
//!
//! `shape` is the layer count for networks, 2 for Platt and `k` for aux-conv.
//! The fingerprint ties a file to the architecture that wrote it.

use std::fs;
use std::path::{Path, PathBuf};

use segcal::calib::{AuxConvParams, PlattParams};
use segcal::net::{architecture_fingerprint, NetParams, LAYER_COUNT};
use segcal::{Grid, SubjectF64};
use thiserror::Error;

pub const DATASET_MAGIC: &[u8; 4] = b"SCV1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCW1";
pub const FORMAT_VERSION: u8 = 1;
pub const SUBJECT_EXT: &str = "scv";
pub const CHECKPOINT_EXT: &str = "scw";

const GRID_IMAGE: u8 = 1 << 0;
const GRID_LABELS: u8 = 1 << 1;
const GRID_MASK: u8 = 1 << 2;
const GRID_POSTERIOR: u8 = 1 << 3;
const GRID_LOGITS: u8 = 1 << 4;
const GRID_PROBABILITY: u8 = 1 << 5;
const KNOWN_GRIDS: u8 = 0b11_1111;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("{path}: unsupported version {version}")]
    UnsupportedVersion { path: PathBuf, version: u8 },
    #[error("{path}: incompatible checkpoint: {message}")]
    Incompatible { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid subject: {source}")]
    Subject {
        path: PathBuf,
        #[source]
        source: segcal::Error,
    },
}

type Result<T> = std::result::Result<T, FormatError>;

fn malformed(path: &Path, message: impl Into<String>) -> FormatError {
    FormatError::Malformed {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(malformed(
                self.path,
                format!("truncated: needed {n} bytes at offset {}, file has {}", self.pos, self.buf.len()),
            ));
        };
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| malformed(self.path, "size overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(malformed(
                self.path,
                format!("{} trailing bytes after payload", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(malformed(
                self.path,
                format!("bad magic, expected {:?}", String::from_utf8_lossy(magic)),
            ));
        }
        let version = self.u8()?;
        if version != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion {
                path: self.path.to_path_buf(),
                version,
            });
        }
        Ok(())
    }
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// A subject plus an optional probability map (written by `predict`).
#[derive(Clone, Debug, PartialEq)]
pub struct StoredSubject {
    pub subject: SubjectF64,
    pub probability: Option<Grid>,
}

impl From<SubjectF64> for StoredSubject {
    fn from(subject: SubjectF64) -> Self {
        Self {
            subject,
            probability: None,
        }
    }
}

pub fn encode_subject(s: &StoredSubject) -> Vec<u8> {
    let sub = &s.subject;
    let (h, w) = sub.shape();
    let mut present = GRID_IMAGE | GRID_LABELS | GRID_MASK;
    if sub.reference_posterior.is_some() {
        present |= GRID_POSTERIOR;
    }
    if sub.logits.is_some() {
        present |= GRID_LOGITS;
    }
    if s.probability.is_some() {
        present |= GRID_PROBABILITY;
    }
    let mut out = Vec::with_capacity(14 + 8 * h * w * present.count_ones() as usize);
    out.extend_from_slice(DATASET_MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.push(present);
    for g in [Some(&sub.image), Some(&sub.labels), Some(&sub.eval_mask)]
        .into_iter()
        .chain([sub.reference_posterior.as_ref(), sub.logits.as_ref(), s.probability.as_ref()])
        .flatten()
    {
        put_f64s(&mut out, g.values());
    }
    out
}

pub fn decode_subject(id: &str, bytes: &[u8], path: &Path) -> Result<StoredSubject> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    r.header(DATASET_MAGIC)?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    if h == 0 || w == 0 {
        return Err(malformed(path, format!("zero grid dimension {h}x{w}")));
    }
    let present = r.u8()?;
    if present & !KNOWN_GRIDS != 0 {
        return Err(malformed(path, format!("unknown grid bits {present:#010b}")));
    }
    let required = GRID_IMAGE | GRID_LABELS | GRID_MASK;
    if present & required != required {
        return Err(malformed(path, "image, labels and eval_mask are required"));
    }
    let n = h.checked_mul(w).ok_or_else(|| malformed(path, "grid size overflow"))?;
    let mut grid = |bit: u8| -> Result<Option<Grid>> {
        if present & bit == 0 {
            return Ok(None);
        }
        let v = r.f64s(n)?;
        Ok(Some(Grid::from_vec(h, w, v).expect("dimensions checked")))
    };
    let image = grid(GRID_IMAGE)?.unwrap();
    let labels = grid(GRID_LABELS)?.unwrap();
    let mask = grid(GRID_MASK)?.unwrap();
    let posterior = grid(GRID_POSTERIOR)?;
    let logits = grid(GRID_LOGITS)?;
    let probability = grid(GRID_PROBABILITY)?;
    r.finish()?;

    let wrap = |source| FormatError::Subject {
        path: path.to_path_buf(),
        source,
    };
    let mut subject = SubjectF64::new(id, image, labels, mask).map_err(wrap)?;
    if let Some(q) = posterior {
        subject = subject.with_reference_posterior(q).map_err(wrap)?;
    }
    if let Some(z) = logits {
        subject = subject.with_logits(z).map_err(wrap)?;
    }
    if let Some(p) = &probability {
        if p.shape() != (h, w) || !p.is_probability() {
            return Err(malformed(path, "probability grid outside [0, 1]"));
        }
    }
    Ok(StoredSubject { subject, probability })
}

pub fn subject_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.{SUBJECT_EXT}"))
}

pub fn save_subject(dir: &Path, s: &StoredSubject) -> Result<PathBuf> {
    let path = subject_path(dir, &s.subject.id);
    fs::write(&path, encode_subject(s)).map_err(io_err(&path))?;
    Ok(path)
}

pub fn load_subject(path: &Path) -> Result<StoredSubject> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| malformed(path, "file name is not a valid subject id"))?;
    decode_subject(id, &bytes, path)
}

/// Writes every subject into `dir` (created if needed).
pub fn save_dataset<'a>(dir: &Path, subjects: impl IntoIterator<Item = &'a StoredSubject>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    subjects.into_iter().map(|s| save_subject(dir, s)).collect()
}

/// Loads every `.scv` file in `dir`, ordered by subject id.
pub fn load_dataset(dir: &Path) -> Result<Vec<StoredSubject>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .map_err(io_err(dir))?;
    paths.retain(|p| p.extension().is_some_and(|e| e == SUBJECT_EXT));
    paths.sort();
    if paths.is_empty() {
        return Err(malformed(dir, "no .scv subject files"));
    }
    paths.iter().map(|p| load_subject(p)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum CheckpointKind {
    Net = 1,
    Platt = 2,
    AuxConv = 3,
}

impl CheckpointKind {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(Self::Net),
            2 => Some(Self::Platt),
            3 => Some(Self::AuxConv),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Net => "network weights",
            Self::Platt => "Platt parameters",
            Self::AuxConv => "aux-conv parameters",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    Net(NetParams<f64>),
    Platt(PlattParams<f64>),
    AuxConv(AuxConvParams<f64>),
}

impl Checkpoint {
    pub fn kind(&self) -> CheckpointKind {
        match self {
            Checkpoint::Net(_) => CheckpointKind::Net,
            Checkpoint::Platt(_) => CheckpointKind::Platt,
            Checkpoint::AuxConv(_) => CheckpointKind::AuxConv,
        }
    }
}

fn platt_fingerprint() -> u64 {
    fnv(b"platt:a,b")
}

fn aux_fingerprint(k: u32) -> u64 {
    fnv(format!("aux-conv:k={k}:kernel,bias").as_bytes())
}

fn fnv(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let (fingerprint, shape, values, frozen) = match c {
        Checkpoint::Net(p) => (
            architecture_fingerprint(),
            LAYER_COUNT as u32,
            p.flatten(),
            Some(p.frozen_flags()),
        ),
        Checkpoint::Platt(p) => (platt_fingerprint(), 2, vec![p.a, p.b], None),
        Checkpoint::AuxConv(p) => {
            let mut v = p.kernel.clone();
            v.push(p.bias);
            (aux_fingerprint(p.k as u32), p.k as u32, v, None)
        }
    };
    let mut out = Vec::with_capacity(26 + 8 * values.len() + 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(FORMAT_VERSION);
    out.push(c.kind() as u8);
    out.extend_from_slice(&fingerprint.to_le_bytes());
    out.extend_from_slice(&shape.to_le_bytes());
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    put_f64s(&mut out, &values);
    if let Some(flags) = frozen {
        out.extend(flags.iter().map(|&f| f as u8));
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    r.header(CHECKPOINT_MAGIC)?;
    let kind_byte = r.u8()?;
    let kind = CheckpointKind::from_byte(kind_byte)
        .ok_or_else(|| malformed(path, format!("unknown checkpoint kind {kind_byte}")))?;
    let fingerprint = r.u64()?;
    let shape = r.u32()?;
    let count = r.u32()? as usize;
    let incompatible = |message: String| FormatError::Incompatible {
        path: path.to_path_buf(),
        message,
    };
    let expected_fp = match kind {
        CheckpointKind::Net => architecture_fingerprint(),
        CheckpointKind::Platt => platt_fingerprint(),
        CheckpointKind::AuxConv => aux_fingerprint(shape),
    };
    if fingerprint != expected_fp {
        return Err(incompatible(format!(
            "fingerprint {fingerprint:#018x} does not match this build's {} ({expected_fp:#018x})",
            kind.name()
        )));
    }
    let values = r.f64s(count)?;
    let checkpoint = match kind {
        CheckpointKind::Net => {
            let mut p = NetParams::<f64>::zeros();
            if shape as usize != LAYER_COUNT || count != p.parameter_count() {
                return Err(malformed(
                    path,
                    format!("network payload has {count} values, expected {}", p.parameter_count()),
                ));
            }
            p.unflatten(&values).map_err(|e| malformed(path, e.to_string()))?;
            let flags = r.take(LAYER_COUNT)?;
            let mut frozen = [false; LAYER_COUNT];
            for (f, &b) in frozen.iter_mut().zip(flags) {
                *f = match b {
                    0 => false,
                    1 => true,
                    _ => return Err(malformed(path, format!("bad frozen flag {b}"))),
                };
            }
            p.set_frozen(frozen);
            Checkpoint::Net(p)
        }
        CheckpointKind::Platt => {
            if shape != 2 || count != 2 {
                return Err(malformed(path, format!("Platt payload has {count} values, expected 2")));
            }
            Checkpoint::Platt(PlattParams {
                a: values[0],
                b: values[1],
            })
        }
        CheckpointKind::AuxConv => {
            let k = shape as usize;
            if count != k * k + 1 {
                return Err(malformed(
                    path,
                    format!("aux-conv payload has {count} values, expected {}", k * k + 1),
                ));
            }
            let p = AuxConvParams {
                k,
                kernel: values[..k * k].to_vec(),
                bias: values[k * k],
            };
            p.validate().map_err(|e| malformed(path, e.to_string()))?;
            Checkpoint::AuxConv(p)
        }
    };
    r.finish()?;
    Ok(checkpoint)
}

pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, encode_checkpoint(c)).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&bytes, path)
}

fn expect_kind(path: &Path, got: &Checkpoint, want: CheckpointKind) -> FormatError {
    let hint = if got.kind() == CheckpointKind::Platt && want == CheckpointKind::AuxConv {
        "; load it as Platt and convert with AuxConvParams::from"
    } else {
        ""
    };
    FormatError::Incompatible {
        path: path.to_path_buf(),
        message: format!("file holds {}, not {}{hint}", got.kind().name(), want.name()),
    }
}

pub fn load_net(path: &Path) -> Result<NetParams<f64>> {
    match load_checkpoint(path)? {
        Checkpoint::Net(p) => Ok(p),
        other => Err(expect_kind(path, &other, CheckpointKind::Net)),
    }
}

pub fn load_platt(path: &Path) -> Result<PlattParams<f64>> {
    match load_checkpoint(path)? {
        Checkpoint::Platt(p) => Ok(p),
        other => Err(expect_kind(path, &other, CheckpointKind::Platt)),
    }
}

pub fn load_aux_conv(path: &Path) -> Result<AuxConvParams<f64>> {
    match load_checkpoint(path)? {
        Checkpoint::AuxConv(p) => Ok(p),
        other => Err(expect_kind(path, &other, CheckpointKind::AuxConv)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> StoredSubject {
        let g = |f: fn(usize, usize) -> f64| Grid::from_fn(3, 4, f).unwrap();
        let s = SubjectF64::new(
            "s1",
            g(|r, c| (r as f64 - c as f64) * 0.37),
            g(|r, c| ((r + c) % 2) as f64),
            g(|_, _| 1.0),
        )
        .unwrap()
        .with_reference_posterior(g(|r, c| (r * 4 + c) as f64 / 11.0))
        .unwrap();
        s.into()
    }

    #[test]
    fn subject_round_trip_is_bit_exact() {
        let s = sample();
        let bytes = encode_subject(&s);
        assert_eq!(&bytes[..4], DATASET_MAGIC);
        assert_eq!(bytes.len(), 14 + 4 * 12 * 8);
        let back = decode_subject("s1", &bytes, Path::new("s1.scv")).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn truncation_and_version_errors() {
        let bytes = encode_subject(&sample());
        let p = Path::new("bad.scv");
        let err = decode_subject("bad", &bytes[..bytes.len() - 3], p).unwrap_err();
        assert!(err.to_string().contains("bad.scv") && err.to_string().contains("truncated"));
        let mut v9 = bytes.clone();
        v9[4] = 9;
        let err = decode_subject("bad", &v9, p).unwrap_err();
        assert!(err.to_string().contains("unsupported version"), "{err}");
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(decode_subject("bad", &magic, p), Err(FormatError::Malformed { .. })));
    }

    #[test]
    fn checkpoint_kinds_are_not_interchangeable() {
        let p = Path::new("c.scw");
        let platt = Checkpoint::Platt(PlattParams { a: 0.5, b: -0.25 });
        let bytes = encode_checkpoint(&platt);
        assert_eq!(decode_checkpoint(&bytes, p).unwrap(), platt);

        let mut wrong_fp = bytes.clone();
        wrong_fp[7] ^= 0xff;
        assert!(matches!(decode_checkpoint(&wrong_fp, p), Err(FormatError::Incompatible { .. })));

        let mut short = bytes;
        short.truncate(short.len() - 1);
        assert!(matches!(decode_checkpoint(&short, p), Err(FormatError::Malformed { .. })));
    }
}
