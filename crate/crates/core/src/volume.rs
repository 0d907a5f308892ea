//! Multi-contrast volumes, region masks, and their on-disk container.
//!
//! A stored object is a pair of files: `<path>.json` (header) and
//! `<path>.raw` (little-endian f64 payload, row-major `[C×W×H×D]`). The
//! header carries `kind`, `dims`, `channels`, `present`, `dtype`,
//! `checksum` (CRC-32 of the payload bytes) and `binarized`.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    T1,
    T2,
    T1ce,
    Flair,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::T1, Modality::T2, Modality::T1ce, Modality::Flair];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::T1 => "T1",
            Modality::T2 => "T2",
            Modality::T1ce => "T1ce",
            Modality::Flair => "FLAIR",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Parameter(format!("unknown modality {s:?} (expected T1, T2, T1ce or FLAIR)")))
    }
}

/// Nested evaluation regions, in channel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    Wt,
    Tc,
    Et,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Wt, Region::Tc, Region::Et];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Wt => "WT",
            Region::Tc => "TC",
            Region::Et => "ET",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn spatial_dims(t: &Tensor, channels: usize, what: &str) -> Result<[usize; 3]> {
    let s = t.shape();
    if s.len() != 4 || s[0] != channels {
        return Err(Error::Validation(format!(
            "{what} must have shape [{channels}, W, H, D], got {s:?}"
        )));
    }
    let dims = [s[1], s[2], s[3]];
    if dims.iter().any(|&d| d < MIN_DIM) {
        return Err(Error::Validation(format!(
            "{what} spatial dims must be at least {MIN_DIM}, got {dims:?}"
        )));
    }
    Ok(dims)
}

/// Four co-registered contrasts `[T1, T2, T1ce, FLAIR] × W × H × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiContrastVolume {
    intensities: Tensor,
    present: [bool; 4],
}

impl MultiContrastVolume {
    pub fn new(intensities: Tensor, present: [bool; 4]) -> Result<Self> {
        let v = Self {
            intensities,
            present,
        };
        v.validate()?;
        Ok(v)
    }

    fn validate(&self) -> Result<()> {
        spatial_dims(&self.intensities, 4, "volume")?;
        for m in Modality::ALL {
            if !self.present[m.index()] && self.channel(m).iter().any(|&v| v != 0.0) {
                return Err(Error::Validation(format!(
                    "absent modality {m} has non-zero intensities"
                )));
            }
        }
        if !self.intensities.is_finite() {
            return Err(Error::Validation("non-finite intensity".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.intensities.shape();
        [s[1], s[2], s[3]]
    }

    pub fn voxels(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn intensities(&self) -> &Tensor {
        &self.intensities
    }

    pub fn present(&self) -> [bool; 4] {
        self.present
    }

    pub fn channel(&self, m: Modality) -> &[f64] {
        let n = self.voxels();
        &self.intensities.data()[m.index() * n..(m.index() + 1) * n]
    }

    /// Copy with one modality zero-filled and flagged absent.
    pub fn drop(&self, m: Modality) -> Self {
        let mut out = self.clone();
        let n = out.voxels();
        out.intensities.data_mut()[m.index() * n..(m.index() + 1) * n].fill(0.0);
        out.present[m.index()] = false;
        out
    }

    pub fn drop_modality(&self, name: &str) -> Result<Self> {
        Ok(self.drop(name.parse()?))
    }
}

/// Per-region map `[WT, TC, ET] × W × H × D`, probabilistic or binarized.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    values: Tensor,
    binarized: bool,
}

impl RegionMask {
    pub fn new(values: Tensor, binarized: bool) -> Result<Self> {
        let m = Self { values, binarized };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        spatial_dims(&self.values, 3, "mask")?;
        let d = self.values.data();
        if d.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("mask values must lie in [0, 1]".into()));
        }
        if self.binarized {
            if d.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Validation("binarized mask holds non-binary values".into()));
            }
            let (wt, tc, et) = (
                self.channel(Region::Wt),
                self.channel(Region::Tc),
                self.channel(Region::Et),
            );
            for i in 0..wt.len() {
                if et[i] > tc[i] || tc[i] > wt[i] {
                    return Err(Error::Validation(format!(
                        "region hierarchy ET <= TC <= WT violated at voxel {i}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.values.shape();
        [s[1], s[2], s[3]]
    }

    pub fn voxels(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn is_binarized(&self) -> bool {
        self.binarized
    }

    pub fn channel(&self, r: Region) -> &[f64] {
        let n = self.voxels();
        &self.values.data()[r.index() * n..(r.index() + 1) * n]
    }
}

/// A named single- or multi-channel field, e.g. an uncertainty map.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    pub names: Vec<String>,
    pub values: Tensor,
}

impl ScalarVolume {
    pub fn new(names: Vec<String>, values: Tensor) -> Result<Self> {
        spatial_dims(&values, names.len(), "field")?;
        Ok(Self { names, values })
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.values.shape();
        [s[1], s[2], s[3]]
    }
}

/// Anything that can be written with [`write_volume`].
#[derive(Debug, Clone, PartialEq)]
pub enum StoredVolume {
    MultiContrast(MultiContrastVolume),
    Mask(RegionMask),
    Field(ScalarVolume),
}

impl From<MultiContrastVolume> for StoredVolume {
    fn from(v: MultiContrastVolume) -> Self {
        StoredVolume::MultiContrast(v)
    }
}

impl From<RegionMask> for StoredVolume {
    fn from(v: RegionMask) -> Self {
        StoredVolume::Mask(v)
    }
}

impl From<ScalarVolume> for StoredVolume {
    fn from(v: ScalarVolume) -> Self {
        StoredVolume::Field(v)
    }
}

impl StoredVolume {
    pub fn into_multi_contrast(self) -> Result<MultiContrastVolume> {
        match self {
            StoredVolume::MultiContrast(v) => Ok(v),
            _ => Err(Error::Validation("expected a multi-contrast volume".into())),
        }
    }

    pub fn into_mask(self) -> Result<RegionMask> {
        match self {
            StoredVolume::Mask(m) => Ok(m),
            _ => Err(Error::Validation("expected a region mask".into())),
        }
    }

    pub fn into_field(self) -> Result<ScalarVolume> {
        match self {
            StoredVolume::Field(f) => Ok(f),
            _ => Err(Error::Validation("expected a scalar field".into())),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    dims: [usize; 3],
    channels: Vec<String>,
    present: Vec<bool>,
    dtype: String,
    checksum: u32,
    binarized: bool,
}

pub(crate) fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = OsString::from(path.as_os_str());
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes `bytes` to `path` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub(crate) fn encode_f64(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn decode_f64(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

pub fn write_volume(v: &StoredVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (kind, channels, present, binarized, tensor, dims) = match v {
        StoredVolume::MultiContrast(m) => (
            "volume",
            Modality::ALL.iter().map(|m| m.name().to_string()).collect::<Vec<_>>(),
            m.present.to_vec(),
            false,
            &m.intensities,
            m.dims(),
        ),
        StoredVolume::Mask(m) => (
            "mask",
            Region::ALL.iter().map(|r| r.name().to_string()).collect(),
            vec![true; 3],
            m.binarized,
            &m.values,
            m.dims(),
        ),
        StoredVolume::Field(f) => (
            "volume",
            f.names.clone(),
            vec![true; f.names.len()],
            false,
            &f.values,
            f.dims(),
        ),
    };
    let payload = encode_f64(tensor.data());
    let header = Header {
        kind: kind.to_string(),
        dims,
        channels,
        present,
        dtype: "f64le".to_string(),
        checksum: crc32fast::hash(&payload),
        binarized,
    };
    let json = serde_json::to_vec_pretty(&header).expect("header serializes");
    write_atomic(&with_suffix(path, ".raw"), &payload)?;
    write_atomic(&with_suffix(path, ".json"), &json)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<StoredVolume> {
    let path = path.as_ref();
    let hpath = with_suffix(path, ".json");
    let rpath = with_suffix(path, ".raw");
    let text = std::fs::read(&hpath).map_err(|e| Error::io(&hpath, e))?;
    let header: Header = serde_json::from_slice(&text)
        .map_err(|e| Error::corrupt(&hpath, format!("bad header: {e}")))?;
    if header.dtype != "f64le" {
        return Err(Error::corrupt(&hpath, format!("unsupported dtype {:?}", header.dtype)));
    }
    if header.present.len() != header.channels.len() {
        return Err(Error::corrupt(&hpath, "present flags do not match channels"));
    }
    let payload = std::fs::read(&rpath).map_err(|e| Error::io(&rpath, e))?;
    let expected = 8 * header.channels.len() * header.dims.iter().product::<usize>();
    if payload.len() != expected {
        return Err(Error::corrupt(
            &rpath,
            format!("payload has {} bytes, header implies {expected}", payload.len()),
        ));
    }
    if crc32fast::hash(&payload) != header.checksum {
        return Err(Error::corrupt(&rpath, "checksum mismatch"));
    }
    let [w, h, d] = header.dims;
    let tensor = Tensor::new(&[header.channels.len(), w, h, d], decode_f64(&payload))
        .map_err(|e| Error::corrupt(&hpath, e.to_string()))?;
    let names = |expected: &[&str]| {
        header.channels.len() == expected.len()
            && header.channels.iter().zip(expected).all(|(a, b)| a == b)
    };
    match header.kind.as_str() {
        "mask" => {
            if !names(&["WT", "TC", "ET"]) {
                return Err(Error::corrupt(&hpath, "mask channels must be [WT, TC, ET]"));
            }
            Ok(StoredVolume::Mask(RegionMask::new(tensor, header.binarized)?))
        }
        "volume" if names(&["T1", "T2", "T1ce", "FLAIR"]) => {
            let mut present = [false; 4];
            present.copy_from_slice(&header.present);
            Ok(StoredVolume::MultiContrast(MultiContrastVolume::new(tensor, present)?))
        }
        "volume" => Ok(StoredVolume::Field(ScalarVolume::new(header.channels, tensor)?)),
        other => Err(Error::corrupt(&hpath, format!("unknown kind {other:?}"))),
    }
}
