//! Seeded synthetic multi-contrast tumor phantoms with exact ground truth.
//!
//! Each phantom is three nested anisotropic ellipsoids sharing one center
//! (WT ⊇ TC ⊇ ET). Intensities are a per-modality base value plus the
//! profile offset of every region containing the voxel, plus Gaussian noise.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::volume::{
    read_volume, write_atomic, write_volume, Modality, MultiContrastVolume, Region,
    RegionMask, StoredVolume, MIN_DIM,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    /// Tumor center in voxel coordinates (voxel centers sit on integers).
    pub center: [f64; 3],
    /// Radii of `[WT, TC, ET]` in voxels.
    pub radii: [f64; 3],
    /// Per-axis multipliers applied to every radius.
    pub anisotropy: [f64; 3],
    pub noise_sigma: f64,
    /// Healthy-tissue intensity per modality `[T1, T2, T1ce, FLAIR]`.
    pub base_intensity: [f64; 4],
    /// Offset added inside each region: rows are modalities, columns `[WT, TC, ET]`.
    pub contrast_profile: [[f64; 3]; 4],
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [24, 24, 24],
            center: [11.5, 11.5, 11.5],
            radii: [7.0, 4.5, 2.5],
            anisotropy: [1.0, 0.85, 1.15],
            noise_sigma: 0.15,
            base_intensity: [0.0; 4],
            contrast_profile: [
                [-0.3, -0.3, 0.0], // T1: hypo-intense lesion
                [0.5, 0.2, 0.0],   // T2
                [0.0, 0.7, 1.0],   // T1ce: core and enhancing rim
                [1.2, 0.1, 0.0],   // FLAIR: edema
            ],
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let [wt, tc, et] = self.radii;
        let half = *self.dims.iter().min().expect("3 dims") as f64 / 2.0;
        if self.dims.iter().any(|&d| d < MIN_DIM) {
            return Err(Error::Parameter(format!(
                "phantom dims must be at least {MIN_DIM}, got {:?}",
                self.dims
            )));
        }
        if !(0.0 <= et && et <= tc && tc <= wt && wt <= half) {
            return Err(Error::Parameter(format!(
                "radii must satisfy 0 <= ET <= TC <= WT <= {half}, got {:?}",
                self.radii
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Parameter(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if self.anisotropy.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::Parameter(format!("anisotropy must be positive, got {:?}", self.anisotropy)));
        }
        Ok(())
    }

    /// Whether voxel `p` lies inside the ellipsoid of `region`.
    pub fn contains(&self, region: Region, p: [usize; 3]) -> bool {
        let r = self.radii[region.index()];
        if r <= 0.0 {
            return false;
        }
        let q: f64 = (0..3)
            .map(|a| {
                let t = (p[a] as f64 - self.center[a]) / (r * self.anisotropy[a]);
                t * t
            })
            .sum();
        q <= 1.0
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Renders a phantom and its binarized `[WT, TC, ET]` ground truth.
pub fn generate(spec: &PhantomSpec) -> Result<(MultiContrastVolume, RegionMask)> {
    spec.validate()?;
    let [w, h, d] = spec.dims;
    let n = spec.voxels();
    let mut mask = vec![0.0; 3 * n];
    let mut intens = vec![0.0; 4 * n];
    let mut noise = RngStream::new(spec.seed).derive("noise");
    for i in 0..w {
        for j in 0..h {
            for k in 0..d {
                let v = (i * h + j) * d + k;
                let inside = Region::ALL.map(|r| spec.contains(r, [i, j, k]));
                for r in Region::ALL {
                    if inside[r.index()] {
                        mask[r.index() * n + v] = 1.0;
                    }
                }
                for m in Modality::ALL {
                    let mut value = spec.base_intensity[m.index()];
                    for r in Region::ALL {
                        if inside[r.index()] {
                            value += spec.contrast_profile[m.index()][r.index()];
                        }
                    }
                    intens[m.index() * n + v] = value;
                }
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        for v in intens.iter_mut() {
            *v += spec.noise_sigma * noise.normal();
        }
    }
    let volume = MultiContrastVolume::new(Tensor::new(&[4, w, h, d], intens)?, [true; 4])?;
    let mask = RegionMask::new(Tensor::new(&[3, w, h, d], mask)?, true)?;
    Ok((volume, mask))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub id: String,
    pub spec: PhantomSpec,
    pub volume: MultiContrastVolume,
    /// Ground truth, kept only for labeled items.
    pub mask: Option<RegionMask>,
}

/// Number of labeled items out of `n` for a label fraction.
pub fn labeled_count(n: usize, fraction: f64) -> usize {
    // Guard against 0.3 * 10 = 3.0000000000000004.
    (((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize).min(n)
}

fn jitter(base: &PhantomSpec, rng: &mut RngStream) -> PhantomSpec {
    let mut spec = base.clone();
    for c in spec.center.iter_mut() {
        *c += rng.uniform_range(-2.0, 2.0);
    }
    let half = *base.dims.iter().min().expect("3 dims") as f64 / 2.0;
    let mut r = base.radii.map(|r| r * rng.uniform_range(0.85, 1.15));
    r[0] = r[0].min(half);
    r[1] = r[1].min(r[0]);
    r[2] = r[2].min(r[1]);
    spec.radii = r;
    spec.noise_sigma = base.noise_sigma * rng.uniform_range(0.8, 1.2);
    spec.seed = rng.next_u64();
    spec
}

/// Deterministic labeled subset of `0..n`, sorted.
pub fn labeled_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Parameter(format!(
            "labeled fraction must be in (0, 1], got {fraction}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    RngStream::new(seed).derive("split").shuffle(&mut idx);
    idx.truncate(labeled_count(n, fraction));
    idx.sort_unstable();
    Ok(idx)
}

/// `n` jittered phantoms; masks are kept for `⌈fraction·n⌉` of them.
pub fn make_dataset(
    n: usize,
    base: &PhantomSpec,
    labeled_fraction: f64,
    seed: u64,
) -> Result<Vec<DatasetItem>> {
    if n == 0 {
        return Err(Error::Parameter("dataset needs at least one item".into()));
    }
    base.validate()?;
    let labeled = labeled_indices(n, labeled_fraction, seed)?;
    let items = RngStream::new(seed).derive("items");
    (0..n)
        .map(|i| {
            let spec = jitter(base, &mut items.derive_index(i as u64));
            let (volume, mask) = generate(&spec)?;
            Ok(DatasetItem {
                id: format!("case_{i:03}"),
                spec,
                volume,
                mask: labeled.binary_search(&i).is_ok().then_some(mask),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    pub volume: String,
    pub mask: Option<String>,
    pub labeled: bool,
    pub spec: PhantomSpec,
}

/// Contents of `dataset.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n: usize,
    pub labeled_fraction: f64,
    pub seed: u64,
    pub base: PhantomSpec,
    pub items: Vec<ManifestItem>,
}

pub const MANIFEST: &str = "dataset.json";

/// Writes every item plus `dataset.json` into `dir`.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    items: &[DatasetItem],
    base: &PhantomSpec,
    labeled_fraction: f64,
    seed: u64,
) -> Result<Manifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(items.len());
    for item in items {
        let vol_name = format!("{}_img", item.id);
        write_volume(&StoredVolume::MultiContrast(item.volume.clone()), dir.join(&vol_name))?;
        let mask_name = match &item.mask {
            Some(m) => {
                let name = format!("{}_seg", item.id);
                write_volume(&StoredVolume::Mask(m.clone()), dir.join(&name))?;
                Some(name)
            }
            None => None,
        };
        entries.push(ManifestItem {
            id: item.id.clone(),
            volume: vol_name,
            labeled: mask_name.is_some(),
            mask: mask_name,
            spec: item.spec.clone(),
        });
    }
    let manifest = Manifest {
        n: items.len(),
        labeled_fraction,
        seed,
        base: base.clone(),
        items: entries,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join(MANIFEST), &json)?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST);
    let text = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&text).map_err(|e| Error::corrupt(&path, e.to_string()))
}

/// Loads every item listed in `dir/dataset.json`.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<DatasetItem>> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    manifest
        .items
        .into_iter()
        .map(|e| {
            let volume = read_volume(dir.join(&e.volume))?.into_multi_contrast()?;
            let mask = match &e.mask {
                Some(m) => Some(read_volume(dir.join(m))?.into_mask()?),
                None => None,
            };
            Ok(DatasetItem {
                id: e.id,
                spec: e.spec,
                volume,
                mask,
            })
        })
        .collect()
}
