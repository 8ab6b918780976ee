//! CT slice pipeline: pair verification, slice extraction, normalization,
//! resizing, augmentation, dataset splitting, and synthetic phantoms.

mod phantom;
mod prepare;
mod volume_io;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use phantom::{generate_phantom, phantom_case, phantom_slices, PhantomSpec, LESION_CONTRAST};
pub use prepare::{
    discover_pairs, load_prepared, prepare, read_manifest, write_manifest, ManifestRow, PrepareConfig,
    PreparedDataset, MANIFEST_FILE,
};
pub use volume_io::{load_volume, VolumeFile};

use crate::error::{Error, Result};
use crate::metrics::percentile_linear;
use crate::tensor::{bilinear_taps, resize_plane};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RejectionReason {
    DimMismatch,
    SliceCountMismatch,
    FileCorrupt,
    NoLesion,
}

impl RejectionReason {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::DimMismatch => "DIM_MISMATCH",
            Self::SliceCountMismatch => "SLICE_COUNT_MISMATCH",
            Self::FileCorrupt => "FILE_CORRUPT",
            Self::NoLesion => "NO_LESION",
        }
    }
}

impl FromStr for RejectionReason {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::DimMismatch, Self::SliceCountMismatch, Self::FileCorrupt, Self::NoLesion]
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown rejection reason `{s}`")))
    }
}

/// One case's CT/mask pairing and its verification outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumePair {
    pub case_id: String,
    pub ct_path: PathBuf,
    pub mask_path: PathBuf,
    /// `(height, width, depth)` of the CT volume.
    pub shape: (usize, usize, usize),
    pub voxel_spacing: (f64, f64, f64),
    pub valid: bool,
    pub rejection_reasons: Vec<RejectionReason>,
}

impl VolumePair {
    fn rejected(case_id: &str, ct_path: PathBuf, mask_path: PathBuf, reason: RejectionReason) -> Self {
        Self {
            case_id: case_id.to_string(),
            ct_path,
            mask_path,
            shape: (0, 0, 0),
            voxel_spacing: (1.0, 1.0, 1.0),
            valid: false,
            rejection_reasons: vec![reason],
        }
    }
}

/// A verified pair together with its voxel data (absent when unreadable).
#[derive(Clone, Debug)]
pub struct LoadedPair {
    pub info: VolumePair,
    pub volumes: Option<(Array3<f64>, Array3<u8>)>,
}

/// Checks dimensional alignment, slice count, and lesion presence.
/// Volumes are `(height, width, depth)` with axial slices along the last axis.
pub fn verify_pair(case_id: &str, ct: &Array3<f64>, mask: &Array3<u8>) -> VolumePair {
    let (ch, cw, cd) = ct.dim();
    let (mh, mw, md) = mask.dim();
    let mut reasons = Vec::new();
    if (ch, cw) != (mh, mw) {
        reasons.push(RejectionReason::DimMismatch);
    }
    if cd != md {
        reasons.push(RejectionReason::SliceCountMismatch);
    }
    if mask.iter().all(|&v| v == 0) {
        reasons.push(RejectionReason::NoLesion);
    }
    VolumePair {
        case_id: case_id.to_string(),
        ct_path: PathBuf::new(),
        mask_path: PathBuf::new(),
        shape: (ch, cw, cd),
        voxel_spacing: (1.0, 1.0, 1.0),
        valid: reasons.is_empty(),
        rejection_reasons: reasons,
    }
}

/// Loads and verifies a pair of files. Unreadable files are recorded as
/// `FILE_CORRUPT` rather than returned as errors.
pub fn verify_files(case_id: &str, ct_path: PathBuf, mask_path: PathBuf) -> LoadedPair {
    let ct = load_volume(&ct_path);
    let mask = load_volume(&mask_path);
    match (ct, mask) {
        (Ok(ct), Ok(mask)) => {
            let binary = mask.data.mapv(|v| (v != 0.0) as u8);
            let mut info = verify_pair(case_id, &ct.data, &binary);
            info.ct_path = ct_path;
            info.mask_path = mask_path;
            info.voxel_spacing = ct.spacing;
            LoadedPair {
                info,
                volumes: Some((ct.data, binary)),
            }
        }
        _ => LoadedPair {
            info: VolumePair::rejected(case_id, ct_path, mask_path, RejectionReason::FileCorrupt),
            volumes: None,
        },
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "TRAIN",
            Self::Val => "VAL",
            Self::Test => "TEST",
        }
    }

    pub fn file_stem(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One 2D training unit.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSample {
    pub case_id: String,
    pub slice_index: usize,
    pub image: Array2<f64>,
    pub mask: Array2<u8>,
    pub split: Option<Split>,
}

impl SliceSample {
    pub fn lesion_pixels(&self) -> u64 {
        lesion_pixel_count(self.mask.view())
    }
}

pub fn lesion_pixel_count(mask: ArrayView2<u8>) -> u64 {
    mask.iter().filter(|&&v| v != 0).count() as u64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlicePolicy {
    #[default]
    LesionOnly,
    All,
}

impl FromStr for SlicePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lesion" | "lesion_only" => Ok(Self::LesionOnly),
            "all" => Ok(Self::All),
            _ => Err(Error::InvalidArgument(format!("unknown slice policy `{s}`"))),
        }
    }
}

/// Axial slices of a valid pair; `LesionOnly` keeps planes with a lesion pixel.
pub fn extract_slices(
    info: &VolumePair,
    ct: &Array3<f64>,
    mask: &Array3<u8>,
    policy: SlicePolicy,
) -> Result<Vec<SliceSample>> {
    if !info.valid {
        return Err(Error::Precondition(format!(
            "case {} failed verification: {:?}",
            info.case_id, info.rejection_reasons
        )));
    }
    let mut out = Vec::new();
    for z in 0..ct.len_of(Axis(2)) {
        let m = mask.index_axis(Axis(2), z);
        if policy == SlicePolicy::LesionOnly && m.iter().all(|&v| v == 0) {
            continue;
        }
        out.push(SliceSample {
            case_id: info.case_id.clone(),
            slice_index: z,
            image: ct.index_axis(Axis(2), z).to_owned(),
            mask: m.to_owned(),
            split: None,
        });
    }
    Ok(out)
}

/// Standard deviation below which a slice is treated as constant.
pub const MIN_STD: f64 = 1e-8;

/// Zero-mean, unit-variance (population) normalization; constant slices map to zeros.
pub fn normalize_slice(image: ArrayView2<f64>) -> Result<Array2<f64>> {
    if !image.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("slice contains NaN or infinite values".into()));
    }
    let n = image.len().max(1) as f64;
    let mean = image.sum() / n;
    let var = image.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < MIN_STD {
        return Ok(Array2::zeros(image.raw_dim()));
    }
    Ok(image.mapv(|v| (v - mean) / std))
}

/// Bilinear (half-pixel) resize of a real image.
pub fn resize_image(image: ArrayView2<f64>, size: usize) -> Array2<f64> {
    let (h, w) = image.dim();
    let src: Vec<f64> = image.iter().copied().collect();
    let mut out = vec![0.0; size * size];
    resize_plane(&src, h, w, &mut out, &bilinear_taps(h, size), &bilinear_taps(w, size));
    Array2::from_shape_vec((size, size), out).expect("size matches")
}

fn nearest_index(i: usize, in_len: usize, out_len: usize) -> usize {
    (((i as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize).min(in_len - 1)
}

/// Nearest-neighbour resize of a label mask, re-binarized at 0.5.
pub fn resize_mask(mask: ArrayView2<u8>, size: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((size, size), |(r, c)| {
        let v = mask[[nearest_index(r, h, size), nearest_index(c, w, size)]];
        (v as f64 >= 0.5) as u8
    })
}

pub fn resize_sample(sample: &SliceSample, size: usize) -> Result<SliceSample> {
    if size == 0 {
        return Err(Error::InvalidArgument("resize target must be positive".into()));
    }
    Ok(SliceSample {
        image: resize_image(sample.image.view(), size),
        mask: resize_mask(sample.mask.view(), size),
        ..sample.clone()
    })
}

/// Horizontal flip, then vertical flip, then `rot90` counter-clockwise quarter turns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Transform {
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: u8,
}

fn rot90_ccw<T: Clone>(a: ArrayView2<T>) -> Array2<T> {
    // out[i, j] = a[j, w - 1 - i]
    a.reversed_axes().slice(s![..;-1, ..]).to_owned()
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        hflip: false,
        vflip: false,
        rot90: 0,
    };

    pub fn apply<T: Clone>(&self, a: ArrayView2<T>) -> Array2<T> {
        let mut out = a.to_owned();
        if self.hflip {
            out = out.slice(s![.., ..;-1]).to_owned();
        }
        if self.vflip {
            out = out.slice(s![..;-1, ..]).to_owned();
        }
        for _ in 0..self.rot90 % 4 {
            out = rot90_ccw(out.view());
        }
        out
    }

    /// Undoes [`Transform::apply`].
    pub fn invert<T: Clone>(&self, a: ArrayView2<T>) -> Array2<T> {
        let mut out = a.to_owned();
        for _ in 0..(4 - self.rot90 % 4) % 4 {
            out = rot90_ccw(out.view());
        }
        if self.vflip {
            out = out.slice(s![..;-1, ..]).to_owned();
        }
        if self.hflip {
            out = out.slice(s![.., ..;-1]).to_owned();
        }
        out
    }

    /// Each flip with probability 0.5; with probability 0.5 a rotation by a
    /// uniformly drawn number of quarter turns.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let hflip = rng.random_bool(0.5);
        let vflip = rng.random_bool(0.5);
        let rotate = rng.random_bool(0.5);
        let k = rng.random_range(0..4u8);
        Self {
            hflip,
            vflip,
            rot90: if rotate { k } else { 0 },
        }
    }

    pub fn apply_sample(&self, sample: &SliceSample) -> SliceSample {
        SliceSample {
            image: self.apply(sample.image.view()),
            mask: self.apply(sample.mask.view()),
            ..sample.clone()
        }
    }
}

/// Random flips/rotation applied identically to image and mask.
pub fn augment(sample: &SliceSample, rng: &mut impl Rng) -> (SliceSample, Transform) {
    let t = Transform::sample(rng);
    (t.apply_sample(sample), t)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexRecord {
    pub case_id: String,
    pub slice_index: usize,
    pub lesion_pixels: u64,
    pub split: Option<Split>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetIndex {
    pub records: Vec<IndexRecord>,
    pub source_manifest: Option<PathBuf>,
}

impl DatasetIndex {
    pub fn from_samples(samples: &[SliceSample]) -> Self {
        Self {
            records: samples
                .iter()
                .map(|s| IndexRecord {
                    case_id: s.case_id.clone(),
                    slice_index: s.slice_index,
                    lesion_pixels: s.lesion_pixels(),
                    split: s.split,
                })
                .collect(),
            source_manifest: None,
        }
    }

    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut out: BTreeMap<Split, usize> = Split::ALL.iter().map(|&s| (s, 0)).collect();
        for r in &self.records {
            if let Some(s) = r.split {
                *out.entry(s).or_default() += 1;
            }
        }
        out
    }

    /// Errors on a duplicated `(case_id, slice_index)`.
    pub fn check_unique(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if !seen.insert((r.case_id.as_str(), r.slice_index)) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate record ({}, {})",
                    r.case_id, r.slice_index
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitLevel {
    #[default]
    Case,
    Slice,
}

impl FromStr for SplitLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "case" => Ok(Self::Case),
            "slice" => Ok(Self::Slice),
            _ => Err(Error::InvalidArgument(format!("unknown split level `{s}`"))),
        }
    }
}

/// Largest-remainder apportionment of `n` items; ties go to the earlier split.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact = ratios.map(|r| r * n as f64);
    let mut sizes = exact.map(|e| e.floor() as usize);
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

/// Deterministic train/val/test assignment; returns a copy with `split` set.
pub fn split_dataset(index: &DatasetIndex, ratios: [f64; 3], seed: u64, level: SplitLevel) -> Result<DatasetIndex> {
    if index.records.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty index".into()));
    }
    if ratios.iter().any(|r| *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split ratios {ratios:?} must be nonnegative and sum to 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let assign = |n: usize, rng: &mut ChaCha8Rng| {
        let sizes = split_sizes(n, ratios);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut label = vec![Split::Train; n];
        for (k, &i) in order.iter().enumerate() {
            label[i] = if k < sizes[0] {
                Split::Train
            } else if k < sizes[0] + sizes[1] {
                Split::Val
            } else {
                Split::Test
            };
        }
        label
    };
    let mut out = index.clone();
    match level {
        SplitLevel::Slice => {
            let labels = assign(out.records.len(), &mut rng);
            for (r, l) in out.records.iter_mut().zip(labels) {
                r.split = Some(l);
            }
        }
        SplitLevel::Case => {
            let cases: Vec<String> = out
                .records
                .iter()
                .map(|r| r.case_id.clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let labels = assign(cases.len(), &mut rng);
            let by_case: BTreeMap<&str, Split> = cases.iter().map(String::as_str).zip(labels).collect();
            for r in &mut out.records {
                r.split = Some(by_case[r.case_id.as_str()]);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AreaStats {
    pub count: usize,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

/// Lesion-area quartiles and maximum per split; `None` for an empty split.
pub fn tumor_area_stats(index: &DatasetIndex) -> BTreeMap<Split, Option<AreaStats>> {
    Split::ALL
        .iter()
        .map(|&split| {
            let areas: Vec<f64> = index
                .records
                .iter()
                .filter(|r| r.split == Some(split))
                .map(|r| r.lesion_pixels as f64)
                .collect();
            let stats = (!areas.is_empty()).then(|| AreaStats {
                count: areas.len(),
                q25: percentile_linear(&areas, 25.0).expect("nonempty"),
                median: percentile_linear(&areas, 50.0).expect("nonempty"),
                q75: percentile_linear(&areas, 75.0).expect("nonempty"),
                max: areas.iter().copied().fold(f64::MIN, f64::max),
            });
            (split, stats)
        })
        .collect()
}
