//! Corpus-level preparation: discover pairs, verify, slice, normalize,
//! resize, split, and persist the result with a CSV manifest.

use std::fs::File;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis};
use ndarray_npy::{ReadNpyExt, WriteNpyExt};
use serde::{Deserialize, Serialize};

use crate::data::{
    extract_slices, normalize_slice, resize_sample, split_dataset, verify_files, DatasetIndex, RejectionReason,
    SlicePolicy, SliceSample, Split, SplitLevel, VolumePair,
};
use crate::error::{Error, Result};
use crate::exec;

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepareConfig {
    pub input: PathBuf,
    pub output: PathBuf,
    pub size: usize,
    pub split: [f64; 3],
    pub seed: u64,
    pub level: SplitLevel,
    pub policy: SlicePolicy,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            input: PathBuf::from("data/raw"),
            output: PathBuf::from("data/prepared"),
            size: 256,
            split: [0.7, 0.2, 0.1],
            seed: 0,
            level: SplitLevel::Case,
            policy: SlicePolicy::LesionOnly,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PreparedDataset {
    pub index: DatasetIndex,
    /// Same order as `index.records`.
    pub samples: Vec<SliceSample>,
    pub pairs: Vec<VolumePair>,
}

impl PreparedDataset {
    pub fn split(&self, split: Split) -> Vec<SliceSample> {
        self.samples.iter().filter(|s| s.split == Some(split)).cloned().collect()
    }
}

/// One manifest line: a slice of a valid pair, or a rejected pair (no slice).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub case_id: String,
    pub slice_index: Option<usize>,
    pub lesion_pixels: Option<u64>,
    pub split: Option<Split>,
    pub valid: bool,
    pub reasons: String,
}

const CT_SUFFIXES: [&str; 3] = ["_ct.nii.gz", "_ct.nii", "_ct.npy"];

/// Pairs `<case_id>_ct.<ext>` with `<case_id>_mask.<ext>`, sorted by case id.
/// A missing mask file is kept so verification can record it.
pub fn discover_pairs(dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    if !dir.is_dir() {
        return Err(Error::InvalidArgument(format!("data directory {} does not exist", dir.display())));
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        for suffix in CT_SUFFIXES {
            if let Some(case) = name.strip_suffix(suffix) {
                let mask_name = format!("{case}{}", suffix.replacen("_ct", "_mask", 1));
                out.push((case.to_string(), path.clone(), dir.join(mask_name)));
                break;
            }
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

fn process_case(id: &str, ct: PathBuf, mask: PathBuf, cfg: &PrepareConfig) -> (VolumePair, Vec<SliceSample>) {
    let loaded = verify_files(id, ct, mask);
    let mut info = loaded.info;
    let Some((ct, mask)) = loaded.volumes.filter(|_| info.valid) else {
        return (info, Vec::new());
    };
    let result = extract_slices(&info, &ct, &mask, cfg.policy).and_then(|slices| {
        slices
            .into_iter()
            .map(|s| {
                let image = normalize_slice(s.image.view())?;
                resize_sample(&SliceSample { image, ..s }, cfg.size)
            })
            .collect::<Result<Vec<_>>>()
    });
    match result {
        Ok(samples) => (info, samples),
        Err(_) => {
            info.valid = false;
            info.rejection_reasons.push(RejectionReason::FileCorrupt);
            (info, Vec::new())
        }
    }
}

/// Runs the pipeline over `cfg.input` and writes the prepared dataset to `cfg.output`.
pub fn prepare(cfg: &PrepareConfig) -> Result<PreparedDataset> {
    let found = discover_pairs(&cfg.input)?;
    if found.is_empty() {
        return Err(Error::InvalidArgument(format!("no CT/mask pairs found in {}", cfg.input.display())));
    }
    let per_case = exec::map_range(found.len(), |i| {
        let (id, ct, mask) = &found[i];
        process_case(id, ct.clone(), mask.clone(), cfg)
    });
    let mut pairs = Vec::with_capacity(per_case.len());
    let mut samples = Vec::new();
    for (info, s) in per_case {
        pairs.push(info);
        samples.extend(s);
    }
    let index = split_dataset(&DatasetIndex::from_samples(&samples), cfg.split, cfg.seed, cfg.level)?;
    for (s, r) in samples.iter_mut().zip(&index.records) {
        s.split = r.split;
    }
    let dataset = PreparedDataset { index, samples, pairs };
    write_prepared(&dataset, &cfg.output, cfg.size)?;
    Ok(dataset)
}

fn manifest_rows(dataset: &PreparedDataset) -> Vec<ManifestRow> {
    let mut rows: Vec<ManifestRow> = dataset
        .index
        .records
        .iter()
        .map(|r| ManifestRow {
            case_id: r.case_id.clone(),
            slice_index: Some(r.slice_index),
            lesion_pixels: Some(r.lesion_pixels),
            split: r.split,
            valid: true,
            reasons: String::new(),
        })
        .collect();
    rows.extend(dataset.pairs.iter().filter(|p| !p.valid).map(|p| ManifestRow {
        case_id: p.case_id.clone(),
        slice_index: None,
        lesion_pixels: None,
        split: None,
        valid: false,
        reasons: p
            .rejection_reasons
            .iter()
            .map(|r| r.as_str())
            .collect::<Vec<_>>()
            .join(";"),
    }));
    rows
}

pub fn write_manifest(rows: &[ManifestRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

fn stack_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{}_images.npy", split.file_stem())),
        dir.join(format!("{}_masks.npy", split.file_stem())),
    )
}

fn write_prepared(dataset: &PreparedDataset, dir: &Path, size: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_manifest(&manifest_rows(dataset), &dir.join(MANIFEST_FILE))?;
    for split in Split::ALL {
        let members: Vec<&SliceSample> = dataset.samples.iter().filter(|s| s.split == Some(split)).collect();
        let mut images = Array3::<f64>::zeros((members.len(), size, size));
        let mut masks = Array3::<u8>::zeros((members.len(), size, size));
        for (i, s) in members.iter().enumerate() {
            images.index_axis_mut(Axis(0), i).assign(&s.image);
            masks.index_axis_mut(Axis(0), i).assign(&s.mask);
        }
        let (ip, mp) = stack_paths(dir, split);
        images.write_npy(File::create(ip)?)?;
        masks.write_npy(File::create(mp)?)?;
    }
    Ok(())
}

/// Reads a dataset written by [`prepare`].
pub fn load_prepared(dir: &Path) -> Result<PreparedDataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let rows = read_manifest(&manifest_path)?;
    let mut stacks = Vec::new();
    for split in Split::ALL {
        let (ip, mp) = stack_paths(dir, split);
        let images = Array3::<f64>::read_npy(File::open(ip)?)?;
        let masks = Array3::<u8>::read_npy(File::open(mp)?)?;
        stacks.push((images, masks, 0usize));
    }
    let mut samples = Vec::new();
    let mut records = Vec::new();
    let mut pairs = Vec::new();
    for row in rows {
        let (Some(slice_index), true) = (row.slice_index, row.valid) else {
            pairs.push(VolumePair {
                case_id: row.case_id.clone(),
                ct_path: PathBuf::new(),
                mask_path: PathBuf::new(),
                shape: (0, 0, 0),
                voxel_spacing: (1.0, 1.0, 1.0),
                valid: false,
                rejection_reasons: row
                    .reasons
                    .split(';')
                    .filter(|s| !s.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?,
            });
            continue;
        };
        let split = row
            .split
            .ok_or_else(|| Error::InvalidArgument(format!("manifest row for {} has no split", row.case_id)))?;
        let k = Split::ALL.iter().position(|&s| s == split).expect("known split");
        let (images, masks, next) = &mut stacks[k];
        if *next >= images.len_of(Axis(0)) {
            return Err(Error::InvalidArgument(format!(
                "manifest lists more {split} slices than the stored arrays hold"
            )));
        }
        let sample = SliceSample {
            case_id: row.case_id.clone(),
            slice_index,
            image: images.index_axis(Axis(0), *next).to_owned(),
            mask: masks.index_axis(Axis(0), *next).to_owned(),
            split: Some(split),
        };
        *next += 1;
        records.push(crate::data::IndexRecord {
            case_id: row.case_id,
            slice_index,
            lesion_pixels: row.lesion_pixels.unwrap_or_else(|| sample.lesion_pixels()),
            split: Some(split),
        });
        samples.push(sample);
    }
    Ok(PreparedDataset {
        index: DatasetIndex {
            records,
            source_manifest: Some(manifest_path),
        },
        samples,
        pairs,
    })
}
