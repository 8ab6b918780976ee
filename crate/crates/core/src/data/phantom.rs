//! Synthetic CT-like volumes: Gaussian noise with brighter elliptical lesions.

use std::fs::File;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use ndarray_npy::WriteNpyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{lesion_pixel_count, normalize_slice, verify_pair, DatasetIndex, IndexRecord, SliceSample, VolumePair};
use crate::error::{Error, Result};
use crate::exec;

/// Intensity added inside lesions, in units of the background noise mean (0).
pub const LESION_CONTRAST: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub n_cases: usize,
    pub slices_per_case: usize,
    pub image_size: usize,
    /// Inclusive range of lesions per slice.
    pub lesion_count_range: (usize, usize),
    /// Semi-axis range in pixels.
    pub lesion_radius_range: (f64, f64),
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            n_cases: 4,
            slices_per_case: 8,
            image_size: 64,
            lesion_count_range: (1, 3),
            lesion_radius_range: (3.0, 8.0),
            noise_std: 0.3,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let (c0, c1) = self.lesion_count_range;
        let (r0, r1) = self.lesion_radius_range;
        let ok = self.n_cases > 0
            && self.slices_per_case > 0
            && self.image_size > 0
            && c0 >= 1
            && c0 <= c1
            && r0 > 0.0
            && r0 <= r1
            && self.noise_std >= 0.0
            && self.noise_std.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid phantom spec {self:?}")))
        }
    }

    pub fn case_id(i: usize) -> String {
        format!("phantom_{i:03}")
    }
}

/// One slice: noise image and the union of lesion ellipse interiors.
fn phantom_slice(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> (Array2<f64>, Array2<u8>) {
    let n = spec.image_size;
    let noise = Normal::new(0.0, spec.noise_std).expect("validated std");
    let mut image = Array2::from_shape_simple_fn((n, n), || noise.sample(rng));
    let mut mask = Array2::<u8>::zeros((n, n));
    let (c0, c1) = spec.lesion_count_range;
    let (r0, r1) = spec.lesion_radius_range;
    let lesions = rng.random_range(c0..=c1);
    for _ in 0..lesions {
        let a = rng.random_range(r0..=r1);
        let b = rng.random_range(r0..=r1);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let margin = (r1.ceil() as usize).min((n - 1) / 2);
        let cy = rng.random_range(margin..n - margin) as f64;
        let cx = rng.random_range(margin..n - margin) as f64;
        let (sin, cos) = theta.sin_cos();
        for ((r, c), m) in mask.indexed_iter_mut() {
            let dx = c as f64 - cx;
            let dy = r as f64 - cy;
            let u = (dx * cos + dy * sin) / a;
            let v = (-dx * sin + dy * cos) / b;
            if u * u + v * v <= 1.0 {
                *m = 1;
            }
        }
    }
    image.zip_mut_with(&mask, |p, &m| *p += LESION_CONTRAST * m as f64);
    (image, mask)
}

/// Deterministic case volume `(size, size, slices)` drawn from stream `case` of `seed`.
pub fn phantom_case(spec: &PhantomSpec, case: usize) -> (Array3<f64>, Array3<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(case as u64);
    let n = spec.image_size;
    let mut ct = Array3::zeros((n, n, spec.slices_per_case));
    let mut mask = Array3::zeros((n, n, spec.slices_per_case));
    for z in 0..spec.slices_per_case {
        let (img, m) = phantom_slice(spec, &mut rng);
        ct.index_axis_mut(Axis(2), z).assign(&img);
        mask.index_axis_mut(Axis(2), z).assign(&m);
    }
    (ct, mask)
}

/// Writes `<case_id>_ct.npy` and `<case_id>_mask.npy` for every case.
pub fn generate_phantom(spec: &PhantomSpec, out_dir: &Path) -> Result<(Vec<VolumePair>, DatasetIndex)> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let cases = exec::map_range(spec.n_cases, |i| phantom_case(spec, i));
    let mut pairs = Vec::with_capacity(spec.n_cases);
    let mut records = Vec::new();
    for (i, (ct, mask)) in cases.into_iter().enumerate() {
        let id = PhantomSpec::case_id(i);
        let ct_path = out_dir.join(format!("{id}_ct.npy"));
        let mask_path = out_dir.join(format!("{id}_mask.npy"));
        ct.write_npy(File::create(&ct_path)?)?;
        mask.write_npy(File::create(&mask_path)?)?;
        let mut pair = verify_pair(&id, &ct, &mask);
        pair.ct_path = ct_path;
        pair.mask_path = mask_path;
        for z in 0..spec.slices_per_case {
            records.push(IndexRecord {
                case_id: id.clone(),
                slice_index: z,
                lesion_pixels: lesion_pixel_count(mask.index_axis(Axis(2), z)),
                split: None,
            });
        }
        pairs.push(pair);
    }
    Ok((
        pairs,
        DatasetIndex {
            records,
            source_manifest: None,
        },
    ))
}

/// In-memory normalized slices of every case, in case then slice order.
pub fn phantom_slices(spec: &PhantomSpec) -> Result<Vec<SliceSample>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.n_cases * spec.slices_per_case);
    for i in 0..spec.n_cases {
        let (ct, mask) = phantom_case(spec, i);
        for z in 0..spec.slices_per_case {
            out.push(SliceSample {
                case_id: PhantomSpec::case_id(i),
                slice_index: z,
                image: normalize_slice(ct.index_axis(Axis(2), z))?,
                mask: mask.index_axis(Axis(2), z).to_owned(),
                split: None,
            });
        }
    }
    Ok(out)
}
