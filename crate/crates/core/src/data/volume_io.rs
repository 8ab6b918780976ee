//! Volume readers: NIfTI-1 (`.nii`, `.nii.gz`) and `.npy` arrays.

use std::fs::File;
use std::path::Path;

use ndarray::{Array3, ArrayD, Ix3};
use ndarray_npy::ReadNpyExt;
use nifti::{IntoNdArray, NiftiObject, ReaderOptions};

use crate::error::{Error, Result};

/// A `(height, width, depth)` volume with voxel spacing in mm.
#[derive(Clone, Debug)]
pub struct VolumeFile {
    pub data: Array3<f64>,
    pub spacing: (f64, f64, f64),
}

fn volume_err(path: &Path, message: impl ToString) -> Error {
    Error::Volume {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

fn to_3d(path: &Path, a: ArrayD<f64>) -> Result<Array3<f64>> {
    // trailing singleton axes (e.g. a 4D file with one time point) are dropped
    let mut a = a;
    while a.ndim() > 3 && a.shape()[a.ndim() - 1] == 1 {
        let last = ndarray::Axis(a.ndim() - 1);
        a = a.index_axis_move(last, 0);
    }
    a.into_dimensionality::<Ix3>()
        .map_err(|e| volume_err(path, format!("expected a 3D volume: {e}")))
}

fn read_npy(path: &Path) -> Result<ArrayD<f64>> {
    macro_rules! try_dtype {
        ($($t:ty),+) => {
            $(
                if let Ok(a) = ArrayD::<$t>::read_npy(File::open(path)?) {
                    return Ok(a.mapv(|v| v as f64));
                }
            )+
        };
    }
    if let Ok(a) = ArrayD::<f64>::read_npy(File::open(path)?) {
        return Ok(a);
    }
    try_dtype!(f32, u8, i8, i16, u16, i32, u32, i64);
    Err(volume_err(path, "unsupported or corrupt .npy array"))
}

pub fn load_volume(path: &Path) -> Result<VolumeFile> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    if name.ends_with(".npy") {
        let data = to_3d(path, read_npy(path)?)?;
        return Ok(VolumeFile {
            data,
            spacing: (1.0, 1.0, 1.0),
        });
    }
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        let obj = ReaderOptions::new()
            .read_file(path)
            .map_err(|e| volume_err(path, e))?;
        let pixdim = obj.header().pixdim;
        let spacing = |i: usize| {
            let v = pixdim[i].abs() as f64;
            if v > 0.0 {
                v
            } else {
                1.0
            }
        };
        let arr = obj
            .into_volume()
            .into_ndarray::<f64>()
            .map_err(|e| volume_err(path, e))?;
        return Ok(VolumeFile {
            data: to_3d(path, arr)?,
            spacing: (spacing(1), spacing(2), spacing(3)),
        });
    }
    Err(volume_err(path, "unrecognized extension (expected .nii, .nii.gz or .npy)"))
}
