//! Probability volumes stored as rank-3 `f64` tensors `[planes, height, width]`.

use std::path::Path;

use super::tensor::{read_tensor, write_tensor, RawTensor, TensorData};
use crate::error::{Result, VosError};
use crate::frame::ProbabilityVolume;

pub fn write_volume(path: &Path, volume: &ProbabilityVolume) -> Result<()> {
    let tensor = RawTensor::f64(
        vec![volume.planes(), volume.height(), volume.width()],
        volume.data().to_vec(),
    )?;
    write_tensor(path, &tensor)
}

pub fn read_volume(path: &Path) -> Result<ProbabilityVolume> {
    let tensor = read_tensor(path)?;
    let [planes, height, width] = *tensor.dims() else {
        return Err(VosError::Format(format!(
            "{}: volume must be rank 3, got dims {:?}",
            path.display(),
            tensor.dims()
        )));
    };
    let TensorData::F64(data) = tensor.data().clone() else {
        return Err(VosError::Format(format!("{}: volume must be f64", path.display())));
    };
    ProbabilityVolume::new(width, height, planes, data)
}
