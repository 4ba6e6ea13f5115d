//! In-memory 3-D volume representation.

use crate::error::{Error, Result};

/// One 3-D magnitude image with voxel grid metadata.
///
/// Data is stored x-fastest (column-major, the NIfTI convention) as f32;
/// all fitting converts to f64 per voxel. `raw_header` keeps the original
/// on-disk header bytes, if any, so unknown fields survive a rewrite.
#[derive(Clone, Debug)]
pub struct EchoVolume {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub affine: [[f64; 4]; 4],
    pub data: Vec<f32>,
    pub(crate) raw_header: Option<Box<[u8; 348]>>,
}

impl EchoVolume {
    pub fn new(
        dims: [usize; 3],
        voxel_size: [f64; 3],
        affine: [[f64; 4]; 4],
        data: Vec<f32>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("volume dims must be positive: {dims:?}")));
        }
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::invalid(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        if voxel_size.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::invalid(format!(
                "voxel size must be positive: {voxel_size:?}"
            )));
        }
        Ok(EchoVolume {
            dims,
            voxel_size,
            affine,
            data,
            raw_header: None,
        })
    }

    /// A volume with the identity orientation scaled by the voxel size.
    pub fn from_data(dims: [usize; 3], voxel_size: [f64; 3], data: Vec<f32>) -> Result<Self> {
        let mut affine = [[0.0; 4]; 4];
        for (i, row) in affine.iter_mut().enumerate().take(3) {
            row[i] = voxel_size[i];
        }
        affine[3][3] = 1.0;
        EchoVolume::new(dims, voxel_size, affine, data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// True when the grids are compatible for voxelwise operations.
    pub fn same_grid(&self, other: &EchoVolume) -> bool {
        self.dims == other.dims
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks() {
        assert!(EchoVolume::from_data([2, 3, 4], [1.0; 3], vec![0.0; 24]).is_ok());
        assert!(EchoVolume::from_data([2, 3, 4], [1.0; 3], vec![0.0; 23]).is_err());
        assert!(EchoVolume::from_data([0, 3, 4], [1.0; 3], vec![]).is_err());
        assert!(EchoVolume::from_data([1, 1, 1], [0.0, 1.0, 1.0], vec![0.0]).is_err());
    }

    #[test]
    fn indexing_is_x_fastest() {
        let v = EchoVolume::from_data([3, 4, 5], [1.0; 3], vec![0.0; 60]).unwrap();
        assert_eq!(v.index(0, 0, 0), 0);
        assert_eq!(v.index(1, 0, 0), 1);
        assert_eq!(v.index(0, 1, 0), 3);
        assert_eq!(v.index(0, 0, 1), 12);
        assert_eq!(v.index(2, 3, 4), 59);
    }
}
