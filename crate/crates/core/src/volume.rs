//! Voxel grids and the scalar fields that live on them.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Regular grid of cubic voxels. Shape is `[nx, ny]` or `[nx, ny, nz]`
/// with x varying fastest in memory. `origin` is the physical position of
/// the grid center (mm).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeGrid {
    pub shape: Vec<usize>,
    pub voxel_size: f64,
    #[serde(default)]
    pub origin: [f64; 3],
}

impl VolumeGrid {
    pub fn new(shape: &[usize], voxel_size: f64) -> Result<Self> {
        if shape.len() != 2 && shape.len() != 3 {
            return Err(invalid(format!("grid must be 2D or 3D, got {} dims", shape.len())));
        }
        if shape.iter().any(|&n| n == 0) {
            return Err(invalid("grid shape entries must be >= 1"));
        }
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(invalid("voxel_size must be positive"));
        }
        Ok(Self {
            shape: shape.to_vec(),
            voxel_size,
            origin: [0.0; 3],
        })
    }

    pub fn square(n: usize, voxel_size: f64) -> Result<Self> {
        Self::new(&[n, n], voxel_size)
    }

    pub fn cube(n: usize, voxel_size: f64) -> Result<Self> {
        Self::new(&[n, n, n], voxel_size)
    }

    pub fn dims(&self) -> usize {
        self.shape.len()
    }

    pub fn nx(&self) -> usize {
        self.shape[0]
    }

    pub fn ny(&self) -> usize {
        self.shape[1]
    }

    pub fn nz(&self) -> usize {
        self.shape.get(2).copied().unwrap_or(1)
    }

    /// Total voxel count `M`.
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shape padded to three entries.
    pub fn shape3(&self) -> [usize; 3] {
        [self.nx(), self.ny(), self.nz()]
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.ny() + iy) * self.nx() + ix
    }

    /// Physical coordinate of voxel center `i` along `axis`.
    #[inline]
    pub fn center(&self, axis: usize, i: usize) -> f64 {
        let n = self.shape3()[axis] as f64;
        self.origin[axis] + (i as f64 - 0.5 * (n - 1.0)) * self.voxel_size
    }

    /// Continuous voxel index of physical coordinate `c` along `axis`.
    #[inline]
    pub fn fractional_index(&self, axis: usize, c: f64) -> f64 {
        let n = self.shape3()[axis] as f64;
        (c - self.origin[axis]) / self.voxel_size + 0.5 * (n - 1.0)
    }

    pub fn voxel_position(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        let z = if self.dims() == 3 { self.center(2, iz) } else { self.origin[2] };
        [self.center(0, ix), self.center(1, iy), z]
    }
}

/// Scalar attenuation field (mm⁻¹) on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub grid: VolumeGrid,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn zeros(grid: &VolumeGrid) -> Self {
        Self {
            data: vec![0.0; grid.len()],
            grid: grid.clone(),
        }
    }

    pub fn filled(grid: &VolumeGrid, value: f64) -> Self {
        Self {
            data: vec![value; grid.len()],
            grid: grid.clone(),
        }
    }

    pub fn from_vec(grid: &VolumeGrid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "volume data has {} values, grid {:?} needs {}",
                data.len(),
                grid.shape,
                grid.len()
            )));
        }
        Ok(Self { grid: grid.clone(), data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> f64 {
        self.data[self.grid.index(ix, iy, iz)]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn ensure_same_shape(&self, other: &Volume) -> Result<()> {
        if self.grid.shape != other.grid.shape {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.grid.shape, other.grid.shape
            )));
        }
        Ok(())
    }

    /// Extracts the `axis`-normal slice at `index` as a row-major 2D array
    /// (`rows`, `cols`, data).
    pub fn slice(&self, axis: usize, index: usize) -> (usize, usize, Vec<f64>) {
        let [nx, ny, nz] = self.grid.shape3();
        match axis {
            2 => {
                let d = (0..ny)
                    .flat_map(|y| (0..nx).map(move |x| (x, y)))
                    .map(|(x, y)| self.get(x, y, index))
                    .collect();
                (ny, nx, d)
            }
            1 => {
                let d = (0..nz)
                    .flat_map(|z| (0..nx).map(move |x| (x, z)))
                    .map(|(x, z)| self.get(x, index, z))
                    .collect();
                (nz, nx, d)
            }
            _ => {
                let d = (0..nz)
                    .flat_map(|z| (0..ny).map(move |y| (y, z)))
                    .map(|(y, z)| self.get(index, y, z))
                    .collect();
                (nz, ny, d)
            }
        }
    }
}
