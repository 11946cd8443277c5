//! 3D voxel volumes, 2D transverse slices, and the conversions between
//! them.
//!
//! Voxels are stored as `f64` in a `[z, y, x]` array so that the fastest
//! varying in-memory axis matches the NIfTI on-disk order and a transverse
//! slice is one contiguous plane.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::error::{Error, Result};

/// Interpretation of the stored voxel values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ValueKind {
    /// CT radiodensity in Hounsfield units.
    Hu,
    /// Values normalized into `[0, 1]`.
    Normalized,
    /// Scanner-native MRI intensities (arbitrary scale).
    RawMri,
    /// Freshly read or restacked values whose semantics the caller assigns.
    Raw,
}

/// Spatial orientation carried verbatim from / to the NIfTI header.
///
/// The toolkit never reorients volumes; these fields exist so that
/// restacked outputs keep the metadata of their source.
#[derive(Debug, Clone, PartialEq)]
pub struct Orientation {
    pub qform_code: i16,
    pub sform_code: i16,
    /// Quaternion parameters (b, c, d).
    pub quatern: [f64; 3],
    pub qoffset: [f64; 3],
    /// Rows x, y, z of the sform affine.
    pub srow: [[f64; 4]; 3],
    /// Stride sign factor (pixdim[0] in the header).
    pub qfac: f64,
}

impl Default for Orientation {
    fn default() -> Self {
        Orientation {
            qform_code: 0,
            sform_code: 1,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow: [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ],
            qfac: 1.0,
        }
    }
}

/// Grid shape, voxel spacing and orientation of a volume.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGeometry {
    /// (nx, ny, nz), all positive.
    pub dims: (usize, usize, usize),
    /// (sx, sy, sz) in mm, all strictly positive.
    pub spacing: (f64, f64, f64),
    pub orientation: Orientation,
}

impl VolumeGeometry {
    pub fn new(dims: (usize, usize, usize), spacing: (f64, f64, f64)) -> Result<Self> {
        let g = VolumeGeometry {
            dims,
            spacing,
            orientation: Orientation::default(),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let (nx, ny, nz) = self.dims;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::Dimension(format!(
                "volume dims must be positive, got ({nx}, {ny}, {nz})"
            )));
        }
        let (sx, sy, sz) = self.spacing;
        if !(sx > 0.0 && sy > 0.0 && sz > 0.0)
            || !(sx.is_finite() && sy.is_finite() && sz.is_finite())
        {
            return Err(Error::Dimension(format!(
                "voxel spacing must be strictly positive, got ({sx}, {sy}, {sz})"
            )));
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }
}

/// A 3D voxel grid with geometry and value semantics.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    /// Shape `[nz, ny, nx]`.
    voxels: Array3<f64>,
    geometry: VolumeGeometry,
    value_kind: ValueKind,
}

impl Volume {
    /// Builds a volume, checking the geometry invariants, the voxel count
    /// and (for [`ValueKind::Normalized`]) the `[0, 1]` range.
    pub fn new(
        voxels: Array3<f64>,
        geometry: VolumeGeometry,
        value_kind: ValueKind,
    ) -> Result<Self> {
        geometry.validate()?;
        let (nx, ny, nz) = geometry.dims;
        if voxels.dim() != (nz, ny, nx) {
            return Err(Error::Dimension(format!(
                "voxel array shape {:?} does not match dims ({nx}, {ny}, {nz}) (expected [nz, ny, nx])",
                voxels.dim()
            )));
        }
        let v = Volume {
            voxels,
            geometry,
            value_kind,
        };
        v.check_kind(value_kind)?;
        Ok(v)
    }

    fn check_kind(&self, kind: ValueKind) -> Result<()> {
        if kind == ValueKind::Normalized {
            if let Some(bad) = self
                .voxels
                .iter()
                .find(|v| !(0.0..=1.0).contains(*v) || !v.is_finite())
            {
                return Err(Error::Precondition(format!(
                    "normalized volume contains value {bad} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// Re-tags the voxel values without touching them. Tagging as
    /// `Normalized` verifies the `[0, 1]` range.
    pub fn reinterpret(mut self, kind: ValueKind) -> Result<Self> {
        self.check_kind(kind)?;
        self.value_kind = kind;
        Ok(self)
    }

    pub fn voxels(&self) -> &Array3<f64> {
        &self.voxels
    }

    pub fn view(&self) -> ArrayView3<'_, f64> {
        self.voxels.view()
    }

    pub fn into_voxels(self) -> Array3<f64> {
        self.voxels
    }

    pub fn geometry(&self) -> &VolumeGeometry {
        &self.geometry
    }

    /// (nx, ny, nz).
    pub fn dims(&self) -> (usize, usize, usize) {
        self.geometry.dims
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.geometry.spacing
    }

    pub fn value_kind(&self) -> ValueKind {
        self.value_kind
    }

    /// Applies `f` to every voxel, producing a volume with the same
    /// geometry and the given value kind.
    pub fn map(&self, kind: ValueKind, f: impl FnMut(f64) -> f64) -> Result<Volume> {
        Volume::new(self.voxels.mapv(f), self.geometry.clone(), kind)
    }

    /// View of the transverse plane at height `z`, shape `[ny, nx]`.
    pub fn plane(&self, z: usize) -> ArrayView2<'_, f64> {
        self.voxels.index_axis(Axis(0), z)
    }
}

/// One transverse plane of a volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    /// Shape `[ny, nx]`.
    pub pixels: Array2<f64>,
    /// Transverse position in the parent volume (0-based).
    pub index: usize,
    /// In-plane spacing (sx, sy) in mm.
    pub spacing: (f64, f64),
}

impl Slice {
    /// (nx, ny).
    pub fn dims(&self) -> (usize, usize) {
        let (ny, nx) = self.pixels.dim();
        (nx, ny)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.pixels.view()
    }
}

/// Decomposes a volume into its nz transverse slices in ascending z order.
pub fn extract_transverse_slices(volume: &Volume) -> Vec<Slice> {
    let (sx, sy, _) = volume.spacing();
    (0..volume.dims().2)
        .map(|z| Slice {
            pixels: volume.plane(z).to_owned(),
            index: z,
            spacing: (sx, sy),
        })
        .collect()
}

/// Restacks transverse slices into a volume with the given geometry.
///
/// The result is tagged [`ValueKind::Raw`]; callers that know the value
/// semantics re-tag it with [`Volume::reinterpret`].
pub fn stack_slices(slices: &[Slice], geometry: &VolumeGeometry) -> Result<Volume> {
    geometry.validate()?;
    let (nx, ny, nz) = geometry.dims;
    if slices.len() != nz {
        return Err(Error::Dimension(format!(
            "expected {nz} slices to fill the target geometry, got {}",
            slices.len()
        )));
    }
    let mut voxels = Array3::zeros((nz, ny, nx));
    for (z, slice) in slices.iter().enumerate() {
        if slice.pixels.dim() != (ny, nx) {
            return Err(Error::Dimension(format!(
                "slice {z} has in-plane shape {:?}, expected ({ny}, {nx})",
                slice.pixels.dim()
            )));
        }
        voxels.index_axis_mut(Axis(0), z).assign(&slice.pixels);
    }
    Volume::new(voxels, geometry.clone(), ValueKind::Raw)
}
