//! Strict NIfTI-1 subset: uncompressed single-file `.nii`, little-endian,
//! datatypes uint8 / int16 / float32 on read, float32 on write.
//!
//! Axis mapping: `dim[1..=3]` are the `(D, H, W)` extents of the returned
//! volume and `pixdim[1..=3]` the spacing in that order. The file stores
//! `dim[1]` fastest while [`Volume`] stores `W` fastest, so reads and writes
//! transpose.

use thiserror::Error;

use crate::tensor::Volume;

pub const HEADER_SIZE: usize = 348;
/// Header plus the four-byte extension flag block.
pub const MIN_VOX_OFFSET: usize = 352;
pub const MAX_DIM: usize = 512;
pub const MAGIC_SINGLE_FILE: &[u8; 4] = b"n+1\0";
pub const MAGIC_PAIR: &[u8; 4] = b"ni1\0";

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NiftiError {
    #[error("bad magic in `{field}`: {detail}")]
    BadMagic { field: &'static str, detail: String },
    #[error("unsupported `{field}`: {detail}")]
    UnsupportedDatatype { field: &'static str, detail: String },
    #[error("truncated payload (`{field}`): {detail}")]
    TruncatedPayload { field: &'static str, detail: String },
    #[error("`{field}` out of range: {detail}")]
    DimOutOfRange { field: &'static str, detail: String },
    #[error("non-finite voxel at linear index {index}")]
    NonFiniteVoxel { index: usize },
}

impl NiftiError {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::BadMagic { .. } => "BadMagic",
            Self::UnsupportedDatatype { .. } => "UnsupportedDatatype",
            Self::TruncatedPayload { .. } => "TruncatedPayload",
            Self::DimOutOfRange { .. } => "DimOutOfRange",
            Self::NonFiniteVoxel { .. } => "NonFiniteVoxel",
        }
    }

    pub fn field(&self) -> &'static str {
        match self {
            Self::BadMagic { field, .. }
            | Self::UnsupportedDatatype { field, .. }
            | Self::TruncatedPayload { field, .. }
            | Self::DimOutOfRange { field, .. } => field,
            Self::NonFiniteVoxel { .. } => "voxels",
        }
    }
}

/// The header fields this codec honors.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub sizeof_hdr: i32,
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub magic: [u8; 4],
}

impl NiftiHeader {
    /// Header for a float32 volume as written by [`write_nifti`].
    pub fn for_float32(dims: [usize; 3], spacing: [f32; 3]) -> Self {
        let mut dim = [1i16; 8];
        dim[0] = 3;
        for k in 0..3 {
            dim[k + 1] = dims[k] as i16;
        }
        let mut pixdim = [1.0f32; 8];
        pixdim[1..4].copy_from_slice(&spacing);
        Self {
            sizeof_hdr: HEADER_SIZE as i32,
            dim,
            datatype: DT_FLOAT32,
            bitpix: 32,
            pixdim,
            vox_offset: MIN_VOX_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            magic: *MAGIC_SINGLE_FILE,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.dim[1] as usize, self.dim[2] as usize, self.dim[3] as usize]
    }

    pub fn spacing(&self) -> [f32; 3] {
        [self.pixdim[1], self.pixdim[2], self.pixdim[3]]
    }

    pub fn voxel_count(&self) -> usize {
        self.dims().iter().product()
    }

    /// Parses and validates the first 348 bytes.
    pub fn parse(bytes: &[u8]) -> Result<Self, NiftiError> {
        if bytes.len() < MIN_VOX_OFFSET {
            return Err(NiftiError::TruncatedPayload {
                field: "header",
                detail: format!("{} bytes, need at least {MIN_VOX_OFFSET}", bytes.len()),
            });
        }
        let sizeof_hdr = le_i32(bytes, 0);
        if sizeof_hdr != HEADER_SIZE as i32 {
            return Err(NiftiError::BadMagic {
                field: "sizeof_hdr",
                detail: format!("{sizeof_hdr}, expected 348 little-endian"),
            });
        }
        let mut magic = [0u8; 4];
        magic.copy_from_slice(&bytes[344..348]);
        if &magic == MAGIC_PAIR {
            return Err(NiftiError::UnsupportedDatatype {
                field: "magic",
                detail: "header/image pair (.hdr/.img) layout is not supported".into(),
            });
        }
        if &magic != MAGIC_SINGLE_FILE {
            return Err(NiftiError::BadMagic { field: "magic", detail: format!("{magic:02x?}") });
        }

        let mut dim = [0i16; 8];
        for (k, d) in dim.iter_mut().enumerate() {
            *d = le_i16(bytes, 40 + 2 * k);
        }
        let datatype = le_i16(bytes, 70);
        let bitpix = le_i16(bytes, 72);
        let mut pixdim = [0f32; 8];
        for (k, p) in pixdim.iter_mut().enumerate() {
            *p = le_f32(bytes, 76 + 4 * k);
        }
        let header = Self {
            sizeof_hdr,
            dim,
            datatype,
            bitpix,
            pixdim,
            vox_offset: le_f32(bytes, 108),
            scl_slope: le_f32(bytes, 112),
            scl_inter: le_f32(bytes, 116),
            magic,
        };
        header.validate()?;
        Ok(header)
    }

    fn validate(&self) -> Result<(), NiftiError> {
        let rank = self.dim[0];
        if !(1..=7).contains(&rank) {
            return Err(NiftiError::DimOutOfRange { field: "dim[0]", detail: format!("{rank}, expected 1..=7") });
        }
        let rank = rank as usize;
        for k in 1..=3 {
            let d = self.dim[k];
            // Axes beyond the declared rank are treated as singleton.
            if k > rank {
                continue;
            }
            if d < 1 || d as usize > MAX_DIM {
                return Err(NiftiError::DimOutOfRange {
                    field: DIM_FIELDS[k],
                    detail: format!("{d}, expected 1..={MAX_DIM}"),
                });
            }
        }
        for k in 4..=rank {
            if self.dim[k] != 1 {
                return Err(NiftiError::DimOutOfRange {
                    field: DIM_FIELDS[k],
                    detail: format!("{}, only singleton trailing dimensions are accepted", self.dim[k]),
                });
            }
        }
        for k in 1..=3 {
            let p = self.pixdim[k];
            if k <= rank && !(p.is_finite() && p > 0.0) {
                return Err(NiftiError::DimOutOfRange {
                    field: PIXDIM_FIELDS[k],
                    detail: format!("{p}, expected a positive finite spacing"),
                });
            }
        }
        let expected_bitpix = match self.datatype {
            DT_UINT8 => 8,
            DT_INT16 => 16,
            DT_FLOAT32 => 32,
            other => {
                return Err(NiftiError::UnsupportedDatatype {
                    field: "datatype",
                    detail: format!("{other}, expected 2, 4 or 16"),
                })
            }
        };
        if self.bitpix != expected_bitpix {
            return Err(NiftiError::UnsupportedDatatype {
                field: "bitpix",
                detail: format!("{} does not match datatype {}", self.bitpix, self.datatype),
            });
        }
        let off = self.vox_offset;
        if !off.is_finite() || off.fract() != 0.0 || off < MIN_VOX_OFFSET as f32 {
            return Err(NiftiError::TruncatedPayload {
                field: "vox_offset",
                detail: format!("{off}, expected an integer >= {MIN_VOX_OFFSET}"),
            });
        }
        for (field, v) in [("scl_slope", self.scl_slope), ("scl_inter", self.scl_inter)] {
            if !v.is_finite() {
                return Err(NiftiError::UnsupportedDatatype { field, detail: format!("non-finite value {v}") });
            }
        }
        Ok(())
    }

    /// Normalizes rank: axes beyond `dim[0]` become 1.
    fn effective(mut self) -> Self {
        let rank = self.dim[0] as usize;
        for k in (rank + 1)..=3 {
            self.dim[k] = 1;
            self.pixdim[k] = 1.0;
        }
        self
    }

    fn to_bytes(&self) -> [u8; HEADER_SIZE] {
        let mut b = [0u8; HEADER_SIZE];
        b[0..4].copy_from_slice(&self.sizeof_hdr.to_le_bytes());
        b[38] = b'r';
        for k in 0..8 {
            b[40 + 2 * k..42 + 2 * k].copy_from_slice(&self.dim[k].to_le_bytes());
        }
        b[70..72].copy_from_slice(&self.datatype.to_le_bytes());
        b[72..74].copy_from_slice(&self.bitpix.to_le_bytes());
        for k in 0..8 {
            b[76 + 4 * k..80 + 4 * k].copy_from_slice(&self.pixdim[k].to_le_bytes());
        }
        b[108..112].copy_from_slice(&self.vox_offset.to_le_bytes());
        b[112..116].copy_from_slice(&self.scl_slope.to_le_bytes());
        b[116..120].copy_from_slice(&self.scl_inter.to_le_bytes());
        // xyzt_units: millimetres.
        b[123] = 2;
        b[344..348].copy_from_slice(&self.magic);
        b
    }
}

const DIM_FIELDS: [&str; 8] = ["dim[0]", "dim[1]", "dim[2]", "dim[3]", "dim[4]", "dim[5]", "dim[6]", "dim[7]"];
const PIXDIM_FIELDS: [&str; 4] = ["pixdim[0]", "pixdim[1]", "pixdim[2]", "pixdim[3]"];

/// Decoded image: header, voxels (scaling applied) and spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiImage {
    pub header: NiftiHeader,
    pub voxels: Volume<f32>,
    pub spacing: [f32; 3],
}

/// Decodes a single-file NIfTI-1 byte buffer.
pub fn read_nifti(bytes: &[u8]) -> Result<NiftiImage, NiftiError> {
    let header = NiftiHeader::parse(bytes)?.effective();
    let dims = header.dims();
    let n = header.voxel_count();
    let width = header.bitpix as usize / 8;
    let start = header.vox_offset as usize;
    let needed = start.checked_add(n * width).unwrap_or(usize::MAX);
    if needed > bytes.len() {
        return Err(NiftiError::TruncatedPayload {
            field: "dim",
            detail: format!("payload needs {needed} bytes, buffer has {}", bytes.len()),
        });
    }
    let payload = &bytes[start..needed];
    // slope 0 means "no scaling" by convention
    let slope = if header.scl_slope == 0.0 { 1.0 } else { header.scl_slope as f64 };
    let inter = header.scl_inter as f64;
    let identity = slope == 1.0 && inter == 0.0;

    let [d0, d1, d2] = dims;
    let mut out = vec![0f32; n];
    for (file_idx, chunk) in payload.chunks_exact(width).enumerate() {
        let raw = match header.datatype {
            DT_UINT8 => chunk[0] as f64,
            DT_INT16 => i16::from_le_bytes([chunk[0], chunk[1]]) as f64,
            _ => f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64,
        };
        let value = if identity { raw as f32 } else { (slope * raw + inter) as f32 };
        if !value.is_finite() {
            return Err(NiftiError::NonFiniteVoxel { index: file_idx });
        }
        // file order: axis 0 fastest
        let i0 = file_idx % d0;
        let i1 = (file_idx / d0) % d1;
        let i2 = file_idx / (d0 * d1);
        out[(i0 * d1 + i1) * d2 + i2] = value;
    }
    Ok(NiftiImage { spacing: header.spacing(), voxels: Volume::from_vec(dims, out), header })
}

/// Encodes a volume as float32 NIfTI-1 (348-byte header, 4 zero bytes,
/// little-endian payload).
pub fn write_nifti(volume: &Volume<f32>, spacing: [f32; 3]) -> Result<Vec<u8>, NiftiError> {
    let dims = volume.dims();
    for (k, &d) in dims.iter().enumerate() {
        if d < 1 || d > MAX_DIM {
            return Err(NiftiError::DimOutOfRange {
                field: DIM_FIELDS[k + 1],
                detail: format!("{d}, expected 1..={MAX_DIM}"),
            });
        }
    }
    for (k, &p) in spacing.iter().enumerate() {
        if !(p.is_finite() && p > 0.0) {
            return Err(NiftiError::DimOutOfRange {
                field: PIXDIM_FIELDS[k + 1],
                detail: format!("{p}, expected a positive finite spacing"),
            });
        }
    }
    if let Some(index) = volume.data().iter().position(|v| !v.is_finite()) {
        return Err(NiftiError::NonFiniteVoxel { index });
    }
    let header = NiftiHeader::for_float32(dims, spacing);
    let mut bytes = Vec::with_capacity(MIN_VOX_OFFSET + 4 * volume.len());
    bytes.extend_from_slice(&header.to_bytes());
    bytes.extend_from_slice(&[0u8; 4]);
    let [d0, d1, d2] = dims;
    for i2 in 0..d2 {
        for i1 in 0..d1 {
            for i0 in 0..d0 {
                let v = volume.data()[(i0 * d1 + i1) * d2 + i2];
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(bytes)
}

#[inline]
fn le_i16(b: &[u8], at: usize) -> i16 {
    i16::from_le_bytes([b[at], b[at + 1]])
}

#[inline]
fn le_i32(b: &[u8], at: usize) -> i32 {
    i32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

#[inline]
fn le_f32(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}
