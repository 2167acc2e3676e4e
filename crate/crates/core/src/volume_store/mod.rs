//! Persistence: the NIfTI-1 subset codec and the dataset manifest.

pub mod manifest;
pub mod nifti;

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use manifest::{DatasetManifest, ManifestEntry, ManifestError, Split, SubjectInfo};
pub use nifti::{read_nifti, write_nifti, NiftiError, NiftiHeader, NiftiImage};

use crate::tensor::Volume;

/// One scan with its identity within a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeRecord {
    pub subject_id: String,
    pub contrast_id: String,
    pub timepoint: u32,
    pub voxels: Volume<f32>,
    pub spacing_mm: [f32; 3],
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Codec { path: PathBuf, source: NiftiError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("{path}: shape {found:?} differs from manifest shape {expected:?}")]
    ShapeMismatch { path: PathBuf, expected: [usize; 3], found: [usize; 3] },
    #[error("subject `{0}` has no tissue map")]
    NoTissueMap(String),
}

pub fn read_nifti_file(path: &Path) -> Result<NiftiImage, StoreError> {
    let bytes = fs::read(path).map_err(|source| StoreError::Io { path: path.to_owned(), source })?;
    read_nifti(&bytes).map_err(|source| StoreError::Codec { path: path.to_owned(), source })
}

pub fn write_nifti_file(path: &Path, volume: &Volume<f32>, spacing: [f32; 3]) -> Result<(), StoreError> {
    let bytes = write_nifti(volume, spacing).map_err(|source| StoreError::Codec { path: path.to_owned(), source })?;
    fs::write(path, bytes).map_err(|source| StoreError::Io { path: path.to_owned(), source })
}

impl DatasetManifest {
    /// Reads the image behind `entry`, checking it against the declared shape.
    pub fn read_entry(&self, entry: &ManifestEntry) -> Result<VolumeRecord, StoreError> {
        let path = self.resolve(&entry.path);
        let img = read_nifti_file(&path)?;
        if img.voxels.dims() != self.shape {
            return Err(StoreError::ShapeMismatch { path, expected: self.shape, found: img.voxels.dims() });
        }
        Ok(VolumeRecord {
            subject_id: entry.subject_id.clone(),
            contrast_id: entry.contrast_id.clone(),
            timepoint: entry.timepoint,
            voxels: img.voxels,
            spacing_mm: img.spacing,
        })
    }

    /// Reads a subject's tissue label map as integer codes.
    pub fn read_tissue_map(&self, subject: &str) -> Result<Volume<u8>, StoreError> {
        let rel = self
            .subject(subject)
            .and_then(|s| s.tissue_map.clone())
            .ok_or_else(|| StoreError::NoTissueMap(subject.to_owned()))?;
        let path = self.resolve(&rel);
        let img = read_nifti_file(&path)?;
        if img.voxels.dims() != self.shape {
            return Err(StoreError::ShapeMismatch { path, expected: self.shape, found: img.voxels.dims() });
        }
        Ok(img.voxels.map(|v| v.round().clamp(0.0, 255.0) as u8))
    }

    /// Decodes every referenced file once, verifying codec validity and shape.
    pub fn verify_codec(&self) -> Result<(), StoreError> {
        for e in &self.entries {
            self.read_entry(e)?;
        }
        for s in &self.subjects {
            if s.tissue_map.is_some() {
                self.read_tissue_map(&s.subject_id)?;
            }
        }
        Ok(())
    }
}
