//! On-disk formats: the binary model container, PFM depth maps with PNG
//! validity masks, PGM images, 16-bit PNG channel exports and the JSON
//! sidecar files for representations, scene ground truth and dataset
//! manifests.

mod fmm;
mod pfm;
mod pgm;
mod png;

pub use fmm::{read_model, read_model_header, write_model, ModelHeader, FMM_MAGIC};
pub use pfm::{read_depth, read_pfm, write_depth, write_pfm};
pub use pgm::{read_pgm, write_pgm};
pub use png::{
    read_mask_png, write_channel_map_png16, write_mask_png, write_scalar_png16,
};

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TextureCoeffs;
use crate::pose::Representation;
use crate::sfs::Lighting;

/// Representation on disk: a flat value array
/// `[id..., exp..., yaw, pitch, roll, tx, ty, scale]` with the basis
/// dimensions alongside.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepresentationFile {
    pub d_id: usize,
    pub d_exp: usize,
    pub values: Vec<f64>,
}

impl RepresentationFile {
    pub fn from_representation(rep: &Representation) -> Self {
        RepresentationFile {
            d_id: rep.geometry.id.len(),
            d_exp: rep.geometry.exp.len(),
            values: rep.flat(),
        }
    }

    pub fn into_representation(self) -> Result<Representation> {
        Representation::from_flat(self.d_id, self.d_exp, &self.values)
    }
}

fn json_to_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

fn json_from_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

pub fn write_representation(path: &Path, rep: &Representation) -> Result<()> {
    json_to_file(path, &RepresentationFile::from_representation(rep))
}

pub fn read_representation(path: &Path) -> Result<Representation> {
    json_from_file::<RepresentationFile>(path)?.into_representation()
}

/// Ground truth of a synthetic scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneTruth {
    pub schema_version: u32,
    pub representation: RepresentationFile,
    pub lighting: [f64; 4],
    pub texture_coeffs: Vec<f64>,
    pub background: f64,
    pub beta: f64,
}

pub fn write_scene_truth(
    path: &Path,
    rep: &Representation,
    lighting: &Lighting,
    texcoeffs: &TextureCoeffs,
    background: f64,
    beta: f64,
) -> Result<()> {
    json_to_file(
        path,
        &SceneTruth {
            schema_version: 1,
            representation: RepresentationFile::from_representation(rep),
            lighting: lighting.l,
            texture_coeffs: texcoeffs.coeffs.iter().cloned().collect(),
            background,
            beta,
        },
    )
}

pub fn read_scene_truth(path: &Path) -> Result<SceneTruth> {
    json_from_file(path)
}

/// One dataset scene's file locations and perturbation blend factor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestScene {
    pub index: usize,
    pub beta: f64,
    pub image: String,
    pub depth: String,
    pub mask: String,
    pub truth: String,
    pub perturbed: String,
}

/// Dataset manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub scenes: Vec<ManifestScene>,
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    json_to_file(path, manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    json_from_file(path)
}

/// Recovered lighting and texture coefficients, exposed for inspection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveredIllumination {
    pub lighting: [f64; 4],
    pub texture_coeffs: Vec<f64>,
}

pub fn write_recovered_illumination(
    path: &Path,
    lighting: &Lighting,
    texcoeffs: &TextureCoeffs,
) -> Result<()> {
    json_to_file(
        path,
        &RecoveredIllumination {
            lighting: lighting.l,
            texture_coeffs: texcoeffs.coeffs.iter().cloned().collect(),
        },
    )
}

pub fn write_stats(path: &Path, stats: &crate::eval::DepthErrorStats) -> Result<()> {
    json_to_file(path, stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GeometryCoeffs;
    use crate::pose::Pose;
    use nalgebra::DVector;

    #[test]
    fn representation_json_round_trip() {
        let rep = Representation {
            geometry: GeometryCoeffs {
                id: DVector::from_vec(vec![0.5, -1.25, 3.0]),
                exp: DVector::from_vec(vec![0.125]),
            },
            pose: Pose {
                yaw: 0.1,
                pitch: -0.2,
                roll: 0.3,
                tx: 4.0,
                ty: -5.0,
                scale: 1.5,
            },
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rep.json");
        write_representation(&path, &rep).unwrap();
        let back = read_representation(&path).unwrap();
        assert_eq!(rep, back);
    }
}
