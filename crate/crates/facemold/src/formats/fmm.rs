//! Binary morphable-model container.
//!
//! Layout, all little-endian: the magic string "FMM1"; five u32 header fields
//! (vertex count, triangle count, d_id, d_exp, d_tex); triangle indices as
//! u32 triples; then f64 arrays in field order: mean shape (3N), identity
//! basis (3N x d_id, column major), expression basis (3N x d_exp), mean
//! texture (N), texture basis (N x d_tex), normalized mean (3N).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::MorphableModel;

pub const FMM_MAGIC: &[u8; 4] = b"FMM1";

/// Container header, as printed by `facemold model-info`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelHeader {
    pub vertex_count: u32,
    pub triangle_count: u32,
    pub d_id: u32,
    pub d_exp: u32,
    pub d_tex: u32,
}

pub fn write_model(path: &Path, model: &MorphableModel) -> Result<()> {
    model.validate()?;
    let err = |e| Error::io(path.display().to_string(), e);
    let file = File::create(path).map_err(err)?;
    let mut w = BufWriter::new(file);
    w.write_all(FMM_MAGIC).map_err(err)?;
    for v in [
        model.vertex_count as u32,
        model.triangles.len() as u32,
        model.d_id() as u32,
        model.d_exp() as u32,
        model.d_tex() as u32,
    ] {
        w.write_u32::<LittleEndian>(v).map_err(err)?;
    }
    for tri in &model.triangles {
        for idx in tri {
            w.write_u32::<LittleEndian>(*idx).map_err(err)?;
        }
    }
    let arrays: [&[f64]; 6] = [
        model.mean_shape.as_slice(),
        model.id_basis.as_slice(),
        model.exp_basis.as_slice(),
        model.mean_texture.as_slice(),
        model.tex_basis.as_slice(),
        model.normalized_mean.as_slice(),
    ];
    for array in arrays {
        for v in array {
            w.write_f64::<LittleEndian>(*v).map_err(err)?;
        }
    }
    w.flush().map_err(err)
}

fn read_header(r: &mut impl Read, path: &Path) -> Result<ModelHeader> {
    let err = |e| Error::io(path.display().to_string(), e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(err)?;
    if &magic != FMM_MAGIC {
        return Err(Error::format(
            path.display().to_string(),
            format!("bad magic {magic:?}, expected \"FMM1\""),
        ));
    }
    Ok(ModelHeader {
        vertex_count: r.read_u32::<LittleEndian>().map_err(err)?,
        triangle_count: r.read_u32::<LittleEndian>().map_err(err)?,
        d_id: r.read_u32::<LittleEndian>().map_err(err)?,
        d_exp: r.read_u32::<LittleEndian>().map_err(err)?,
        d_tex: r.read_u32::<LittleEndian>().map_err(err)?,
    })
}

pub fn read_model_header(path: &Path) -> Result<ModelHeader> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_header(&mut BufReader::new(file), path)
}

pub fn read_model(path: &Path) -> Result<MorphableModel> {
    let err = |e| Error::io(path.display().to_string(), e);
    let file = File::open(path).map_err(err)?;
    let mut r = BufReader::new(file);
    let header = read_header(&mut r, path)?;
    let n = header.vertex_count as usize;
    let t = header.triangle_count as usize;
    let (d_id, d_exp, d_tex) = (
        header.d_id as usize,
        header.d_exp as usize,
        header.d_tex as usize,
    );

    let mut triangles = Vec::with_capacity(t);
    for _ in 0..t {
        let mut tri = [0u32; 3];
        for idx in &mut tri {
            *idx = r.read_u32::<LittleEndian>().map_err(err)?;
        }
        triangles.push(tri);
    }

    let mut read_array = |len: usize| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(r.read_f64::<LittleEndian>().map_err(err)?);
        }
        Ok(out)
    };
    let mean_shape = DVector::from_vec(read_array(3 * n)?);
    let id_basis = DMatrix::from_column_slice(3 * n, d_id, &read_array(3 * n * d_id)?);
    let exp_basis = DMatrix::from_column_slice(3 * n, d_exp, &read_array(3 * n * d_exp)?);
    let mean_texture = DVector::from_vec(read_array(n)?);
    let tex_basis = DMatrix::from_column_slice(n, d_tex, &read_array(n * d_tex)?);
    let normalized_mean = DVector::from_vec(read_array(3 * n)?);

    let model = MorphableModel::new(
        triangles,
        mean_shape,
        id_basis,
        exp_basis,
        mean_texture,
        tex_basis,
    )
    .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    // The stored normalization must agree with the recomputed one.
    let max_diff = model
        .normalized_mean
        .iter()
        .zip(normalized_mean.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    if max_diff > 1e-9 {
        return Err(Error::format(
            path.display().to_string(),
            format!("stored normalized mean deviates by {max_diff:.3e}"),
        ));
    }
    Ok(model)
}
