//! PFM depth-map export and import.
//!
//! Grayscale "Pf" maps with scale -1.0 (little-endian), rows stored bottom to
//! top per the format convention. Invalid pixels are written with a fill
//! value; the true validity mask travels in a PNG sidecar named
//! `<stem>.mask.png` next to the depth file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::raster::DepthMap;

use super::png::{read_mask_png, write_mask_png};

/// Writes a depth map as PFM. Invalid pixels get `fill` (default: max valid
/// depth plus 10% of the range).
pub fn write_pfm(path: &Path, depth: &DepthMap, fill: Option<f64>) -> Result<()> {
    let err = |e| Error::io(path.display().to_string(), e);
    let fill = fill.unwrap_or_else(|| depth.default_fill());
    let file = File::create(path).map_err(err)?;
    let mut w = BufWriter::new(file);
    write!(w, "Pf\n{} {}\n-1.0\n", depth.width, depth.height).map_err(err)?;
    for y in (0..depth.height).rev() {
        for x in 0..depth.width {
            let i = y * depth.width + x;
            let v = if depth.valid[i] { depth.depth[i] } else { fill };
            w.write_f32::<LittleEndian>(v as f32).map_err(err)?;
        }
    }
    w.flush().map_err(err)
}

/// Sidecar mask path for a depth file: `out.pfm` -> `out.mask.png`.
pub fn mask_sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("mask.png")
}

/// Writes the PFM plus its validity-mask sidecar; returns the sidecar path.
pub fn write_depth(path: &Path, depth: &DepthMap, fill: Option<f64>) -> Result<PathBuf> {
    write_pfm(path, depth, fill)?;
    let mask_path = mask_sidecar_path(path);
    write_mask_png(&mask_path, depth.width, depth.height, &depth.valid)?;
    Ok(mask_path)
}

fn read_token(r: &mut impl Read, path: &Path) -> Result<String> {
    let err = |e| Error::io(path.display().to_string(), e);
    let mut token = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte).map_err(err)?;
        if byte[0].is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            break;
        }
        token.push(byte[0]);
    }
    String::from_utf8(token)
        .map_err(|_| Error::format(path.display().to_string(), "non-ascii header token"))
}

/// Reads a grayscale PFM: returns width, height and row-major samples (top
/// row first).
pub fn read_pfm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let err = |e| Error::io(path.display().to_string(), e);
    let file = File::open(path).map_err(err)?;
    let mut r = BufReader::new(file);
    let kind = read_token(&mut r, path)?;
    if kind != "Pf" {
        return Err(Error::format(
            path.display().to_string(),
            format!("unsupported PFM kind {kind:?}, expected grayscale \"Pf\""),
        ));
    }
    let width: usize = read_token(&mut r, path)?
        .parse()
        .map_err(|_| Error::format(path.display().to_string(), "bad width"))?;
    let height: usize = read_token(&mut r, path)?
        .parse()
        .map_err(|_| Error::format(path.display().to_string(), "bad height"))?;
    let scale: f64 = read_token(&mut r, path)?
        .parse()
        .map_err(|_| Error::format(path.display().to_string(), "bad scale"))?;
    let little_endian = scale < 0.0;
    let mut rows = Vec::with_capacity(height);
    for _ in 0..height {
        let mut row = Vec::with_capacity(width);
        for _ in 0..width {
            let v = if little_endian {
                r.read_f32::<LittleEndian>().map_err(err)?
            } else {
                r.read_f32::<BigEndian>().map_err(err)?
            };
            row.push(v as f64);
        }
        rows.push(row);
    }
    // Stored bottom-up; return top-down.
    let mut data = Vec::with_capacity(width * height);
    for row in rows.into_iter().rev() {
        data.extend(row);
    }
    Ok((width, height, data))
}

/// Reads a depth map, picking up the validity-mask sidecar when present;
/// without one, every pixel counts as valid.
pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let (width, height, depth) = read_pfm(path)?;
    let mask_path = mask_sidecar_path(path);
    let valid = if mask_path.exists() {
        let (mw, mh, mask) = read_mask_png(&mask_path)?;
        if mw != width || mh != height {
            return Err(Error::ShapeMismatch {
                what: "mask sidecar vs depth",
                expected_w: width,
                expected_h: height,
                got_w: mw,
                got_h: mh,
            });
        }
        mask
    } else {
        vec![true; width * height]
    };
    Ok(DepthMap {
        width,
        height,
        depth,
        valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_round_trips_through_pfm_and_sidecar() {
        let mut depth = DepthMap::new_invalid(5, 4);
        for y in 0..4 {
            for x in 0..5 {
                if (x + y) % 3 != 0 {
                    let i = depth.idx(x, y);
                    depth.depth[i] = 0.5 * x as f64 - 0.25 * y as f64 + 2.0;
                    depth.valid[i] = true;
                }
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        write_depth(&path, &depth, None).unwrap();
        let back = read_depth(&path).unwrap();
        assert_eq!(back.valid, depth.valid);
        for i in 0..depth.depth.len() {
            if depth.valid[i] {
                // f32 storage rounds.
                assert!((back.depth[i] - depth.depth[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pfm_without_sidecar_is_fully_valid() {
        let depth = DepthMap {
            width: 3,
            height: 2,
            depth: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            valid: vec![true; 6],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plain.pfm");
        write_pfm(&path, &depth, None).unwrap();
        let back = read_depth(&path).unwrap();
        assert!(back.valid.iter().all(|v| *v));
        assert_eq!(back.depth, depth.depth);
    }
}
