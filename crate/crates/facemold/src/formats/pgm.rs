//! Binary PGM (P5) images for intensity data in [0, 1].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::GrayImage;

/// Writes an intensity image as 8-bit binary PGM, clamping to [0, 1].
pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    let err = |e| Error::io(path.display().to_string(), e);
    let file = File::create(path).map_err(err)?;
    let mut w = BufWriter::new(file);
    write!(w, "P5\n{} {}\n255\n", image.width, image.height).map_err(err)?;
    let bytes: Vec<u8> = image
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes).map_err(err)?;
    w.flush().map_err(err)
}

fn read_token(r: &mut impl Read, path: &Path) -> Result<String> {
    let err = |e| Error::io(path.display().to_string(), e);
    let mut token = Vec::new();
    let mut byte = [0u8; 1];
    let mut in_comment = false;
    loop {
        r.read_exact(&mut byte).map_err(err)?;
        let b = byte[0];
        if in_comment {
            if b == b'\n' {
                in_comment = false;
            }
            continue;
        }
        if b == b'#' && token.is_empty() {
            in_comment = true;
            continue;
        }
        if b.is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            break;
        }
        token.push(b);
    }
    String::from_utf8(token)
        .map_err(|_| Error::format(path.display().to_string(), "non-ascii header token"))
}

/// Reads a binary PGM, normalizing by its stated maximum value.
pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let err = |e| Error::io(path.display().to_string(), e);
    let file = File::open(path).map_err(err)?;
    let mut r = BufReader::new(file);
    let kind = read_token(&mut r, path)?;
    if kind != "P5" {
        return Err(Error::format(
            path.display().to_string(),
            format!("unsupported PGM kind {kind:?}, expected binary \"P5\""),
        ));
    }
    let width: usize = read_token(&mut r, path)?
        .parse()
        .map_err(|_| Error::format(path.display().to_string(), "bad width"))?;
    let height: usize = read_token(&mut r, path)?
        .parse()
        .map_err(|_| Error::format(path.display().to_string(), "bad height"))?;
    let maxval: u32 = read_token(&mut r, path)?
        .parse()
        .map_err(|_| Error::format(path.display().to_string(), "bad maxval"))?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(
            path.display().to_string(),
            format!("unsupported maxval {maxval}"),
        ));
    }
    let mut bytes = vec![0u8; width * height];
    r.read_exact(&mut bytes).map_err(err)?;
    let data = bytes
        .into_iter()
        .map(|b| b as f64 / maxval as f64)
        .collect();
    Ok(GrayImage {
        width,
        height,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trips_within_quantization() {
        let image = GrayImage::from_vec(4, 3, (0..12).map(|i| i as f64 / 11.0).collect());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        write_pgm(&path, &image).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!((back.width, back.height), (4, 3));
        for (a, b) in image.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        std::fs::write(&path, b"P5\n# a comment\n2 1\n255\n\x00\xff").unwrap();
        let img = read_pgm(&path).unwrap();
        assert_eq!(img.data, vec![0.0, 1.0]);
    }
}
