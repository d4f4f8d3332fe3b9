//! Binary image formats: 8-bit PPM (P6) for dataset images, PGM (P5) for
//! heatmap exports, and raw RGB bytes with a JSON sidecar carrying the
//! extents.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write as _;
use std::path::Path;

/// RGB image with values in [0, 1], row-major `(y, x, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Dimension(format!(
                "image data length {} does not match {}x{}x3",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, data: vec![value; width * height * 3] }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    let mut out = Vec::with_capacity(image.data.len() + 32);
    write!(out, "P6\n{} {}\n255\n", image.width, image.height)?;
    out.extend(image.data.iter().map(|&v| quantize(v)));
    fs::write(path, out)?;
    Ok(())
}

/// Reads the PPM header tokens, skipping whitespace and `#` comments.
fn header_tokens(bytes: &[u8], count: usize) -> Result<(Vec<usize>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < count && i < bytes.len() {
        match bytes[i] {
            b'#' => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            c if c.is_ascii_whitespace() => i += 1,
            _ => {
                let start = i;
                while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                    i += 1;
                }
                let tok = std::str::from_utf8(&bytes[start..i])
                    .map_err(|_| Error::Format("non-ASCII header".into()))?;
                tokens.push(
                    tok.parse::<usize>()
                        .map_err(|_| Error::Format(format!("bad header token {tok:?}")))?,
                );
            }
        }
    }
    if tokens.len() < count {
        return Err(Error::Format("truncated header".into()));
    }
    // One whitespace byte separates the header from the raster.
    Ok((tokens, i + 1))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    if !bytes.starts_with(b"P6") {
        return Err(Error::Format(format!("{}: not a P6 file", path.display())));
    }
    let (tokens, data_at) = header_tokens(&bytes[2..], 3).map(|(t, i)| (t, i + 2))?;
    let (width, height, maxval) = (tokens[0], tokens[1], tokens[2]);
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    let need = width * height * 3;
    let raster = bytes
        .get(data_at..data_at + need)
        .ok_or_else(|| Error::Format("truncated raster".into()))?;
    let data = raster.iter().map(|&b| b as f64 / 255.0).collect();
    Image::new(width, height, data)
}

/// 8-bit grayscale export, min-max scaled to [0, 255].
pub fn write_pgm(path: &Path, values: &[f64], width: usize, height: usize) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::Dimension(format!(
            "{} values for a {}x{} grid",
            values.len(),
            width,
            height
        )));
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = Vec::with_capacity(values.len() + 32);
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.extend(values.iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct RawSidecar {
    width: usize,
    height: usize,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

pub fn write_raw_rgb(path: &Path, image: &Image) -> Result<()> {
    let bytes: Vec<u8> = image.data.iter().map(|&v| quantize(v)).collect();
    fs::write(path, bytes)?;
    let sidecar = RawSidecar { width: image.width, height: image.height };
    fs::write(sidecar_path(path), serde_json::to_string(&sidecar).unwrap())?;
    Ok(())
}

pub fn read_raw_rgb(path: &Path) -> Result<Image> {
    let sidecar: RawSidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)
        .map_err(|e| Error::Format(format!("{}: bad sidecar: {e}", path.display())))?;
    let bytes = fs::read(path)?;
    if bytes.len() != sidecar.width * sidecar.height * 3 {
        return Err(Error::Format(format!(
            "{}: {} bytes for {}x{}x3",
            path.display(),
            bytes.len(),
            sidecar.width,
            sidecar.height
        )));
    }
    Image::new(sidecar.width, sidecar.height, bytes.iter().map(|&b| b as f64 / 255.0).collect())
}

/// Dispatch on extension: `.ppm` or `.rgb`.
pub fn read_image(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => read_ppm(path),
        Some("rgb") => read_raw_rgb(path),
        other => Err(Error::Format(format!(
            "{}: unsupported image extension {other:?}",
            path.display()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::filled(4, 3, 0.2);
        img.set_pixel(1, 2, [1.0, 0.0, 0.5]);
        let path = dir.path().join("a.ppm");
        write_ppm(&path, &img).unwrap();
        let first = std::fs::read(&path).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.width, 4);
        assert_eq!(back.height, 3);
        assert_eq!(back.pixel(1, 2)[0], 1.0);
        // Quantization is idempotent: writing the decoded image reproduces
        // the same bytes.
        write_ppm(&path, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn raw_rgb_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::filled(5, 2, 0.6);
        let path = dir.path().join("b.rgb");
        write_raw_rgb(&path, &img).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back.width, 5);
        assert_eq!(back.height, 2);
        assert!((back.pixel(0, 0)[0] - 0.6).abs() < 1.0 / 255.0);
    }

    #[test]
    fn pgm_scales_min_max() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.pgm");
        write_pgm(&path, &[0.1, 0.2, 0.3, 0.2], 2, 2).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let raster = &bytes[bytes.len() - 4..];
        assert_eq!(raster[0], 0);
        assert_eq!(raster[2], 255);
    }

    #[test]
    fn malformed_files_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        std::fs::write(&path, b"P6\n4 4\n255\nshort").unwrap();
        assert!(matches!(read_ppm(&path), Err(Error::Format(_))));
        std::fs::write(&path, b"P5\n1 1\n255\n0").unwrap();
        assert!(matches!(read_ppm(&path), Err(Error::Format(_))));
    }
}
