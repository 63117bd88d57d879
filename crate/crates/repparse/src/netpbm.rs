//! Binary PPM (P6) and PGM (P5) images, 8 bits per sample.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, ImageReader};

use crate::error::{Error, Result};

fn encode(path: &Path, width: usize, height: usize, data: &[u8], subtype: PnmSubtype, color: ExtendedColorType) -> Result<()> {
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf)
        .with_subtype(subtype)
        .write_image(data, width as u32, height as u32, color)
        .map_err(|e| Error::parse(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    encode(path, width, height, rgb, PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    encode(path, width, height, gray, PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ImageReader::with_format(Cursor::new(bytes), ImageFormat::Pnm).decode().map_err(|e| Error::parse(path, e))
}

/// `(width, height, interleaved rgb)`.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = decode(path)?;
    if !matches!(img, image::DynamicImage::ImageRgb8(_)) {
        return Err(Error::parse(path, "expected an 8-bit P6 pixmap"));
    }
    let rgb = img.into_rgb8();
    Ok((rgb.width() as usize, rgb.height() as usize, rgb.into_raw()))
}

/// `(width, height, gray)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = decode(path)?;
    if !matches!(img, image::DynamicImage::ImageLuma8(_)) {
        return Err(Error::parse(path, "expected an 8-bit P5 graymap"));
    }
    let g = img.into_luma8();
    Ok((g.width() as usize, g.height() as usize, g.into_raw()))
}

/// `[3, H, W]` tensor in `[0, 1]` to interleaved 8-bit rgb.
pub fn planar_to_rgb(data: &[f64], width: usize, height: usize) -> Vec<u8> {
    let plane = width * height;
    let mut out = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            out.push((data[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

pub fn rgb_to_planar(rgb: &[u8], width: usize, height: usize) -> Vec<f64> {
    let plane = width * height;
    let mut out = vec![0.0; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            out[c * plane + p] = rgb[3 * p + c] as f64 / 255.0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let data: Vec<u8> = (0..12).map(|i| (i % 5) as u8).collect();
        write_pgm(&p, 4, 3, &data).unwrap();
        assert!(fs::read(&p).unwrap().starts_with(b"P5"));
        assert_eq!(read_pgm(&p).unwrap(), (4, 3, data));
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        let data: Vec<u8> = (0..18).map(|i| (i * 13) as u8).collect();
        write_ppm(&p, 3, 2, &data).unwrap();
        assert!(fs::read(&p).unwrap().starts_with(b"P6"));
        assert_eq!(read_ppm(&p).unwrap(), (3, 2, data));
    }

    #[test]
    fn wrong_kind_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        write_pgm(&p, 2, 2, &[0, 1, 2, 3]).unwrap();
        let err = read_ppm(&p).unwrap_err();
        assert!(err.to_string().contains("a.pgm"));
        fs::write(&p, b"P5\n2 2\n255\n\x01").unwrap();
        assert_eq!(read_pgm(&p).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn planar_round_trip_is_exact_on_8_bit_values() {
        let rgb: Vec<u8> = (0..48).map(|i| (i * 5) as u8).collect();
        assert_eq!(planar_to_rgb(&rgb_to_planar(&rgb, 4, 4), 4, 4), rgb);
    }
}
