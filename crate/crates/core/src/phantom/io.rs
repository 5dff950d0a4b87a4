use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, ImageReader};

use crate::error::{Error, Result};
use crate::grid::{Grid, Image};
use crate::mask::AnomalyMask;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_gray(path: &Path, width: usize, height: usize, bytes: Vec<u8>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let buf = GrayImage::from_raw(width as u32, height as u32, bytes)
        .expect("buffer length matches dimensions");
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::format(path, other.to_string()),
        })
}

/// Writes an 8-bit grayscale PNG.
pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let bytes = image.pixels().iter().map(|&v| quantize(v)).collect();
    write_gray(path.as_ref(), image.width(), image.height(), bytes)
}

/// Writes a mask as 8-bit grayscale PNG (positive = 255).
pub fn save_mask(mask: &AnomalyMask, path: impl AsRef<Path>) -> Result<()> {
    let bytes = mask
        .values()
        .iter()
        .map(|&v| if v != 0 { 255 } else { 0 })
        .collect();
    write_gray(path.as_ref(), mask.width(), mask.height(), bytes)
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let reader = ImageReader::with_format(std::io::Cursor::new(bytes), ImageFormat::Png);
    reader
        .decode()
        .map_err(|e| Error::format(path, e.to_string()))
}

fn to_grid(path: &Path, decoded: DynamicImage) -> Result<Grid> {
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let data = match decoded {
        DynamicImage::ImageLuma8(buf) => buf
            .into_raw()
            .into_iter()
            .map(|v| f64::from(v) / 255.0)
            .collect(),
        DynamicImage::ImageRgb8(buf) => buf
            .into_raw()
            .chunks_exact(3)
            .map(|px| (f64::from(px[0]) + f64::from(px[1]) + f64::from(px[2])) / 3.0 / 255.0)
            .collect(),
        other => {
            return Err(Error::format(
                path,
                format!(
                    "unsupported PNG layout {:?}; expected 8-bit gray or RGB",
                    other.color()
                ),
            ))
        }
    };
    Grid::new(h, w, data)
}

/// Reads an 8-bit grayscale or RGB PNG; RGB channels are averaged.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let grid = to_grid(path, decode(path)?)?;
    Image::from_grid(grid).map_err(|e| Error::format(path, e.to_string()))
}

/// Reads a mask PNG; values at or above mid-gray are positive.
pub fn load_mask(path: impl AsRef<Path>) -> Result<AnomalyMask> {
    let path = path.as_ref();
    let grid = to_grid(path, decode(path)?)?;
    let data = grid
        .as_slice()
        .iter()
        .map(|&v| u8::from(v >= 0.5))
        .collect();
    AnomalyMask::from_binary(grid.height(), grid.width(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{ImageBuffer, Luma, Rgb};
    use rand::Rng as _;

    #[test]
    fn round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = crate::rng::rng_from_seed(4);
        let img = Image::new(
            20,
            24,
            (0..480).map(|_| rng.random_range(0.0..=1.0)).collect(),
        )
        .unwrap();
        let path = dir.path().join("x.png");
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!((back.height(), back.width()), (20, 24));
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn zero_image_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(16, 16, vec![0.0; 256]).unwrap();
        let path = dir.path().join("z.png");
        save_image(&img, &path).unwrap();
        assert!(load_image(&path)
            .unwrap()
            .pixels()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn rgb_is_channel_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        let buf: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_pixel(16, 16, Rgb([51, 102, 153]));
        buf.save(&path).unwrap();
        let img = load_image(&path).unwrap();
        assert!((img.get(5, 5) - 0.4).abs() <= 1.0 / 255.0);
    }

    #[test]
    fn sixteen_bit_and_corrupt_files_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let deep = dir.path().join("deep.png");
        let buf: ImageBuffer<Luma<u16>, _> = ImageBuffer::from_pixel(16, 16, Luma([1000u16]));
        buf.save(&deep).unwrap();
        assert!(matches!(load_image(&deep), Err(Error::Format { .. })));

        let junk = dir.path().join("junk.png");
        std::fs::write(&junk, b"not a png at all").unwrap();
        assert!(matches!(load_image(&junk), Err(Error::Format { .. })));
        assert!(matches!(
            load_image(dir.path().join("missing.png")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn masks_load_binary() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mut data = vec![0u8; 256];
        data[17] = 1;
        data[40] = 1;
        let m = AnomalyMask::from_binary(16, 16, data).unwrap();
        save_mask(&m, &path).unwrap();
        let back = load_mask(&path).unwrap();
        assert_eq!(back.values(), m.values());
    }
}
