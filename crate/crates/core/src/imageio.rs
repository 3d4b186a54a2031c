//! Image decode, resize and normalization.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, RgbImage};

use crate::error::{Error, FormatError, Result};

/// Per-channel normalization applied after scaling to `[0, 1]`.
pub const PIXEL_MEAN: f32 = 0.5;
pub const PIXEL_STD: f32 = 0.5;

/// Channel-major `3 × size × size` pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub size: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(size: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * size * size {
            return Err(Error::shape(
                "image tensor",
                &[3, size, size],
                &[data.len()],
            ));
        }
        Ok(ImageTensor { size, data })
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.size * self.size;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.size + y) * self.size + x]
    }
}

pub fn decode(bytes: &[u8]) -> Result<RgbImage> {
    image::load_from_memory(bytes)
        .map(|img| img.to_rgb8())
        .map_err(|e| FormatError::Malformed(format!("undecodable image: {e}")).into())
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(FormatError::Malformed(m)) => {
            FormatError::Malformed(format!("{}: {m}", path.display())).into()
        }
        other => other,
    })
}

fn encode_pnm(
    width: u32,
    height: u32,
    pixels: &[u8],
    subtype: PnmSubtype,
    color: ExtendedColorType,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .write_image(pixels, width, height, color)
        .map_err(|e| Error::Contract(format!("pnm encode: {e}")))?;
    Ok(out)
}

/// Binary P6 bytes.
pub fn encode_ppm(img: &RgbImage) -> Result<Vec<u8>> {
    encode_pnm(
        img.width(),
        img.height(),
        img.as_raw(),
        PnmSubtype::Pixmap(SampleEncoding::Binary),
        ExtendedColorType::Rgb8,
    )
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    std::fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(path, e))
}

/// Binary P5 bytes from row-major gray levels.
pub fn encode_pgm(width: u32, height: u32, gray: &[u8]) -> Result<Vec<u8>> {
    if gray.len() != (width * height) as usize {
        return Err(Error::shape(
            "pgm",
            &[height as usize, width as usize],
            &[gray.len()],
        ));
    }
    encode_pnm(
        width,
        height,
        gray,
        PnmSubtype::Graymap(SampleEncoding::Binary),
        ExtendedColorType::L8,
    )
}

pub fn write_pgm(path: &Path, width: u32, height: u32, gray: &[u8]) -> Result<()> {
    std::fs::write(path, encode_pgm(width, height, gray)?).map_err(|e| Error::io(path, e))
}

/// Bilinear resampling of one row-major plane with half-pixel centers and edge clamping.
pub fn resize_bilinear(
    src: &[f32],
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    assert_eq!(src.len(), in_h * in_w, "plane size");
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f32 / out as f32;
        (0..out)
            .map(|o| {
                let pos = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f32);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, pos - lo as f32)
            })
            .collect()
    };
    let ys = taps(out_h, in_h);
    let xs = taps(out_w, in_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * in_w + x0] * (1.0 - fx) + src[y0 * in_w + x1] * fx;
            let bottom = src[y1 * in_w + x0] * (1.0 - fx) + src[y1 * in_w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Scales to `[0, 1]`, resizes to `size × size` and normalizes each channel.
pub fn preprocess_rgb(img: &RgbImage, size: usize) -> Result<ImageTensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 || size == 0 {
        return Err(
            FormatError::Malformed(format!("cannot resize a {w}×{h} image to {size}")).into(),
        );
    }
    let raw = img.as_raw();
    let mut data = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        let plane: Vec<f32> = (0..w * h).map(|i| raw[i * 3 + c] as f32 / 255.0).collect();
        let resized = if (w, h) == (size, size) {
            plane
        } else {
            resize_bilinear(&plane, h, w, size, size)
        };
        data.extend(resized.into_iter().map(|v| (v - PIXEL_MEAN) / PIXEL_STD));
    }
    ImageTensor::new(size, data)
}

pub fn preprocess(bytes: &[u8], size: usize) -> Result<ImageTensor> {
    preprocess_rgb(&decode(bytes)?, size)
}

pub fn load_image(path: &Path, size: usize) -> Result<ImageTensor> {
    preprocess_rgb(&read_image(path)?, size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solid_gray_is_constant() {
        let img = RgbImage::from_pixel(10, 7, image::Rgb([128, 128, 128]));
        let t = preprocess(&encode_ppm(&img).unwrap(), 64).unwrap();
        let expect = (128.0 / 255.0 - 0.5) / 0.5;
        assert_eq!(t.data.len(), 3 * 64 * 64);
        assert!(t.data.iter().all(|&v| (v - expect).abs() < 1e-6));
    }

    #[test]
    fn squashes_aspect() {
        let img = RgbImage::from_fn(128, 64, |x, _| {
            image::Rgb([if x < 64 { 0 } else { 255 }, 0, 0])
        });
        let t = preprocess_rgb(&img, 64).unwrap();
        assert_eq!(t.size, 64);
        assert_eq!(t.at(0, 10, 0), -1.0);
        assert_eq!(t.at(0, 10, 63), 1.0);
    }

    #[test]
    fn checkerboard_upsample_matches_hand_values() {
        let src = [0.0, 1.0, 1.0, 0.0];
        let out = resize_bilinear(&src, 2, 2, 4, 4);
        #[rustfmt::skip]
        let expect = [
            0.0,   0.25,  0.75,  1.0,
            0.25,  0.375, 0.625, 0.75,
            0.75,  0.625, 0.375, 0.25,
            1.0,   0.75,  0.25,  0.0,
        ];
        for (a, b) in out.iter().zip(expect) {
            assert!((a - b).abs() < 1e-7, "{out:?}");
        }
    }

    #[test]
    fn ppm_roundtrip_and_bad_bytes() {
        let img = RgbImage::from_fn(5, 3, |x, y| image::Rgb([x as u8 * 40, y as u8 * 60, 7]));
        let bytes = encode_ppm(&img).unwrap();
        assert!(bytes.starts_with(b"P6"));
        assert_eq!(decode(&bytes).unwrap(), img);
        assert!(matches!(decode(b"P6 garbage"), Err(Error::Format(_))));
        let pgm = encode_pgm(2, 2, &[0, 64, 128, 255]).unwrap();
        assert!(pgm.starts_with(b"P5"));
        assert!(encode_pgm(2, 2, &[0]).is_err());
    }
}
