use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::neural::Tensor;

/// 8-bit RGB image, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn filled(width: usize, height: usize, level: u8) -> Self {
        Image {
            width,
            height,
            pixels: vec![level; width * height * 3],
        }
    }

    /// Resizes to `side x side` with bilinear interpolation and scales values
    /// to `[0, 1]` (value / 255). Returns an HWC tensor `[side, side, 3]`.
    pub fn to_tensor(&self, side: usize) -> Tensor {
        let mut out = vec![0.0; side * side * 3];
        let sx = self.width as f64 / side as f64;
        let sy = self.height as f64 / side as f64;
        let px = |x: usize, y: usize, c: usize| self.pixels[(y * self.width + x) * 3 + c] as f64 / 255.0;
        for oy in 0..side {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for ox in 0..side {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                for c in 0..3 {
                    let top = px(x0, y0, c) * (1.0 - tx) + px(x1, y0, c) * tx;
                    let bottom = px(x0, y1, c) * (1.0 - tx) + px(x1, y1, c) * tx;
                    out[(oy * side + ox) * 3 + c] = top * (1.0 - ty) + bottom * ty;
                }
            }
        }
        Tensor::new(vec![side, side, 3], out).expect("shape matches buffer")
    }
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut bytes = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    bytes.extend_from_slice(&image.pixels);
    bytes
}

/// Decodes a binary (P6) 8-bit portable pixmap.
pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PPM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(Error::Format("not a binary PPM (P6)".into()));
    }
    let mut number = |what: &str| -> Result<usize> {
        token()?
            .parse()
            .map_err(|_| Error::Format(format!("bad PPM {what}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("only 8-bit PPM supported, maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format("PPM with zero dimension".into()));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let len = width * height * 3;
    if bytes.len() < start + len {
        return Err(Error::Format("truncated PPM raster".into()));
    }
    Ok(Image {
        width,
        height,
        pixels: bytes[start..start + len].to_vec(),
    })
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode_ppm(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    fs::write(path, encode_ppm(image)).map_err(Error::io(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_comments() {
        let img = Image {
            width: 2,
            height: 1,
            pixels: vec![1, 2, 3, 250, 251, 252],
        };
        assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
        let mut commented = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        commented.extend_from_slice(&img.pixels);
        assert_eq!(decode_ppm(&commented).unwrap(), img);
    }

    #[test]
    fn rejects_other_formats() {
        assert!(decode_ppm(b"P3\n1 1\n255\n0 0 0\n").is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(decode_ppm(b"P6\n4 4\n255\n\0").is_err());
    }

    #[test]
    fn constant_image_resizes_to_constant() {
        let img = Image::filled(5, 3, 51);
        let t = img.to_tensor(8);
        assert_eq!(t.shape(), &[8, 8, 3]);
        for &v in t.data() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_identity_at_same_size() {
        let pixels: Vec<u8> = (0..4 * 4 * 3).map(|i| (i * 5) as u8).collect();
        let img = Image { width: 4, height: 4, pixels: pixels.clone() };
        let t = img.to_tensor(4);
        for (a, b) in t.data().iter().zip(&pixels) {
            assert!((a - *b as f64 / 255.0).abs() < 1e-12);
        }
    }
}
