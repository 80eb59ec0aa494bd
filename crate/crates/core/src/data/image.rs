use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Input(format!("image size {width}×{height} is empty")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Input(format!(
                "{} bytes for a {width}×{height} RGB image, expected {}",
                data.len(),
                width * height * 3
            )));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        Self::new(width, height, rgb.repeat(width * height))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Per-channel mean on the 0..=255 scale.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut sum = [0.0; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                sum[c] += px[c] as f64;
            }
        }
        sum.map(|s| s / (self.width * self.height) as f64)
    }

    /// Planar `3×H×W` tensor scaled to [0, 1].
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        Tensor::from_fn(&[3, h, w], |i| {
            let (c, rest) = (i / (h * w), i % (h * w));
            self.data[3 * rest + c] as f64 / 255.0
        })
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut r = HeaderReader { bytes: &bytes, pos: 0, path };
        if r.token()? != "P6" {
            return Err(r.format_error(0, "missing P6 magic"));
        }
        let width = r.number()?;
        let height = r.number()?;
        let maxval = r.number()?;
        if maxval != 255 {
            return Err(Error::Unsupported { path: path.to_path_buf(), msg: format!("PPM maxval {maxval}, only 255 is supported") });
        }
        // exactly one whitespace byte separates the header from the raster
        let start = r.pos + 1;
        let need = width * height * 3;
        if width == 0 || height == 0 {
            return Err(r.format_error(start, "zero image dimension"));
        }
        if bytes.len() < start + need {
            return Err(r.format_error(bytes.len(), &format!("raster truncated, {need} bytes expected")));
        }
        Self::new(width, height, bytes[start..start + need].to_vec())
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Binary greyscale PGM (P5, maxval 255).
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Input(format!("{} pixels for a {width}×{height} PGM", pixels.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl HeaderReader<'_> {
    fn format_error(&self, offset: usize, msg: &str) -> Error {
        Error::Format { path: self.path.to_path_buf(), offset, msg: msg.to_string() }
    }

    fn token(&mut self) -> Result<String> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(_) => break,
                None => return Err(self.format_error(self.pos, "unexpected end of header")),
            }
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        Ok(String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned())
    }

    fn number(&mut self) -> Result<usize> {
        let start = self.pos;
        let tok = self.token()?;
        tok.parse().map_err(|_| self.format_error(start, &format!("expected a number, found {tok:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_with_comment() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::new(3, 2, (0..18).map(|v| v as u8 * 13).collect()).unwrap();
        let path = dir.path().join("a.ppm");
        img.write_ppm(&path).unwrap();
        assert_eq!(RgbImage::read_ppm(&path).unwrap(), img);

        let mut bytes = b"P6 # made by hand\n3 2\n255\n".to_vec();
        bytes.extend_from_slice(img.data());
        fs::write(&path, bytes).unwrap();
        assert_eq!(RgbImage::read_ppm(&path).unwrap(), img);
    }

    #[test]
    fn ppm_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ppm");
        fs::write(&path, b"P6\n2 2\n65535\n").unwrap();
        assert!(matches!(RgbImage::read_ppm(&path), Err(Error::Unsupported { .. })));
        fs::write(&path, b"P3\n2 2\n255\n").unwrap();
        assert!(matches!(RgbImage::read_ppm(&path), Err(Error::Format { offset: 0, .. })));
        fs::write(&path, b"P6\n2 2\n255\n\x01\x02").unwrap();
        assert!(matches!(RgbImage::read_ppm(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn tensor_layout_is_planar() {
        let mut img = RgbImage::filled(2, 2, [0, 0, 0]).unwrap();
        img.set_pixel(1, 0, [255, 51, 0]);
        let t = img.to_tensor();
        assert_eq!(t.shape(), [3, 2, 2]);
        assert_eq!(t.data()[1], 1.0);
        assert_eq!(t.data()[4 + 1], 0.2);
        assert_eq!(img.channel_means(), [63.75, 12.75, 0.0]);
    }
}
