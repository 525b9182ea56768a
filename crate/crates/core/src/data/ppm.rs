//! Binary PPM (`P6`, maxval 255).

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PpmImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub rgb: Vec<u8>,
}

impl PpmImage {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    /// `(3, H, W)` in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let plane = self.width * self.height;
        let mut data = vec![0.0; 3 * plane];
        for (p, px) in self.rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + p] = px[c] as f32 / 255.0;
            }
        }
        Tensor::new(&[3, self.height, self.width], data).expect("shape matches data")
    }

    /// From a `(3, H, W)` tensor in `[0, 1]`, rounding and clamping.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let [3, h, w] = t.shape()[..] else {
            return Err(Error::dim("ppm", t.shape(), &[3, 0, 0]));
        };
        let plane = h * w;
        let d = t.data();
        let rgb = (0..plane)
            .flat_map(|p| (0..3).map(move |c| (d[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect();
        Ok(Self { width: w, height: h, rgb })
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("PPM header truncated".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        if fields[0] != "P6" {
            return Err(Error::Format(format!("expected P6 magic, found {:?}", fields[0])));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM header field {s:?}")));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!("only maxval 255 is supported, got {maxval}")));
        }
        let need = width * height * 3;
        let rgb = bytes
            .get(pos..pos + need)
            .ok_or_else(|| Error::Format(format!("PPM raster truncated: need {need} bytes")))?
            .to_vec();
        Ok(Self { width, height, rgb })
    }
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<PpmImage> {
    PpmImage::parse(&std::fs::read(path)?)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &PpmImage) -> Result<()> {
    std::fs::write(path, img.to_bytes())?;
    Ok(())
}
