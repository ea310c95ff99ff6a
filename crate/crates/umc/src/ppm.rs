//! Binary PPM (P6) and PGM (P5) image files: 8-bit, no comments, single
//! whitespace separators. Images travel through the crate as `[h,w,3]`
//! tensors with values in [0,1].

use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::ioutil::atomic_write;

pub fn byte_of(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn value_of(b: u8) -> f32 {
    b as f32 / 255.0
}

/// Write an `[h,w,3]` tensor as a P6 PPM.
pub fn write_ppm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (h, w, c) = img.dims3()?;
    if c != 3 {
        return Err(Error::shape("write-ppm", format!("expected 3 channels, got {}", c)));
    }
    let mut bytes = format!("P6\n{} {}\n255\n", w, h).into_bytes();
    bytes.extend(img.data().iter().map(|&v| byte_of(v)));
    atomic_write(path, &bytes)
}

/// Write an `[rows, cols]` grayscale byte grid as a P5 PGM.
pub fn write_pgm(path: &Path, rows: usize, cols: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != rows * cols {
        return Err(Error::shape(
            "write-pgm",
            format!("{}x{} grid needs {} bytes, got {}", rows, cols, rows * cols, gray.len()),
        ));
    }
    let mut bytes = format!("P5\n{} {}\n255\n", cols, rows).into_bytes();
    bytes.extend_from_slice(gray);
    atomic_write(path, &bytes)
}

/// Read a P6 PPM back into an `[h,w,3]` tensor.
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ppm(&bytes).map_err(|msg| Error::Data(format!("{}: {}", path.display(), msg)))
    }

fn parse_ppm(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> std::result::Result<String, String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(bytes)? != "P6" {
        return Err("not a P6 PPM".into());
    }
    let w: usize = token(bytes)?.parse().map_err(|_| "bad width")?;
    let h: usize = token(bytes)?.parse().map_err(|_| "bad height")?;
    let maxval: usize = token(bytes)?.parse().map_err(|_| "bad maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {}", maxval));
    }
    pos += 1; // the single whitespace after maxval
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(format!("expected {} pixel bytes, got {}", need, bytes.len() - pos));
    }
    let data: Vec<f32> = bytes[pos..pos + need].iter().map(|&b| value_of(b)).collect();
    Tensor::new(vec![h, w, 3], data).map_err(|e| e.to_string())
}
