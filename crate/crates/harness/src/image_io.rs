//! Binary PGM (P5) and PPM (P6) images with maxval 255.

use std::path::Path;

use ashnet_tensor::Tensor;

use crate::error::{HarnessError, Result};

fn format_err(offset: usize, message: impl Into<String>) -> HarnessError {
    HarnessError::Format {
        offset,
        message: message.into(),
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    /// Skips whitespace and `#` comments, then reads a decimal field.
    fn number(&mut self, what: &str) -> Result<usize> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(format_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| format_err(start, format!("{what} out of range")))
    }
}

/// Decodes P5/P6 bytes into a `[3, h, w]` tensor in `[0, 1]`; grayscale is
/// replicated across the three channels.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(format_err(0, "expected magic P5 or P6")),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval_at = h.pos;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(format_err(maxval_at, format!("maxval {maxval} unsupported, need 255")));
    }
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err(h.pos, "expected whitespace before pixel data"));
    }
    let start = h.pos + 1;
    let need = width * height * channels;
    let payload = &bytes[start.min(bytes.len())..];
    if payload.len() < need {
        return Err(format_err(
            bytes.len(),
            format!("truncated payload: {} of {need} bytes", payload.len()),
        ));
    }
    let plane = width * height;
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            let src = if channels == 1 { payload[i] } else { payload[i * 3 + c] };
            data[c * plane + i] = f64::from(src) / 255.0;
        }
    }
    Ok(Tensor::new(&[3, height, width], data)?)
}

pub fn load_image_pgm_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_pnm(&std::fs::read(path)?)
}

/// Encodes a `[3, h, w]` tensor as P6, rounding to the nearest level.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(HarnessError::Parameter(format!("expected [3, h, w] image, got {s:?}")));
    }
    let (height, width) = (s[1], s[2]);
    let plane = height * width;
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for i in 0..plane {
        for c in 0..3 {
            let v = image.data()[c * plane + i].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn save_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    Ok(std::fs::write(path, encode_ppm(image)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ashnet_tensor::rng::seeded;

    #[test]
    fn gray_zeros_replicate() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend([0u8; 4]);
        let t = decode_pnm(&bytes).unwrap();
        assert_eq!(t.shape(), &[3, 2, 2]);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn red_pixel() {
        let mut bytes = b"P6 # comment\n1 1\n255\n".to_vec();
        bytes.extend([255, 0, 0]);
        let t = decode_pnm(&bytes).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn errors_carry_offsets() {
        match decode_pnm(b"P3\n1 1\n255\n").unwrap_err() {
            HarnessError::Format { offset, .. } => assert_eq!(offset, 0),
            e => panic!("{e}"),
        }
        let truncated = b"P6\n2 2\n255\n\x01\x02";
        match decode_pnm(truncated).unwrap_err() {
            HarnessError::Format { offset, .. } => assert_eq!(offset, truncated.len()),
            e => panic!("{e}"),
        }
        match decode_pnm(b"P5\n2 x\n255\n").unwrap_err() {
            HarnessError::Format { offset, .. } => assert_eq!(offset, 5),
            e => panic!("{e}"),
        }
        assert!(decode_pnm(b"P5\n1 1\n65535\n\0\0").is_err());
    }

    #[test]
    fn round_trip_within_quantization() {
        let img = Tensor::uniform(&[3, 5, 7], 0.0, 1.0, &mut seeded(2));
        let back = decode_pnm(&encode_ppm(&img).unwrap()).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(img.max_abs_diff(&back) <= 0.5 / 255.0 + 1e-12);
    }
}
