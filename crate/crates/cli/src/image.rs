//! Binary PPM (P6) input and PGM (P5) output, 8-bit only.

use std::path::Path;

use vit_adapter_core::{Real, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("malformed header: {0}")]
    Header(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ImageError> = std::result::Result<T, E>;

/// Parses `magic width height maxval` and returns the dims and the payload.
/// Exactly one whitespace byte separates the header from the payload.
fn parse_header<'a>(bytes: &'a [u8], magic: &str) -> Result<(usize, usize, &'a [u8])> {
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
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(ImageError::Header(format!(
                "expected {} header fields, found {}",
                4,
                fields.len()
            )));
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| ImageError::Header("non-ASCII header".into()))?,
        );
    }
    if fields[0] != magic {
        return Err(ImageError::Header(format!(
            "magic {:?}, expected {magic}",
            fields[0]
        )));
    }
    let num = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| ImageError::Header(format!("{what} {s:?} is not a number")))
    };
    let (w, h, max) = (
        num(fields[1], "width")?,
        num(fields[2], "height")?,
        num(fields[3], "maxval")?,
    );
    if w == 0 || h == 0 {
        return Err(ImageError::Header(format!("empty image {w}x{h}")));
    }
    if max != 255 {
        return Err(ImageError::Header(format!(
            "maxval {max}, only 255 is supported"
        )));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(ImageError::Header("missing separator after maxval".into()));
    }
    Ok((w, h, &bytes[pos + 1..]))
}

fn check_len(payload: &[u8], expected: usize) -> Result<()> {
    if payload.len() < expected {
        return Err(ImageError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    Ok(())
}

/// Decodes a P6 image to `[1, 3, H, W]` with channels scaled to [0, 1].
pub fn parse_ppm<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let (w, h, px) = parse_header(bytes, "P6")?;
    check_len(px, 3 * w * h)?;
    let plane = w * h;
    let t = Tensor::from_fn(&[1, 3, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        T::lit(px[3 * p + c] as f64 / 255.0)
    });
    Ok(t)
}

pub fn read_ppm<T: Real>(path: &Path) -> Result<Tensor<T>> {
    parse_ppm(&std::fs::read(path)?)
}

/// Encodes an RGB image, `rgb` interleaved row-major.
pub fn encode_ppm(w: usize, h: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), 3 * w * h, "rgb buffer does not match {w}x{h}");
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn encode_pgm(w: usize, h: usize, gray: &[u8]) -> Vec<u8> {
    assert_eq!(gray.len(), w * h, "gray buffer does not match {w}x{h}");
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

/// Returns `(width, height, pixels)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h, px) = parse_header(bytes, "P5")?;
    check_len(px, w * h)?;
    Ok((w, h, px[..w * h].to_vec()))
}

pub fn write_pgm(path: &Path, w: usize, h: usize, gray: &[u8]) -> Result<()> {
    Ok(std::fs::write(path, encode_pgm(w, h, gray))?)
}
