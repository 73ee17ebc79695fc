use std::hint::black_box;

use super::{ImageFrame, CHANNELS};

/// Largest accepted `width * height`; larger headers are treated as overflow.
const MAX_PIXELS: u64 = 1 << 28;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("bad magic {0:?}, expected \"P6\"")]
    BadMagic(String),
    #[error("malformed header: {0}")]
    Header(&'static str),
    #[error("unsupported maxval {0}, only 255 is supported")]
    UnsupportedMaxval(u32),
    #[error("dimensions {width}x{height} overflow")]
    DimsOverflow { width: u64, height: u64 },
    #[error("zero image dimension")]
    ZeroDimension,
    #[error("truncated payload: expected {expected} sample bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
}

/// Binary PPM: `P6\n<w> <h>\n255\n` followed by raw RGB samples.
pub fn encode_ppm(frame: &ImageFrame) -> Vec<u8> {
    let header = format!("P6\n{} {}\n255\n", frame.width(), frame.height());
    let mut out = Vec::with_capacity(header.len() + frame.byte_len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(frame.pixels());
    out
}

struct Header<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.data.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(&b) = self.data.get(self.pos) {
                    self.pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &'static str) -> Result<u64, DecodeError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.data.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(DecodeError::Header(what));
        }
        std::str::from_utf8(&self.data[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or(DecodeError::Header(what))
    }
}

/// Parses a binary PPM with maxval 255. Trailing bytes after the samples are ignored.
pub fn decode_ppm(data: &[u8]) -> Result<ImageFrame, DecodeError> {
    if data.len() < 2 || &data[..2] != b"P6" {
        let magic = String::from_utf8_lossy(&data[..data.len().min(2)]).into_owned();
        return Err(DecodeError::BadMagic(magic));
    }
    let mut h = Header { data, pos: 2 };
    if !data.get(2).is_some_and(u8::is_ascii_whitespace) {
        return Err(DecodeError::Header("missing whitespace after magic"));
    }
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(DecodeError::ZeroDimension);
    }
    if width > u32::MAX as u64
        || height > u32::MAX as u64
        || width.checked_mul(height).is_none_or(|p| p > MAX_PIXELS)
    {
        return Err(DecodeError::DimsOverflow { width, height });
    }
    if maxval != 255 {
        return Err(DecodeError::UnsupportedMaxval(
            maxval.min(u32::MAX as u64) as u32
        ));
    }
    // Exactly one whitespace byte separates maxval from the samples.
    if !data.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(DecodeError::Header("missing whitespace after maxval"));
    }
    let start = h.pos + 1;
    let expected = (width * height) as usize * CHANNELS;
    let available = data.len() - start;
    if available < expected {
        return Err(DecodeError::Truncated {
            expected,
            actual: available,
        });
    }
    let pixels = data[start..start + expected].to_vec();
    Ok(ImageFrame::new(width as u32, height as u32, pixels).expect("validated dimensions"))
}

/// [`decode_ppm`] followed by `passes` extra read passes over the samples,
/// emulating the cost of a heavier codec. The output is identical.
pub fn decode_ppm_with_burn(data: &[u8], passes: u32) -> Result<ImageFrame, DecodeError> {
    let frame = decode_ppm(data)?;
    let mut acc = 0u32;
    for pass in 0..passes {
        for &b in frame.pixels() {
            acc = acc.rotate_left(5) ^ (b as u32).wrapping_mul(0x9e37_79b9).wrapping_add(pass);
        }
        acc = black_box(acc);
    }
    black_box(acc);
    Ok(frame)
}
