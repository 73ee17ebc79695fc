//! Synthetic media workload: binary PPM codec, area resize, copy-once batching
//! into pooled contiguous buffers, and a single-flight "device" transfer stub.

mod batch;
mod ppm;
mod resize;
mod transfer;

pub use batch::{make_batch, BatchBuffer, BatchError, BatchShape, BufferOrigin, BufferPool};
pub use ppm::{decode_ppm, decode_ppm_with_burn, encode_ppm, DecodeError};
pub use resize::{resize_area, ResizeError};
pub use transfer::{DeviceArena, DeviceBatch};

/// Bytes per pixel (interleaved RGB).
pub const CHANNELS: usize = 3;

/// Row-major interleaved RGB, 8 bits per sample, no padding.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageFrame {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FrameError {
    #[error("frame dimensions must be positive, got {width}x{height}")]
    ZeroDimension { width: u32, height: u32 },
    #[error("expected {expected} sample bytes, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
}

impl ImageFrame {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, FrameError> {
        if width == 0 || height == 0 {
            return Err(FrameError::ZeroDimension { width, height });
        }
        let expected = width as usize * height as usize * CHANNELS;
        if pixels.len() != expected {
            return Err(FrameError::LengthMismatch {
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Every pixel set to `rgb`.
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        Self::from_fn(width, height, |_, _, c| rgb[c])
    }

    /// Builds a frame from `f(x, y, channel)`.
    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(usize, usize, usize) -> u8) -> Self {
        assert!(width > 0 && height > 0, "frame dimensions must be positive");
        let mut pixels = Vec::with_capacity(width as usize * height as usize * CHANNELS);
        for y in 0..height as usize {
            for x in 0..width as usize {
                for c in 0..CHANNELS {
                    pixels.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn byte_len(&self) -> usize {
        self.pixels.len()
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width as usize + x) * CHANNELS;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Per-channel mean over all pixels.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut sums = [0u64; 3];
        for px in self.pixels.chunks_exact(CHANNELS) {
            for c in 0..CHANNELS {
                sums[c] += px[c] as u64;
            }
        }
        let n = (self.width as u64 * self.height as u64) as f64;
        sums.map(|s| s as f64 / n)
    }
}

impl std::fmt::Debug for ImageFrame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageFrame")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}
