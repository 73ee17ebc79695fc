//! Fixtures shared by the criterion benches in `benches/`.

use spindle::media::{encode_ppm, ImageFrame};
use spindle::netsim::corpus_image;

/// Deterministic noise frame, as the corpus generator would write it.
pub fn frame(width: u32, height: u32) -> ImageFrame {
    corpus_image(0, width, height, 42)
}

pub fn ppm(width: u32, height: u32) -> Vec<u8> {
    encode_ppm(&frame(width, height))
}
