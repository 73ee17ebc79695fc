use super::{ImageFrame, CHANNELS};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("resize target must be positive, got {width}x{height}")]
pub struct ResizeError {
    pub width: u32,
    pub height: u32,
}

/// For each output index, the source indices it covers and their integer
/// overlap weights. In scaled units (source pixel = `dst` wide, output
/// pixel = `src` wide) every weight is an integer and each row sums to `src`.
fn axis_weights(src: u32, dst: u32) -> Vec<Vec<(usize, u64)>> {
    let (src, dst) = (src as u64, dst as u64);
    (0..dst)
        .map(|o| {
            let lo = o * src;
            let hi = lo + src;
            let first = lo / dst;
            let last = (hi - 1) / dst;
            (first..=last)
                .map(|i| {
                    let a = (i * dst).max(lo);
                    let b = ((i + 1) * dst).min(hi);
                    (i as usize, b - a)
                })
                .collect()
        })
        .collect()
}

/// Area-average (box filter) resize. Each output sample is the overlap-weighted
/// mean of the source box it covers, rounded half-up. Integer arithmetic only,
/// so results are bit-reproducible.
pub fn resize_area(frame: &ImageFrame, out_w: u32, out_h: u32) -> Result<ImageFrame, ResizeError> {
    if out_w == 0 || out_h == 0 {
        return Err(ResizeError {
            width: out_w,
            height: out_h,
        });
    }
    let (in_w, in_h) = (frame.width(), frame.height());
    if (in_w, in_h) == (out_w, out_h) {
        return Ok(frame.clone());
    }
    let wx = axis_weights(in_w, out_w);
    let wy = axis_weights(in_h, out_h);
    let src = frame.pixels();
    let row_len = in_w as usize * CHANNELS;

    // Horizontal pass into u64 partial sums, one row per source row.
    let tmp_row = out_w as usize * CHANNELS;
    let mut tmp = vec![0u64; in_h as usize * tmp_row];
    for y in 0..in_h as usize {
        let row = &src[y * row_len..(y + 1) * row_len];
        let out = &mut tmp[y * tmp_row..(y + 1) * tmp_row];
        for (ox, taps) in wx.iter().enumerate() {
            let mut acc = [0u64; CHANNELS];
            for &(sx, w) in taps {
                let p = &row[sx * CHANNELS..sx * CHANNELS + CHANNELS];
                for c in 0..CHANNELS {
                    acc[c] += w * p[c] as u64;
                }
            }
            out[ox * CHANNELS..ox * CHANNELS + CHANNELS].copy_from_slice(&acc);
        }
    }

    let denom = in_w as u64 * in_h as u64;
    let mut pixels = vec![0u8; out_w as usize * out_h as usize * CHANNELS];
    for (oy, taps) in wy.iter().enumerate() {
        let out = &mut pixels[oy * tmp_row..(oy + 1) * tmp_row];
        for (i, sample) in out.iter_mut().enumerate() {
            let mut s = 0u64;
            for &(sy, w) in taps {
                s += w * tmp[sy * tmp_row + i];
            }
            *sample = ((2 * s + denom) / (2 * denom)) as u8;
        }
    }
    Ok(ImageFrame::new(out_w, out_h, pixels).expect("sized from target dims"))
}
