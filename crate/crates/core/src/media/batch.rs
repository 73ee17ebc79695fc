use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use super::{ImageFrame, CHANNELS};

/// `(count, height, width, 3)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BatchShape {
    pub count: usize,
    pub height: u32,
    pub width: u32,
}

impl BatchShape {
    pub fn new(count: usize, height: u32, width: u32) -> Self {
        Self {
            count,
            height,
            width,
        }
    }

    pub fn frame_len(&self) -> usize {
        self.height as usize * self.width as usize * CHANNELS
    }

    pub fn byte_len(&self) -> usize {
        self.count * self.frame_len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BufferOrigin {
    Fresh,
    Reused,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BatchError {
    #[error("expected {expected} frames, got {actual}")]
    CountMismatch { expected: usize, actual: usize },
    #[error(
        "frame at index {index} is {actual_w}x{actual_h}, batch expects {expected_w}x{expected_h}"
    )]
    DimensionMismatch {
        index: usize,
        expected_w: u32,
        expected_h: u32,
        actual_w: u32,
        actual_h: u32,
    },
}

struct PoolInner {
    shape: BatchShape,
    free: Mutex<Vec<Vec<u8>>>,
    outstanding: AtomicUsize,
    high_water: AtomicUsize,
    allocated: AtomicUsize,
    copies: AtomicU64,
}

/// Free list of fixed-shape batch buffers. Cloning shares the pool.
#[derive(Clone)]
pub struct BufferPool {
    inner: Arc<PoolInner>,
}

impl BufferPool {
    pub fn new(shape: BatchShape) -> Self {
        Self {
            inner: Arc::new(PoolInner {
                shape,
                free: Mutex::new(Vec::new()),
                outstanding: AtomicUsize::new(0),
                high_water: AtomicUsize::new(0),
                allocated: AtomicUsize::new(0),
                copies: AtomicU64::new(0),
            }),
        }
    }

    pub fn shape(&self) -> BatchShape {
        self.inner.shape
    }

    /// Takes a buffer from the free list, or allocates one.
    pub fn acquire(&self) -> BatchBuffer {
        let inner = &self.inner;
        let reused = inner.free.lock().pop();
        let (data, origin) = match reused {
            Some(data) => (data, BufferOrigin::Reused),
            None => {
                inner.allocated.fetch_add(1, Ordering::Relaxed);
                (vec![0u8; inner.shape.byte_len()], BufferOrigin::Fresh)
            }
        };
        let now = inner.outstanding.fetch_add(1, Ordering::AcqRel) + 1;
        inner.high_water.fetch_max(now, Ordering::AcqRel);
        BatchBuffer {
            data,
            shape: inner.shape,
            filled: 0,
            origin,
            pool: Some(self.inner.clone()),
        }
    }

    /// Most buffers ever checked out at the same time.
    pub fn high_water(&self) -> usize {
        self.inner.high_water.load(Ordering::Acquire)
    }

    pub fn outstanding(&self) -> usize {
        self.inner.outstanding.load(Ordering::Acquire)
    }

    /// Buffers allocated over the pool's lifetime.
    pub fn allocated(&self) -> usize {
        self.inner.allocated.load(Ordering::Relaxed)
    }

    pub fn free_count(&self) -> usize {
        self.inner.free.lock().len()
    }

    /// Frame copies made into pooled buffers.
    pub fn copies(&self) -> u64 {
        self.inner.copies.load(Ordering::Relaxed)
    }
}

impl std::fmt::Debug for BufferPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BufferPool")
            .field("shape", &self.inner.shape)
            .field("outstanding", &self.outstanding())
            .field("high_water", &self.high_water())
            .finish()
    }
}

/// Contiguous `(count, height, width, 3)` block. Returns itself to its pool
/// when dropped.
pub struct BatchBuffer {
    data: Vec<u8>,
    shape: BatchShape,
    filled: usize,
    origin: BufferOrigin,
    pool: Option<Arc<PoolInner>>,
}

impl BatchBuffer {
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn shape(&self) -> BatchShape {
        self.shape
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn origin(&self) -> BufferOrigin {
        self.origin
    }

    pub fn is_full(&self) -> bool {
        self.filled == self.shape.count
    }

    /// Samples of frame `index`.
    pub fn frame(&self, index: usize) -> &[u8] {
        let n = self.shape.frame_len();
        &self.data[index * n..(index + 1) * n]
    }

    /// Copies `frame` into the next free slot.
    fn push(&mut self, frame: &ImageFrame) {
        let n = self.shape.frame_len();
        let at = self.filled * n;
        self.data[at..at + n].copy_from_slice(frame.pixels());
        self.filled += 1;
        if let Some(pool) = &self.pool {
            pool.copies.fetch_add(1, Ordering::Relaxed);
        }
    }
}

impl Drop for BatchBuffer {
    fn drop(&mut self) {
        if let Some(pool) = self.pool.take() {
            pool.free.lock().push(std::mem::take(&mut self.data));
            pool.outstanding.fetch_sub(1, Ordering::AcqRel);
        }
    }
}

impl std::fmt::Debug for BatchBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BatchBuffer")
            .field("shape", &self.shape)
            .field("filled", &self.filled)
            .field("origin", &self.origin)
            .finish()
    }
}

/// Copies each frame exactly once into a pooled contiguous buffer.
pub fn make_batch(frames: &[ImageFrame], pool: &BufferPool) -> Result<BatchBuffer, BatchError> {
    let shape = pool.shape();
    if frames.len() != shape.count {
        return Err(BatchError::CountMismatch {
            expected: shape.count,
            actual: frames.len(),
        });
    }
    if let Some((index, f)) = frames
        .iter()
        .enumerate()
        .find(|(_, f)| (f.width(), f.height()) != (shape.width, shape.height))
    {
        return Err(BatchError::DimensionMismatch {
            index,
            expected_w: shape.width,
            expected_h: shape.height,
            actual_w: f.width(),
            actual_h: f.height(),
        });
    }
    let mut buf = pool.acquire();
    for f in frames {
        buf.push(f);
    }
    Ok(buf)
}
