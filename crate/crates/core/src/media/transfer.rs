use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use parking_lot::Mutex;

use super::{BatchBuffer, BatchShape};

/// Host-side stand-in for a device copy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceBatch {
    data: Vec<u8>,
    shape: BatchShape,
    transfer_seq: u64,
}

impl DeviceBatch {
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn shape(&self) -> BatchShape {
        self.shape
    }

    pub fn transfer_seq(&self) -> u64 {
        self.transfer_seq
    }
}

/// Transfer target that admits one transfer at a time. Share it behind an
/// `Arc` to gate every stage task that transfers.
#[derive(Debug, Default)]
pub struct DeviceArena {
    gate: Mutex<u64>,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    copy_delay: Duration,
}

impl DeviceArena {
    pub fn new() -> Self {
        Self::default()
    }

    /// Holds the gate for an extra `delay` per transfer, emulating bus time.
    pub fn with_copy_delay(delay: Duration) -> Self {
        Self {
            copy_delay: delay,
            ..Self::default()
        }
    }

    /// Copies a full batch into the arena. Concurrent callers serialize.
    ///
    /// # Panics
    /// If the batch is not full.
    pub fn transfer(&self, batch: &BatchBuffer) -> DeviceBatch {
        assert!(
            batch.is_full(),
            "transfer of a partially filled batch ({} of {})",
            batch.filled(),
            batch.shape().count
        );
        let mut seq = self.gate.lock();
        let now = self.in_flight.fetch_add(1, Ordering::AcqRel) + 1;
        self.max_in_flight.fetch_max(now, Ordering::AcqRel);

        let data = batch.data().to_vec();
        if !self.copy_delay.is_zero() {
            std::thread::sleep(self.copy_delay);
        }
        *seq += 1;
        let out = DeviceBatch {
            data,
            shape: batch.shape(),
            transfer_seq: *seq,
        };

        self.in_flight.fetch_sub(1, Ordering::AcqRel);
        out
    }

    /// Transfers completed so far.
    pub fn transfers(&self) -> u64 {
        *self.gate.lock()
    }

    /// Highest number of transfers observed in progress at once.
    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::Acquire)
    }
}
