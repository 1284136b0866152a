//! Background generation of toy batches.

use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;

use vit_adapter_core::toy::{SampleStream, ToySample};

/// Batches of a [`SampleStream`] produced on a worker thread through a
/// bounded queue. The order is the stream's order regardless of timing.
pub struct Prefetcher {
    rx: Option<Receiver<Vec<ToySample>>>,
    worker: Option<JoinHandle<()>>,
}

impl Prefetcher {
    pub fn spawn(stream: SampleStream, depth: usize) -> Self {
        let (tx, rx) = sync_channel(depth.max(1));
        let worker = std::thread::spawn(move || {
            for batch in stream {
                if tx.send(batch).is_err() {
                    break;
                }
            }
        });
        Self {
            rx: Some(rx),
            worker: Some(worker),
        }
    }
}

impl Iterator for Prefetcher {
    type Item = Vec<ToySample>;

    fn next(&mut self) -> Option<Self::Item> {
        self.rx.as_ref()?.recv().ok()
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        // Closing the queue makes the worker's next send fail.
        self.rx.take();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}
