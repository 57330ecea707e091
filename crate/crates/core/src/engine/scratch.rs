use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Condvar, Mutex};

use crate::error::{FluteError, Result};
use crate::numerics::Half;

/// Global-memory scratch for Stream-K fixup: one Half partial buffer per
/// contributor slot and one counting semaphore per split output tile.
#[derive(Debug)]
pub struct Scratch {
    partials: Vec<Mutex<Option<Vec<Half>>>>,
    semaphores: Vec<(Mutex<usize>, Condvar)>,
    aborted: AtomicBool,
    blocking: bool,
}

impl Scratch {
    /// `blocking = false` is for workers multiplexed on one thread: a wait
    /// that is not already satisfied is reported instead of parking.
    pub fn new(slots: usize, tiles: usize, blocking: bool) -> Self {
        Scratch {
            partials: (0..slots).map(|_| Mutex::new(None)).collect(),
            semaphores: (0..tiles)
                .map(|_| (Mutex::new(0), Condvar::new()))
                .collect(),
            aborted: AtomicBool::new(false),
            blocking,
        }
    }

    pub fn store(&self, slot: usize, partial: Vec<Half>) -> Result<()> {
        let mut guard = self.partials[slot].lock().map_err(|_| poisoned())?;
        if guard.is_some() {
            return Err(FluteError::Internal(format!(
                "partial slot {slot} written twice"
            )));
        }
        *guard = Some(partial);
        Ok(())
    }

    pub fn signal(&self, fixup: usize) -> Result<()> {
        let (count, cv) = &self.semaphores[fixup];
        *count.lock().map_err(|_| poisoned())? += 1;
        cv.notify_all();
        Ok(())
    }

    /// Block until `expected` contributors have signalled `fixup`.
    pub fn wait(&self, fixup: usize, expected: usize) -> Result<()> {
        let (count, cv) = &self.semaphores[fixup];
        let mut c = count.lock().map_err(|_| poisoned())?;
        while *c < expected {
            if self.aborted.load(Ordering::Acquire) {
                return Err(FluteError::Internal("another worker failed".into()));
            }
            if !self.blocking {
                return Err(FluteError::Internal(format!(
                    "fixup {fixup} has {} of {expected} partials and waiting would deadlock",
                    *c
                )));
            }
            c = cv.wait(c).map_err(|_| poisoned())?;
        }
        Ok(())
    }

    pub fn load(&self, slot: usize) -> Result<Vec<Half>> {
        self.partials[slot]
            .lock()
            .map_err(|_| poisoned())?
            .clone()
            .ok_or_else(|| FluteError::Internal(format!("partial slot {slot} read before write")))
    }

    /// Wake every waiter so it can observe a failed peer.
    pub fn abort(&self) {
        self.aborted.store(true, Ordering::Release);
        for (m, cv) in &self.semaphores {
            let _g = m.lock();
            cv.notify_all();
        }
    }
}

fn poisoned() -> FluteError {
    FluteError::Internal("scratch lock poisoned".into())
}
