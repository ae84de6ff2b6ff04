use std::sync::{Condvar, Mutex};

use serde_json::Value;

use crate::error::Result;

use super::{Transport, WireRequest};

/// Bounds the number of concurrent calls into `inner`.
pub struct Throttled<T> {
    inner: T,
    limit: usize,
    state: Mutex<Slots>,
    freed: Condvar,
}

#[derive(Default)]
struct Slots {
    in_flight: usize,
    peak: usize,
}

impl<T: Transport> Throttled<T> {
    pub fn new(inner: T, limit: usize) -> Self {
        Throttled {
            inner,
            limit: limit.max(1),
            state: Mutex::new(Slots::default()),
            freed: Condvar::new(),
        }
    }

    /// Highest number of simultaneous calls observed so far.
    pub fn peak(&self) -> usize {
        self.state.lock().expect("slot lock").peak
    }

    pub fn inner(&self) -> &T {
        &self.inner
    }
}

struct Permit<'a, T> {
    owner: &'a Throttled<T>,
}

impl<T> Drop for Permit<'_, T> {
    fn drop(&mut self) {
        let mut slots = self.owner.state.lock().expect("slot lock");
        slots.in_flight -= 1;
        self.owner.freed.notify_one();
    }
}

impl<T: Transport> Transport for Throttled<T> {
    fn call(&self, request: &WireRequest) -> Result<Value> {
        let _permit = {
            let mut slots = self.state.lock().expect("slot lock");
            while slots.in_flight >= self.limit {
                slots = self.freed.wait(slots).expect("slot lock");
            }
            slots.in_flight += 1;
            slots.peak = slots.peak.max(slots.in_flight);
            Permit { owner: self }
        };
        self.inner.call(request)
    }
}
