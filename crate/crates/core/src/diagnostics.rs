//! Process-wide counters for numerically degenerate events that are
//! handled by a fallback instead of an error.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::Serialize;

static OUT_OF_BOUNDS: AtomicU64 = AtomicU64::new(0);
static DEGENERATE_NORMALS: AtomicU64 = AtomicU64::new(0);
static NEAR_SINGULAR_FLASH: AtomicU64 = AtomicU64::new(0);
static SKIPPED_UPDATES: AtomicU64 = AtomicU64::new(0);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub out_of_bounds_queries: u64,
    pub degenerate_normals: u64,
    pub near_singular_flash: u64,
    pub skipped_updates: u64,
}

pub(crate) fn out_of_bounds() {
    OUT_OF_BOUNDS.fetch_add(1, Ordering::Relaxed);
}

pub(crate) fn degenerate_normal() {
    DEGENERATE_NORMALS.fetch_add(1, Ordering::Relaxed);
}

pub(crate) fn near_singular_flash() {
    NEAR_SINGULAR_FLASH.fetch_add(1, Ordering::Relaxed);
}

pub(crate) fn skipped_update() {
    SKIPPED_UPDATES.fetch_add(1, Ordering::Relaxed);
}

pub fn snapshot() -> Counters {
    Counters {
        out_of_bounds_queries: OUT_OF_BOUNDS.load(Ordering::Relaxed),
        degenerate_normals: DEGENERATE_NORMALS.load(Ordering::Relaxed),
        near_singular_flash: NEAR_SINGULAR_FLASH.load(Ordering::Relaxed),
        skipped_updates: SKIPPED_UPDATES.load(Ordering::Relaxed),
    }
}

impl Counters {
    /// Counts accumulated since `earlier`.
    pub fn since(&self, earlier: &Counters) -> Counters {
        Counters {
            out_of_bounds_queries: self.out_of_bounds_queries - earlier.out_of_bounds_queries,
            degenerate_normals: self.degenerate_normals - earlier.degenerate_normals,
            near_singular_flash: self.near_singular_flash - earlier.near_singular_flash,
            skipped_updates: self.skipped_updates - earlier.skipped_updates,
        }
    }
}
