//! Multiply-add metering.
//!
//! Kernels call [`record`], which credits the counter installed on the current
//! thread (if any) under the current [`Phase`]. Counters are atomic, so one
//! counter may be installed on several threads at once without losing counts.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Tokenizer,
    Attention,
    Ffn,
    Heads,
    Other,
}

impl Phase {
    pub const ALL: [Phase; 5] = [
        Phase::Tokenizer,
        Phase::Attention,
        Phase::Ffn,
        Phase::Heads,
        Phase::Other,
    ];

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Tokenizer => "tokenizer",
            Phase::Attention => "attention",
            Phase::Ffn => "ffn",
            Phase::Heads => "heads",
            Phase::Other => "other",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Default)]
pub struct FlopCounter {
    per_phase: [AtomicU64; 5],
}

/// Plain snapshot of a counter.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub tokenizer: u64,
    pub attention: u64,
    pub ffn: u64,
    pub heads: u64,
    pub other: u64,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.tokenizer + self.attention + self.ffn + self.heads + self.other
    }

    pub fn get(&self, phase: Phase) -> u64 {
        match phase {
            Phase::Tokenizer => self.tokenizer,
            Phase::Attention => self.attention,
            Phase::Ffn => self.ffn,
            Phase::Heads => self.heads,
            Phase::Other => self.other,
        }
    }

    pub fn add_phase(&mut self, phase: Phase, n: u64) {
        match phase {
            Phase::Tokenizer => self.tokenizer += n,
            Phase::Attention => self.attention += n,
            Phase::Ffn => self.ffn += n,
            Phase::Heads => self.heads += n,
            Phase::Other => self.other += n,
        }
    }
}

impl std::ops::Add for FlopReport {
    type Output = FlopReport;

    fn add(mut self, rhs: FlopReport) -> FlopReport {
        for p in Phase::ALL {
            self.add_phase(p, rhs.get(p));
        }
        self
    }
}

impl std::ops::Mul<u64> for FlopReport {
    type Output = FlopReport;

    fn mul(self, k: u64) -> FlopReport {
        let mut out = FlopReport::default();
        for p in Phase::ALL {
            out.add_phase(p, self.get(p) * k);
        }
        out
    }
}

impl FlopCounter {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn add(&self, phase: Phase, n: u64) {
        self.per_phase[phase.index()].fetch_add(n, Ordering::Relaxed);
    }

    pub fn total(&self) -> u64 {
        self.per_phase
            .iter()
            .map(|c| c.load(Ordering::Relaxed))
            .sum()
    }

    pub fn report(&self) -> FlopReport {
        let mut r = FlopReport::default();
        for p in Phase::ALL {
            r.add_phase(p, self.per_phase[p.index()].load(Ordering::Relaxed));
        }
        r
    }

    pub fn reset(&self) {
        for c in &self.per_phase {
            c.store(0, Ordering::Relaxed);
        }
    }

    /// Runs `f` with this counter installed on the current thread.
    pub fn measure<R>(self: &Arc<Self>, f: impl FnOnce() -> R) -> R {
        ACTIVE.with(|a| a.borrow_mut().push(Arc::clone(self)));
        let _pop = PopOnDrop;
        f()
    }
}

struct PopOnDrop;

impl Drop for PopOnDrop {
    fn drop(&mut self) {
        ACTIVE.with(|a| {
            a.borrow_mut().pop();
        });
    }
}

thread_local! {
    static ACTIVE: RefCell<Vec<Arc<FlopCounter>>> = const { RefCell::new(Vec::new()) };
    static PHASE: Cell<Phase> = const { Cell::new(Phase::Other) };
}

/// Credits `n` multiply-adds to every counter installed on this thread.
#[inline]
pub fn record(n: u64) {
    ACTIVE.with(|a| {
        let active = a.borrow();
        if active.is_empty() {
            return;
        }
        let phase = PHASE.with(|p| p.get());
        for c in active.iter() {
            c.add(phase, n);
        }
    });
}

/// Restores the previous phase when dropped.
pub struct PhaseGuard {
    prev: Phase,
}

impl Drop for PhaseGuard {
    fn drop(&mut self) {
        PHASE.with(|p| p.set(self.prev));
    }
}

/// Attributes subsequent kernel calls on this thread to `phase` until the
/// guard is dropped.
#[must_use]
pub fn phase(phase: Phase) -> PhaseGuard {
    let prev = PHASE.with(|p| p.replace(phase));
    PhaseGuard { prev }
}
