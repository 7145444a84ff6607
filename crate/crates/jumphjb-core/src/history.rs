//! Read-only noise history handed to coefficient and policy callbacks.
//!
//! Coefficients of the state and backward equations may be random through
//! the driving noise. Adaptedness is realized the way cylinder functions
//! represent it: a callback at time `t` sees the Brownian path at the grid
//! nodes up to `t` and the jump records up to `t`, nothing later.
//! Deterministic problems simply ignore the handle.

use crate::mark_measure::JumpRecord;

/// Borrowed view of the noise realized up to (and including) a grid node.
#[derive(Clone, Copy)]
pub struct NoiseHistory<'a> {
    times: &'a [f64],
    /// Cumulative Brownian coordinates, node-major: entry `i * d + j` is
    /// component `j` of `W(times[i])`.
    brownian: &'a [f64],
    d: usize,
    jumps: &'a [JumpRecord],
}

impl<'a> NoiseHistory<'a> {
    pub fn new(times: &'a [f64], brownian: &'a [f64], d: usize, jumps: &'a [JumpRecord]) -> Self {
        debug_assert_eq!(brownian.len(), times.len() * d);
        Self { times, brownian, d, jumps }
    }

    /// History of a problem with no randomness observed yet.
    pub fn empty() -> NoiseHistory<'static> {
        NoiseHistory { times: &[], brownian: &[], d: 0, jumps: &[] }
    }

    /// Grid nodes covered so far.
    pub fn times(&self) -> &[f64] {
        self.times
    }

    pub fn brownian_dim(&self) -> usize {
        self.d
    }

    /// Brownian value at covered node `i`.
    pub fn brownian_at(&self, i: usize) -> &[f64] {
        &self.brownian[i * self.d..(i + 1) * self.d]
    }

    /// Jump records observed so far, sorted by time.
    pub fn jumps(&self) -> &[JumpRecord] {
        self.jumps
    }

    /// Number of observed jumps with mark index in `group`.
    pub fn jump_count(&self, group: &[usize]) -> usize {
        self.jumps.iter().filter(|j| group.contains(&j.mark_index)).count()
    }
}
