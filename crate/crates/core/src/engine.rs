//! Event scheduler and seeded random streams.
//!
//! Events are ordered lexicographically by `(time, sequence)`, where the
//! sequence number is assigned at insertion. Same-time events therefore fire
//! in insertion order. Cancellation removes the event from the queue, so a
//! cancelled event can never fire.

use alloc::collections::BTreeMap;
use core::fmt;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::Nanos;

/// What an event does when it fires.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    /// A node reaches a backoff slot boundary (countdown resumes or ends).
    SlotBoundary,
    TxStart,
    TxEnd,
    TimerExpiry,
    TrafficArrival,
}

/// A scheduled event. `subject` is the index of the node the event concerns.
#[derive(Debug, Clone, PartialEq)]
pub struct Event<P> {
    pub time: Nanos,
    pub sequence: u64,
    pub kind: EventKind,
    pub subject: usize,
    pub payload: P,
}

/// Identifies a scheduled event for cancellation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventHandle {
    time: Nanos,
    sequence: u64,
}

impl EventHandle {
    pub fn time(&self) -> Nanos {
        self.time
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScheduleError {
    /// The event time lies before the scheduler clock.
    PastTime { at: Nanos, now: Nanos },
}

impl fmt::Display for ScheduleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleError::PastTime { at, now } => {
                write!(f, "event scheduled at {at} ns but the clock is already at {now} ns")
            }
        }
    }
}

impl core::error::Error for ScheduleError {}

/// Priority queue of events keyed by `(time, sequence)`.
#[derive(Debug, Clone)]
pub struct Scheduler<P> {
    queue: BTreeMap<(Nanos, u64), (EventKind, usize, P)>,
    clock: Nanos,
    next_sequence: u64,
    fired: u64,
}

impl<P> Default for Scheduler<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> Scheduler<P> {
    pub fn new() -> Self {
        Self {
            queue: BTreeMap::new(),
            clock: 0,
            next_sequence: 0,
            fired: 0,
        }
    }

    #[inline]
    pub fn now(&self) -> Nanos {
        self.clock
    }

    /// Number of events fired so far.
    pub fn fired(&self) -> u64 {
        self.fired
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn schedule(
        &mut self,
        time: Nanos,
        kind: EventKind,
        subject: usize,
        payload: P,
    ) -> Result<EventHandle, ScheduleError> {
        if time < self.clock {
            return Err(ScheduleError::PastTime {
                at: time,
                now: self.clock,
            });
        }
        let sequence = self.next_sequence;
        self.next_sequence += 1;
        self.queue.insert((time, sequence), (kind, subject, payload));
        Ok(EventHandle { time, sequence })
    }

    /// Removes a pending event. Returns `false` if it already fired or was
    /// cancelled before.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        self.queue.remove(&(handle.time, handle.sequence)).is_some()
    }

    pub fn is_pending(&self, handle: EventHandle) -> bool {
        self.queue.contains_key(&(handle.time, handle.sequence))
    }

    pub fn peek_time(&self) -> Option<Nanos> {
        self.queue.keys().next().map(|&(t, _)| t)
    }

    /// Pops the next event if it is due at or before `limit`, advancing the
    /// clock to its time.
    pub fn pop_until(&mut self, limit: Nanos) -> Option<Event<P>> {
        let (&(time, _), _) = self.queue.iter().next()?;
        if time > limit {
            return None;
        }
        let ((time, sequence), (kind, subject, payload)) = self.queue.pop_first()?;
        self.clock = time;
        self.fired += 1;
        Some(Event {
            time,
            sequence,
            kind,
            subject,
            payload,
        })
    }

    /// Moves the clock forward without firing anything. Pending events before
    /// `t` must not exist.
    pub fn advance_to(&mut self, t: Nanos) {
        debug_assert!(self.peek_time().map_or(true, |p| p >= t));
        if t > self.clock {
            self.clock = t;
        }
    }
}

/// Error for a zero-sized draw range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmptyRange;

impl fmt::Display for EmptyRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("uniform draw over an empty range")
    }
}

/// Independent pseudo-random stream for one `(node, purpose)` pair.
///
/// The stream key is `splitmix64` applied three times, chaining the scenario
/// seed, the FNV-1a hash of the node id and the FNV-1a hash of the purpose
/// tag. Four further `splitmix64` outputs form the 256-bit ChaCha8 key.
/// Each draw consumes exactly one 64-bit word of the ChaCha8 output.
#[derive(Debug, Clone)]
pub struct RandomStream {
    rng: ChaCha8Rng,
}

pub(crate) fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

impl RandomStream {
    pub fn new(seed: u64, node_id: &str, purpose: &str) -> Self {
        let mut state = seed;
        let a = splitmix64(&mut state);
        let mut state = a ^ fnv1a(node_id.as_bytes());
        let b = splitmix64(&mut state);
        let mut state = b ^ fnv1a(purpose.as_bytes()).rotate_left(17);
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        Self {
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Integer in `[0, n)` by widening multiplication of one 64-bit word.
    pub fn uniform(&mut self, n: u64) -> Result<u64, EmptyRange> {
        if n == 0 {
            return Err(EmptyRange);
        }
        let x = self.rng.next_u64();
        Ok(((u128::from(x) * u128::from(n)) >> 64) as u64)
    }

    /// Float in `[0, 1)` built from the top 53 bits of one word.
    pub fn unit_f64(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Exponential variate with the given mean, used for Poisson arrivals.
    pub fn exponential(&mut self, mean: f64) -> f64 {
        let u = self.unit_f64();
        -mean * libm::log(1.0 - u)
    }

    /// Standard normal variate (Box-Muller, two words).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.unit_f64();
        let u2 = self.unit_f64();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::vec::Vec;

    fn drain(s: &mut Scheduler<&'static str>) -> Vec<&'static str> {
        let mut out = Vec::new();
        while let Some(e) = s.pop_until(Nanos::MAX) {
            out.push(e.payload);
        }
        out
    }

    #[test]
    fn same_time_events_fire_in_insertion_order() {
        let mut s = Scheduler::new();
        s.schedule(100, EventKind::TxStart, 0, "p").unwrap();
        s.schedule(100, EventKind::TxStart, 1, "q").unwrap();
        assert_eq!(drain(&mut s), ["p", "q"]);
    }

    #[test]
    fn earlier_time_fires_first() {
        let mut s = Scheduler::new();
        s.schedule(50, EventKind::TxEnd, 0, "fifty").unwrap();
        s.schedule(40, EventKind::TxEnd, 0, "forty").unwrap();
        assert_eq!(drain(&mut s), ["forty", "fifty"]);
    }

    #[test]
    fn cancelled_event_never_fires() {
        let mut s = Scheduler::new();
        let h = s.schedule(10, EventKind::TimerExpiry, 0, "x").unwrap();
        s.schedule(20, EventKind::TimerExpiry, 0, "y").unwrap();
        assert!(s.cancel(h));
        assert!(!s.cancel(h));
        assert_eq!(drain(&mut s), ["y"]);
    }

    #[test]
    fn past_insertion_is_rejected() {
        let mut s = Scheduler::new();
        s.schedule(10, EventKind::TxStart, 0, "a").unwrap();
        s.pop_until(100).unwrap();
        assert_eq!(
            s.schedule(5, EventKind::TxStart, 0, "b"),
            Err(ScheduleError::PastTime { at: 5, now: 10 })
        );
        assert!(s.schedule(10, EventKind::TxStart, 0, "c").is_ok());
    }

    #[test]
    fn pop_until_respects_limit() {
        let mut s = Scheduler::new();
        s.schedule(10, EventKind::TxStart, 0, "a").unwrap();
        assert!(s.pop_until(9).is_none());
        assert_eq!(s.now(), 0);
        assert!(s.pop_until(10).is_some());
        assert_eq!(s.now(), 10);
    }

    #[test]
    fn uniform_of_one_is_zero() {
        let mut r = RandomStream::new(7, "n", "backoff");
        for _ in 0..1000 {
            assert_eq!(r.uniform(1), Ok(0));
        }
        assert_eq!(r.uniform(0), Err(EmptyRange));
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a = RandomStream::new(1, "sta-1", "backoff");
        let mut b = RandomStream::new(1, "sta-1", "backoff");
        let mut c = RandomStream::new(1, "sta-2", "backoff");
        let mut d = RandomStream::new(1, "sta-1", "traffic");
        let xa: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        let xc: Vec<u64> = (0..8).map(|_| c.next_u64()).collect();
        let xd: Vec<u64> = (0..8).map(|_| d.next_u64()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
        assert_ne!(xa, xd);
    }

    #[test]
    fn same_state_same_value() {
        let r = RandomStream::new(3, "ap", "backoff");
        let mut r1 = r.clone();
        let mut r2 = r;
        assert_eq!(r1.uniform(16), r2.uniform(16));
    }

    #[test]
    fn uniform_chi_square_n16() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let mut r = RandomStream::new(42, "node", "backoff");
        let n = 16u64;
        let draws = 1_000_000u64;
        let mut counts = [0u64; 16];
        for _ in 0..draws {
            counts[r.uniform(n).unwrap() as usize] += 1;
        }
        let expected = draws as f64 / n as f64;
        let stat: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        let p = 1.0 - ChiSquared::new((n - 1) as f64).unwrap().cdf(stat);
        assert!(p > 0.01, "chi-square {stat} p-value {p}");
    }
}
