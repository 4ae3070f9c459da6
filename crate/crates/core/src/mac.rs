//! Contention state, airtime formulas and single-user frame exchanges.

use alloc::collections::{BTreeSet, VecDeque};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::channel::ChannelMask;
use crate::engine::RandomStream;
use crate::scenario::{AccessProtocol, PhyParams};
use crate::Nanos;

/// Deterministic backoff used by CSMA/ECA after a success.
pub fn v_det(cw_min: u32) -> u32 {
    cw_min / 2 - 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackoffMode {
    Random,
    Deterministic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    None,
    Success,
    Collision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackoffState {
    pub counter: u32,
    pub stage: u32,
    pub mode: BackoffMode,
    pub last_outcome: Outcome,
}

impl Default for BackoffState {
    fn default() -> Self {
        Self {
            counter: 0,
            stage: 0,
            mode: BackoffMode::Random,
            last_outcome: Outcome::None,
        }
    }
}

impl BackoffState {
    pub fn cw(&self, phy: &PhyParams) -> u32 {
        let shifted = u64::from(phy.cw_min) << self.stage.min(32);
        shifted.min(u64::from(phy.cw_max)) as u32
    }

    /// Records the outcome of an attempt and draws the next counter.
    /// A collision doubles the window; a success or a drop resets it.
    pub fn on_outcome(
        &mut self,
        outcome: Outcome,
        dropped: bool,
        protocol: AccessProtocol,
        phy: &PhyParams,
        rng: &mut RandomStream,
    ) {
        match outcome {
            Outcome::Collision if !dropped => self.stage += 1,
            _ => self.stage = 0,
        }
        self.last_outcome = if dropped { Outcome::None } else { outcome };
        self.counter = sample_backoff(self, protocol, phy, rng);
    }
}

/// Draws a backoff counter for `state`, setting its mode as a side effect.
pub fn sample_backoff(
    state: &mut BackoffState,
    protocol: AccessProtocol,
    phy: &PhyParams,
    rng: &mut RandomStream,
) -> u32 {
    if protocol == AccessProtocol::CsmaEca && state.last_outcome == Outcome::Success {
        state.mode = BackoffMode::Deterministic;
        return v_det(phy.cw_min);
    }
    state.mode = BackoffMode::Random;
    // cw >= 1 always holds for a validated PhyParams.
    rng.uniform(u64::from(state.cw(phy).max(1))).unwrap_or(0) as u32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotAction {
    Decrement,
    Freeze,
    Transmit,
}

/// Slot-by-slot countdown. An idle slot decrements the counter and the node
/// transmits at the boundary where it reaches zero; a busy slot freezes it.
pub fn step_slot(state: &mut BackoffState, busy: bool) -> SlotAction {
    if busy {
        return SlotAction::Freeze;
    }
    state.counter = state.counter.saturating_sub(1);
    if state.counter == 0 {
        SlotAction::Transmit
    } else {
        SlotAction::Decrement
    }
}

/// Time at which a countdown started at `t0` with `counter` slots expires.
pub fn expiry_time(t0: Nanos, counter: u32, slot: Nanos) -> Nanos {
    t0 + u64::from(counter) * slot
}

/// Whole idle slots completed between `t0` and `tb`.
pub fn elapsed_slots(t0: Nanos, tb: Nanos, slot: Nanos) -> u32 {
    (tb.saturating_sub(t0) / slot) as u32
}

fn ceil_ns(bits: f64, rate_bps: f64) -> Nanos {
    libm::ceil(bits * 1e9 / rate_bps) as Nanos
}

/// Duration of a control frame at the control rate.
pub fn control_duration(phy: &PhyParams, bits: u32) -> Nanos {
    phy.phy_header + ceil_ns(f64::from(bits), phy.control_rate)
}

/// Bits per second of one spatial stream over `mask`. A contiguous power-of-two
/// block gets its bonded width factor; anything else is the sum of its parts.
pub fn stream_rate(phy: &PhyParams, mask: ChannelMask) -> f64 {
    if let Some((_, len)) = mask.as_contiguous() {
        if let Some(f) = phy.width_factors.for_channels(u32::from(len)) {
            return phy.base_rate_20mhz_1ss * f;
        }
    }
    mask.iter()
        .map(|_| phy.base_rate_20mhz_1ss * phy.width_factors.factors[0])
        .sum()
}

/// Bits of an aggregate of `mpdus` MPDUs including MAC headers.
pub fn aggregate_bits(phy: &PhyParams, mpdus: u32) -> u64 {
    u64::from(mpdus) * u64::from(phy.mac_header_bits + phy.mpdu_payload_bits)
}

/// Duration of a DATA frame carrying `bits` over `streams` streams at
/// `stream_rate_bps` each.
pub fn data_duration(phy: &PhyParams, bits: u64, stream_rate_bps: f64, streams: u32) -> Nanos {
    phy.phy_header + ceil_ns(bits as f64, stream_rate_bps * f64::from(streams))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameKind {
    Rts,
    /// Extended RTS announcing OFDMA subchannels or an uplink group.
    RtsPrime,
    Cts,
    Data,
    Ack,
    Announce,
    Ndp,
    Report,
}

impl FrameKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FrameKind::Rts => "RTS",
            FrameKind::RtsPrime => "RTS'",
            FrameKind::Cts => "CTS",
            FrameKind::Data => "DATA",
            FrameKind::Ack => "ACK",
            FrameKind::Announce => "NDPA",
            FrameKind::Ndp => "NDP",
            FrameKind::Report => "REPORT",
        }
    }

    pub fn is_control(&self) -> bool {
        !matches!(self, FrameKind::Data | FrameKind::Ack)
    }
}

/// Payload handed to one receiver by a DATA frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Delivery {
    pub rx: usize,
    pub mpdus: u32,
    pub payload_bits: u64,
}

/// One frame of a phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseTx {
    pub kind: FrameKind,
    pub tx: usize,
    pub receivers: Vec<usize>,
    pub channels: ChannelMask,
    pub duration: Nanos,
    pub bits: u64,
    pub deliveries: Vec<Delivery>,
}

/// Frames that start together. Frames of one phase do not interfere with
/// each other.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub txs: Vec<PhaseTx>,
}

impl Phase {
    pub fn single(tx: PhaseTx) -> Self {
        Self { txs: vec![tx] }
    }

    pub fn duration(&self) -> Nanos {
        self.txs.iter().map(|t| t.duration).max().unwrap_or(0)
    }

    pub fn is_control(&self) -> bool {
        self.txs.iter().all(|t| t.kind.is_control())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExchangeKind {
    Single,
    StrPair,
    Ofdma,
    DlMumimo,
    UlMumimo,
}

impl ExchangeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExchangeKind::Single => "single",
            ExchangeKind::StrPair => "str-pair",
            ExchangeKind::Ofdma => "ofdma",
            ExchangeKind::DlMumimo => "dl-mumimo",
            ExchangeKind::UlMumimo => "ul-mumimo",
        }
    }
}

/// A complete frame exchange, from the first frame after backoff to the
/// last ACK.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameExchange {
    pub kind: ExchangeKind,
    pub initiator: usize,
    /// Full-duplex partner that shares the exchange as a second initiator.
    pub joint_peer: Option<usize>,
    /// Channels the exchange occupies; transmit power is split over them.
    pub width: ChannelMask,
    pub phases: Vec<Phase>,
}

impl FrameExchange {
    /// Phase durations plus one SIFS between consecutive phases.
    pub fn airtime(&self, sifs: Nanos) -> Nanos {
        let phases: Nanos = self.phases.iter().map(Phase::duration).sum();
        phases + sifs * (self.phases.len().saturating_sub(1) as Nanos)
    }

    pub fn payload_bits(&self) -> u64 {
        self.deliveries().map(|(_, d)| d.payload_bits).sum()
    }

    /// Every delivery with its transmitter.
    pub fn deliveries(&self) -> impl Iterator<Item = (usize, &Delivery)> {
        self.phases
            .iter()
            .flat_map(|p| p.txs.iter())
            .flat_map(|t| t.deliveries.iter().map(move |d| (t.tx, d)))
    }

    /// Nodes that transmit or receive in the exchange, sorted.
    pub fn participants(&self) -> Vec<usize> {
        let mut set = BTreeSet::new();
        for t in self.phases.iter().flat_map(|p| p.txs.iter()) {
            set.insert(t.tx);
            set.extend(t.receivers.iter().copied());
        }
        set.into_iter().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmptyQueue;

impl fmt::Display for EmptyQueue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("transmit queue is empty")
    }
}

impl core::error::Error for EmptyQueue {}

/// Per-node FIFO of MPDUs keyed by destination, or an endless supply for
/// saturated nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct TxQueue {
    saturated: bool,
    dests: Vec<usize>,
    rr: usize,
    fifo: VecDeque<usize>,
    capacity: usize,
    /// Peers whose DATA we received and whose ACK rides on our next DATA.
    pub piggyback_pending: BTreeSet<usize>,
}

impl TxQueue {
    /// `dests` are the possible destinations in service order.
    pub fn new(saturated: bool, dests: Vec<usize>, capacity: usize) -> Self {
        Self {
            saturated,
            dests,
            rr: 0,
            fifo: VecDeque::new(),
            capacity,
            piggyback_pending: BTreeSet::new(),
        }
    }

    pub fn is_saturated(&self) -> bool {
        self.saturated
    }

    pub fn is_empty(&self) -> bool {
        !self.saturated && self.fifo.is_empty() || self.dests.is_empty()
    }

    pub fn len(&self) -> usize {
        if self.saturated {
            usize::MAX
        } else {
            self.fifo.len()
        }
    }

    /// Enqueues one MPDU for the next destination in round-robin order.
    /// Returns `false` if the queue is full.
    pub fn push_arrival(&mut self) -> bool {
        if self.saturated || self.dests.is_empty() || self.fifo.len() >= self.capacity {
            return false;
        }
        let d = self.dests[self.rr % self.dests.len()];
        self.rr = (self.rr + 1) % self.dests.len();
        self.fifo.push_back(d);
        true
    }

    pub fn backlog_for(&self, dest: usize) -> u32 {
        if !self.dests.contains(&dest) {
            return 0;
        }
        if self.saturated {
            return u32::MAX;
        }
        self.fifo.iter().filter(|&&d| d == dest).count().min(u32::MAX as usize) as u32
    }

    /// Destination of the next TXOP.
    pub fn next_dest(&self) -> Option<usize> {
        if self.dests.is_empty() {
            return None;
        }
        if self.saturated {
            Some(self.dests[self.rr % self.dests.len()])
        } else {
            self.fifo.front().copied()
        }
    }

    /// Destinations with queued traffic, in service order starting from the
    /// round-robin cursor.
    pub fn candidates(&self) -> Vec<usize> {
        let n = self.dests.len();
        (0..n)
            .map(|k| self.dests[(self.rr + k) % n])
            .filter(|&d| self.backlog_for(d) > 0)
            .collect()
    }

    /// Moves the saturated round-robin cursor past `dest`.
    pub fn served(&mut self, dest: usize) {
        if self.saturated {
            if let Some(i) = self.dests.iter().position(|&d| d == dest) {
                self.rr = (i + 1) % self.dests.len();
            }
        }
    }

    /// Removes up to `n` MPDUs for `dest`; returns how many were removed.
    pub fn consume(&mut self, dest: usize, n: u32) -> u32 {
        if self.saturated {
            return n;
        }
        let mut removed = 0;
        self.fifo.retain(|&d| {
            if d == dest && removed < n {
                removed += 1;
                false
            } else {
                true
            }
        });
        removed
    }
}

/// Single-user TXOP parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TxopSpec {
    pub initiator: usize,
    pub dest: usize,
    pub mpdus: u32,
    pub width: ChannelMask,
    pub streams: u32,
    /// Extra DATA bits (a piggybacked ACK).
    pub extra_bits: u32,
    /// Leave out the ACK phase because the ACK rides on reverse DATA.
    pub omit_ack: bool,
}

fn ctrl(phy: &PhyParams, kind: FrameKind, tx: usize, rx: Vec<usize>, ch: ChannelMask, bits: u32) -> PhaseTx {
    PhaseTx {
        kind,
        tx,
        receivers: rx,
        channels: ch,
        duration: control_duration(phy, bits),
        bits: u64::from(bits),
        deliveries: Vec::new(),
    }
}

fn data(phy: &PhyParams, tx: usize, rx: usize, mpdus: u32, ch: ChannelMask, streams: u32, extra: u32) -> PhaseTx {
    let bits = aggregate_bits(phy, mpdus) + u64::from(extra);
    PhaseTx {
        kind: FrameKind::Data,
        tx,
        receivers: vec![rx],
        channels: ch,
        duration: data_duration(phy, bits, stream_rate(phy, ch), streams),
        bits,
        deliveries: vec![Delivery {
            rx,
            mpdus,
            payload_bits: u64::from(mpdus) * u64::from(phy.mpdu_payload_bits),
        }],
    }
}

/// RTS, CTS, one aggregated DATA frame and a block ACK.
pub fn build_txop(spec: &TxopSpec, queue: &TxQueue, phy: &PhyParams) -> Result<FrameExchange, EmptyQueue> {
    let backlog = queue.backlog_for(spec.dest);
    if backlog == 0 || spec.mpdus == 0 {
        return Err(EmptyQueue);
    }
    let mpdus = spec.mpdus.min(backlog);
    let (a, b, w) = (spec.initiator, spec.dest, spec.width);
    let mut phases = vec![
        Phase::single(ctrl(phy, FrameKind::Rts, a, vec![b], w, phy.rts_bits)),
        Phase::single(ctrl(phy, FrameKind::Cts, b, vec![a], w, phy.cts_bits)),
        Phase::single(data(phy, a, b, mpdus, w, spec.streams, spec.extra_bits)),
    ];
    if !spec.omit_ack {
        phases.push(Phase::single(ctrl(phy, FrameKind::Ack, b, vec![a], w, phy.ack_bits)));
    }
    Ok(FrameExchange {
        kind: ExchangeKind::Single,
        initiator: a,
        joint_peer: None,
        width: w,
        phases,
    })
}

/// Full-duplex exchange: RTS, CTS, both DATA frames at once, then the two
/// ACKs one after the other.
pub fn build_str_pair(
    a: &TxopSpec,
    b_mpdus: u32,
    phy: &PhyParams,
) -> FrameExchange {
    let (x, y, w) = (a.initiator, a.dest, a.width);
    FrameExchange {
        kind: ExchangeKind::StrPair,
        initiator: x,
        joint_peer: Some(y),
        width: w,
        phases: vec![
            Phase::single(ctrl(phy, FrameKind::Rts, x, vec![y], w, phy.rts_bits)),
            Phase::single(ctrl(phy, FrameKind::Cts, y, vec![x], w, phy.cts_bits)),
            Phase {
                txs: vec![
                    data(phy, x, y, a.mpdus, w, a.streams, 0),
                    data(phy, y, x, b_mpdus, w, a.streams, 0),
                ],
            },
            Phase::single(ctrl(phy, FrameKind::Ack, y, vec![x], w, phy.ack_bits)),
            Phase::single(ctrl(phy, FrameKind::Ack, x, vec![y], w, phy.ack_bits)),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::NS_PER_US;

    fn phy() -> PhyParams {
        PhyParams::default()
    }

    fn spec(mpdus: u32) -> TxopSpec {
        TxopSpec {
            initiator: 0,
            dest: 1,
            mpdus,
            width: ChannelMask::single(0),
            streams: 1,
            extra_bits: 0,
            omit_ack: false,
        }
    }

    fn saturated() -> TxQueue {
        TxQueue::new(true, vec![1], 0)
    }

    #[test]
    fn ca_stage_windows() {
        let p = phy();
        let mut r = RandomStream::new(1, "n", "backoff");
        for stage in [0u32, 2, 10] {
            let mut s = BackoffState {
                stage,
                ..Default::default()
            };
            let cw = [16, 64, 1024][[0u32, 2, 10].iter().position(|&x| x == stage).unwrap()];
            assert_eq!(s.cw(&p), cw);
            for _ in 0..2000 {
                assert!(sample_backoff(&mut s, AccessProtocol::CsmaCa, &p, &mut r) < cw);
            }
        }
    }

    #[test]
    fn eca_success_is_deterministic() {
        let p = phy();
        let mut r = RandomStream::new(1, "n", "backoff");
        let mut s = BackoffState::default();
        s.on_outcome(Outcome::Success, false, AccessProtocol::CsmaEca, &p, &mut r);
        assert_eq!((s.counter, s.mode), (7, BackoffMode::Deterministic));
        s.on_outcome(Outcome::Success, false, AccessProtocol::CsmaEca, &p, &mut r);
        assert_eq!(s.counter, 7);
        s.on_outcome(Outcome::Collision, false, AccessProtocol::CsmaEca, &p, &mut r);
        assert_eq!((s.stage, s.mode), (1, BackoffMode::Random));
        assert!(s.counter < 32);
    }

    #[test]
    fn drop_resets_stage() {
        let p = phy();
        let mut r = RandomStream::new(1, "n", "backoff");
        let mut s = BackoffState {
            stage: 6,
            ..Default::default()
        };
        s.on_outcome(Outcome::Collision, true, AccessProtocol::CsmaCa, &p, &mut r);
        assert_eq!(s.stage, 0);
    }

    #[test]
    fn step_slot_examples() {
        let mut s = BackoffState {
            counter: 1,
            ..Default::default()
        };
        assert_eq!(step_slot(&mut s, false), SlotAction::Transmit);
        let mut s = BackoffState {
            counter: 5,
            ..Default::default()
        };
        assert_eq!(step_slot(&mut s, true), SlotAction::Freeze);
        assert_eq!(s.counter, 5);
        assert_eq!(step_slot(&mut s, false), SlotAction::Decrement);
        assert_eq!(s.counter, 4);
    }

    #[test]
    fn event_countdown_matches_slot_stepping() {
        let mut r = RandomStream::new(9, "n", "pattern");
        let slot = 9 * NS_PER_US;
        for _ in 0..500 {
            let counter = r.uniform(40).unwrap() as u32 + 1;
            let busy_at = r.uniform(60).unwrap() as u32;
            let mut s = BackoffState {
                counter,
                ..Default::default()
            };
            let mut transmitted_at = None;
            for k in 0..60u32 {
                if k == busy_at {
                    assert_eq!(step_slot(&mut s, true), SlotAction::Freeze);
                    break;
                }
                if step_slot(&mut s, false) == SlotAction::Transmit {
                    transmitted_at = Some(k + 1);
                    break;
                }
            }
            let t0 = 1_000;
            let tb = t0 + u64::from(busy_at) * slot;
            if let Some(k) = transmitted_at {
                assert_eq!(expiry_time(t0, counter, slot), t0 + u64::from(k) * slot);
                assert!(expiry_time(t0, counter, slot) <= tb);
            } else {
                assert_eq!(counter - elapsed_slots(t0, tb, slot), s.counter);
            }
        }
    }

    #[test]
    fn lone_node_slot_occupancy() {
        // Fraction of backoff slots that end in a transmission for a lone
        // saturated node: 1 / (E[counter] + 1) = 2 / (cw_min + 1).
        let p = phy();
        let mut r = RandomStream::new(5, "n", "backoff");
        let mut s = BackoffState::default();
        let (mut slots, mut tx) = (0u64, 0u64);
        s.counter = sample_backoff(&mut s, AccessProtocol::CsmaCa, &p, &mut r);
        while slots < 1_000_000 {
            slots += 1;
            // A counter of c spans c idle slots plus the slot carrying the frame.
            if s.counter == 0 {
                tx += 1;
                s.on_outcome(Outcome::Success, false, AccessProtocol::CsmaCa, &p, &mut r);
            } else {
                step_slot(&mut s, false);
            }
        }
        let tau = tx as f64 / slots as f64;
        let expected = 2.0 / 17.0;
        assert!((tau - expected).abs() / expected < 0.05, "tau {tau}");
    }

    #[test]
    fn data_duration_hand_value() {
        let p = phy();
        let ex = build_txop(&spec(1), &saturated(), &p).unwrap();
        let d = ex.phases[2].duration();
        // 40 us + 12288 bits / 65 Mb/s
        assert_eq!(d, 40_000 + 189_047);
        assert_eq!(ex.phases[0].duration(), 40_000 + 6_667);
        assert_eq!(ex.phases[1].duration(), 40_000 + 4_667);
    }

    #[test]
    fn airtime_is_sum_of_phases_and_sifs() {
        let p = phy();
        let ex = build_txop(&spec(8), &saturated(), &p).unwrap();
        let sum: Nanos = ex.phases.iter().map(Phase::duration).sum();
        assert_eq!(ex.airtime(p.sifs), sum + 3 * p.sifs);
    }

    #[test]
    fn aggregation_beats_single_mpdu_txops() {
        let p = phy();
        let per_txop = |mpdus| {
            build_txop(&spec(mpdus), &saturated(), &p).unwrap().airtime(p.sifs) + p.difs
        };
        assert!(per_txop(64) < 64 * per_txop(1));
    }

    #[test]
    fn piggyback_removes_ack_phase() {
        let p = phy();
        let base = build_txop(&spec(4), &saturated(), &p).unwrap();
        let pb = build_txop(
            &TxopSpec {
                omit_ack: true,
                extra_bits: p.ack_bits,
                ..spec(4)
            },
            &saturated(),
            &p,
        )
        .unwrap();
        assert_eq!(pb.phases.len() + 1, base.phases.len());
        assert!(pb.airtime(p.sifs) < base.airtime(p.sifs));
    }

    #[test]
    fn empty_queue_rejected() {
        let q = TxQueue::new(false, vec![1], 10);
        assert_eq!(build_txop(&spec(1), &q, &phy()), Err(EmptyQueue));
    }

    #[test]
    fn queue_round_robin_and_consume() {
        let mut q = TxQueue::new(false, vec![3, 4], 3);
        assert!(q.push_arrival() && q.push_arrival() && q.push_arrival());
        assert!(!q.push_arrival());
        assert_eq!((q.backlog_for(3), q.backlog_for(4)), (2, 1));
        assert_eq!(q.next_dest(), Some(3));
        assert_eq!(q.consume(3, 5), 2);
        assert_eq!(q.next_dest(), Some(4));
    }

    #[test]
    fn str_pair_shape() {
        let p = phy();
        let ex = build_str_pair(&spec(2), 3, &p);
        assert_eq!(ex.phases.len(), 5);
        assert_eq!(ex.phases[2].txs.len(), 2);
        assert_eq!(ex.payload_bits(), 5 * 12_000);
        assert_eq!(ex.joint_peer, Some(1));
    }
}
