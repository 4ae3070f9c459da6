//! Event-driven execution of a scenario.
//!
//! Backoff countdowns are not stepped slot by slot. A node that starts
//! counting at `t0` schedules its expiry at `t0 + counter * slot`; when the
//! medium turns busy first, the completed slots are subtracted and the node
//! freezes. A frozen node owes one extra decrement for the busy period, taken
//! when it next completes a DIFS.
//!
//! Nodes whose backoff expires at the same instant are collected into one
//! batch. The batch builds every exchange (including the bandwidth
//! assessment) before any of them starts, so the outcome does not depend on
//! the order in which same-time events fire.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::channel::{
    cca_assess, dbca_assess, dbm_to_mw, resolve_reception, split_power, ChannelError, ChannelMask, ChannelSet,
    LinkTable, RadioParams, ReceiverView, Reception, Transmission,
};
use crate::engine::{EventHandle, EventKind, RandomStream, ScheduleError, Scheduler};
use crate::mac::{
    build_str_pair, build_txop, control_duration, elapsed_slots, expiry_time, BackoffMode, BackoffState, Delivery,
    ExchangeKind, FrameExchange, FrameKind, Outcome, TxQueue, TxopSpec,
};
use crate::metrics::{reduce, MetricsRaw, NodeMetrics, Report};
use crate::multiuser::{
    build_dl_mumimo, build_ofdma_exchange, build_ul_mumimo, ofdma_allocate, select_group, CsiRecord, OfdmaCursor,
};
use crate::scenario::{validate, AccessProtocol, PhyParams, ProtocolConfig, Scenario, Traffic, Violation};
use crate::Nanos;

/// Queue limit for offered-load nodes, in MPDUs.
pub const QUEUE_CAPACITY: usize = 10_000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimOptions {
    /// Record every exchange and frame.
    pub trace: bool,
    /// Process same-time batches in descending node order. Results must not
    /// change; used to check order independence.
    pub reverse_batch_order: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceEvent {
    ExchangeStart {
        exchange: u64,
        kind: ExchangeKind,
        initiator: usize,
        peer: Option<usize>,
        channels: ChannelMask,
    },
    Frame {
        exchange: u64,
        kind: FrameKind,
        tx: usize,
        receivers: Vec<usize>,
        channels: ChannelMask,
        bits: u64,
        end: Nanos,
    },
    ExchangeEnd {
        exchange: u64,
        initiator: usize,
        success: bool,
        delivered_bits: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub time: Nanos,
    pub event: TraceEvent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub raw: MetricsRaw,
    pub report: Report,
    pub trace: Vec<TraceRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimError {
    InvalidScenario(Vec<Violation>),
    Channel(ChannelError),
    Schedule(ScheduleError),
    Invariant(String),
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::InvalidScenario(v) => {
                f.write_str("invalid scenario")?;
                for x in v {
                    write!(f, "\n  {x}")?;
                }
                Ok(())
            }
            SimError::Channel(e) => write!(f, "channel model error: {e}"),
            SimError::Schedule(e) => write!(f, "scheduler error: {e}"),
            SimError::Invariant(m) => write!(f, "invariant violated: {m}"),
        }
    }
}

impl core::error::Error for SimError {}

impl From<ChannelError> for SimError {
    fn from(e: ChannelError) -> Self {
        SimError::Channel(e)
    }
}

impl From<ScheduleError> for SimError {
    fn from(e: ScheduleError) -> Self {
        SimError::Schedule(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Ev {
    Resume,
    Expiry,
    StartBatch,
    PhaseStart(u64),
    PhaseEnd(u64),
    ExchangeEnd(u64),
    Arrival,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Mac {
    /// Nothing to send.
    Idle,
    /// Waiting for a DIFS of idle medium.
    Deferring { resume_at: Nanos, handle: EventHandle },
    Counting { t0: Nanos, handle: EventHandle },
    Frozen,
    /// Backoff expired; waiting for the batch at this instant.
    Starting,
    Engaged(u64),
}

struct NodeSt {
    id: String,
    wlan: usize,
    is_ap: bool,
    ap: usize,
    radio: RadioParams,
    antennas: u32,
    configured: ChannelSet,
    sensed: ChannelMask,
    queue: TxQueue,
    backoff: BackoffState,
    retries: u32,
    pending_decrement: bool,
    mac: Mac,
    medium_busy: bool,
    ch_busy: ChannelMask,
    busy_since: Vec<Nanos>,
    idle_since: Vec<Nanos>,
    rng_backoff: RandomStream,
    rng_traffic: RandomStream,
    /// Mean MPDU inter-arrival time in ns for offered-load nodes.
    arrival_mean: Option<f64>,
    signature: Vec<f64>,
    // AP-only state.
    ofdma_cursor: OfdmaCursor,
    next_ul: bool,
    ul_rr: usize,
    /// Last buffer report per station: (backlog, time).
    bsr: BTreeMap<usize, (u32, Nanos)>,
    csi_time: BTreeMap<usize, Nanos>,
}

struct Running {
    ex: FrameExchange,
    start: Nanos,
    phase: usize,
    frames: Vec<u64>,
    delivered: Vec<(usize, Delivery)>,
    failed: bool,
    responders: Vec<usize>,
    /// Piggybacked ACK owed by `dest` to the initiator on success.
    piggyback_owed: Option<(usize, usize)>,
    /// Owed ACK the initiator settles with this exchange.
    piggyback_settles: Option<(usize, usize)>,
}

struct World<'a> {
    phy: PhyParams,
    proto: ProtocolConfig,
    opts: SimOptions,
    scn: &'a Scenario,
    nodes: Vec<NodeSt>,
    links: LinkTable,
    sched: Scheduler<Ev>,
    air: Vec<Transmission>,
    next_frame: u64,
    next_group: u64,
    next_exchange: u64,
    running: BTreeMap<u64, Running>,
    batch: Vec<usize>,
    batch_handle: Option<EventHandle>,
    holders: u64,
    last_medium: Nanos,
    w0: Nanos,
    w1: Nanos,
    metrics: Vec<NodeMetrics>,
    raw_medium: crate::metrics::MediumMetrics,
    trace: Vec<TraceRecord>,
}

/// Runs `scenario` for its configured duration using its seed.
pub fn run(scenario: &Scenario, opts: &SimOptions) -> Result<SimOutput, SimError> {
    let violations = validate(scenario);
    if !violations.is_empty() {
        return Err(SimError::InvalidScenario(violations));
    }
    let mut w = World::new(scenario, *opts)?;
    w.execute()?;
    w.finish()
}

fn kind_of(ev: &Ev) -> EventKind {
    match ev {
        Ev::Resume | Ev::Expiry => EventKind::SlotBoundary,
        Ev::StartBatch | Ev::PhaseStart(_) => EventKind::TxStart,
        Ev::PhaseEnd(_) => EventKind::TxEnd,
        Ev::ExchangeEnd(_) => EventKind::TimerExpiry,
        Ev::Arrival => EventKind::TrafficArrival,
    }
}

fn unit_signature(rng: &mut RandomStream, dim: u32) -> Vec<f64> {
    let v: Vec<f64> = (0..dim.max(1)).map(|_| rng.normal()).collect();
    let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if norm > 0.0 {
        v.iter().map(|x| x / norm).collect()
    } else {
        let mut e = vec![0.0; v.len()];
        e[0] = 1.0;
        e
    }
}

impl<'a> World<'a> {
    fn new(scn: &'a Scenario, opts: SimOptions) -> Result<Self, SimError> {
        let phy = scn.phy;
        let proto = scn.protocol;
        let mut nodes = Vec::with_capacity(scn.node_count());
        let mut positions = Vec::new();
        let mut radios = Vec::new();
        let mut base = 0usize;
        for (wi, wlan) in scn.wlans.iter().enumerate() {
            let set = wlan
                .channel_set()
                .map_err(|e| SimError::Invariant(format!("{}: {e}", wlan.id)))?;
            let ap_antennas = wlan.ap.antennas;
            let n_here = 1 + wlan.stas.len();
            for (k, n) in wlan.nodes().enumerate() {
                let is_ap = k == 0;
                let dests: Vec<usize> = if is_ap {
                    (base + 1..base + n_here).collect()
                } else {
                    vec![base]
                };
                let saturated = n.traffic == Traffic::Saturated;
                let arrival_mean = match n.traffic {
                    Traffic::OfferedLoad(r) if r > 0.0 => Some(f64::from(phy.mpdu_payload_bits) / r * 1e9),
                    _ => None,
                };
                let mut sig_rng = RandomStream::new(scn.seed, &n.id, "signature");
                nodes.push(NodeSt {
                    id: n.id.clone(),
                    wlan: wi,
                    is_ap,
                    ap: base,
                    radio: n.radio,
                    antennas: n.antennas,
                    configured: set,
                    sensed: if proto.dbca {
                        ChannelMask::single(set.primary())
                    } else {
                        set.mask()
                    },
                    queue: TxQueue::new(saturated, dests, QUEUE_CAPACITY),
                    backoff: BackoffState::default(),
                    retries: 0,
                    pending_decrement: false,
                    mac: Mac::Idle,
                    medium_busy: false,
                    ch_busy: ChannelMask::EMPTY,
                    busy_since: vec![0; 64],
                    idle_since: vec![0; 64],
                    rng_backoff: RandomStream::new(scn.seed, &n.id, "backoff"),
                    rng_traffic: RandomStream::new(scn.seed, &n.id, "traffic"),
                    arrival_mean,
                    signature: unit_signature(&mut sig_rng, ap_antennas),
                    ofdma_cursor: OfdmaCursor::default(),
                    next_ul: false,
                    ul_rr: 0,
                    bsr: BTreeMap::new(),
                    csi_time: BTreeMap::new(),
                });
                positions.push(n.position);
                radios.push(n.radio);
            }
            base += n_here;
        }
        let links = LinkTable::build(&positions, &radios, &phy.propagation)?;
        let w1 = scn.duration;
        let w0 = libm::floor(w1 as f64 * proto.warmup_fraction) as Nanos;
        let n = nodes.len();
        let mut w = World {
            phy,
            proto,
            opts,
            scn,
            nodes,
            links,
            sched: Scheduler::new(),
            air: Vec::new(),
            next_frame: 0,
            next_group: 0,
            next_exchange: 0,
            running: BTreeMap::new(),
            batch: Vec::new(),
            batch_handle: None,
            holders: 0,
            last_medium: 0,
            w0,
            w1,
            metrics: vec![NodeMetrics::default(); n],
            raw_medium: Default::default(),
            trace: Vec::new(),
        };
        for i in 0..n {
            let nd = &mut w.nodes[i];
            nd.backoff.counter =
                crate::mac::sample_backoff(&mut nd.backoff, proto.protocol, &phy, &mut nd.rng_backoff);
            if let Some(mean) = nd.arrival_mean {
                let dt = libm::ceil(nd.rng_traffic.exponential(mean)) as Nanos;
                w.at(dt, i, Ev::Arrival)?;
            }
            w.contend(i, 0, true)?;
        }
        Ok(w)
    }

    fn at(&mut self, t: Nanos, node: usize, ev: Ev) -> Result<EventHandle, SimError> {
        Ok(self.sched.schedule(t, kind_of(&ev), node, ev)?)
    }

    fn execute(&mut self) -> Result<(), SimError> {
        while let Some(e) = self.sched.pop_until(self.w1) {
            let t = e.time;
            let n = e.subject;
            match e.payload {
                Ev::Resume => {
                    if let Mac::Deferring { resume_at, .. } = self.nodes[n].mac {
                        debug_assert_eq!(resume_at, t);
                        self.resume(n, t)?;
                    }
                }
                Ev::Expiry => {
                    if let Mac::Counting { .. } = self.nodes[n].mac {
                        self.nodes[n].backoff.counter = 0;
                        self.add_to_batch(n, t)?;
                    }
                }
                Ev::StartBatch => self.start_batch(t)?,
                Ev::PhaseStart(id) => {
                    self.start_phase(id, t)?;
                    self.refresh_cca(t)?;
                }
                Ev::PhaseEnd(id) => self.phase_end(id, t)?,
                Ev::ExchangeEnd(id) => self.exchange_end(id, t)?,
                Ev::Arrival => self.arrival(n, t)?,
            }
        }
        Ok(())
    }

    // ---- contention -------------------------------------------------------

    fn wants_access(&self, n: usize, t: Nanos) -> bool {
        !self.nodes[n].queue.is_empty() || (self.nodes[n].is_ap && !self.ul_candidates(n, t).is_empty())
    }

    /// Enters contention with the current counter, or goes idle.
    fn contend(&mut self, n: usize, t: Nanos, fresh: bool) -> Result<(), SimError> {
        if !self.wants_access(n, t) {
            self.nodes[n].mac = Mac::Idle;
            return Ok(());
        }
        if fresh {
            self.nodes[n].pending_decrement = false;
        }
        if self.nodes[n].medium_busy {
            self.nodes[n].mac = Mac::Frozen;
            self.nodes[n].pending_decrement = true;
        } else {
            let resume_at = t + self.phy.difs;
            let handle = self.at(resume_at, n, Ev::Resume)?;
            self.nodes[n].mac = Mac::Deferring { resume_at, handle };
        }
        Ok(())
    }

    fn resume(&mut self, n: usize, t: Nanos) -> Result<(), SimError> {
        let nd = &mut self.nodes[n];
        if nd.pending_decrement {
            nd.backoff.counter = nd.backoff.counter.saturating_sub(1);
            nd.pending_decrement = false;
        }
        if nd.backoff.counter == 0 {
            return self.add_to_batch(n, t);
        }
        if nd.medium_busy {
            nd.mac = Mac::Frozen;
            nd.pending_decrement = true;
            return Ok(());
        }
        let counter = nd.backoff.counter;
        let handle = self.at(expiry_time(t, counter, self.phy.slot), n, Ev::Expiry)?;
        self.nodes[n].mac = Mac::Counting { t0: t, handle };
        Ok(())
    }

    fn add_to_batch(&mut self, n: usize, t: Nanos) -> Result<(), SimError> {
        self.nodes[n].mac = Mac::Starting;
        self.batch.push(n);
        if self.batch_handle.is_none() {
            self.batch_handle = Some(self.at(t, 0, Ev::StartBatch)?);
        }
        Ok(())
    }

    /// Medium turned busy for a contending node.
    fn on_busy(&mut self, n: usize, t: Nanos) -> Result<(), SimError> {
        match self.nodes[n].mac {
            Mac::Deferring { resume_at, handle } => {
                self.sched.cancel(handle);
                if resume_at == t {
                    self.resume(n, t)?;
                } else {
                    self.nodes[n].mac = Mac::Frozen;
                    self.nodes[n].pending_decrement = true;
                }
            }
            Mac::Counting { t0, handle } => {
                self.sched.cancel(handle);
                let slot = self.phy.slot;
                let nd = &mut self.nodes[n];
                if expiry_time(t0, nd.backoff.counter, slot) == t {
                    nd.backoff.counter = 0;
                    self.add_to_batch(n, t)?;
                } else {
                    nd.backoff.counter -= elapsed_slots(t0, t, slot);
                    nd.mac = Mac::Frozen;
                    nd.pending_decrement = true;
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn on_idle(&mut self, n: usize, t: Nanos) -> Result<(), SimError> {
        if self.nodes[n].mac == Mac::Frozen {
            let resume_at = t + self.phy.difs;
            let handle = self.at(resume_at, n, Ev::Resume)?;
            self.nodes[n].mac = Mac::Deferring { resume_at, handle };
        }
        Ok(())
    }

    /// Re-evaluates carrier sense for every node after the set of frames on
    /// the air changed at `t`.
    fn refresh_cca(&mut self, t: Nanos) -> Result<(), SimError> {
        for n in 0..self.nodes.len() {
            let nd = &self.nodes[n];
            let v = cca_assess(n, &nd.radio, t, &self.air, &self.links, nd.configured.mask(), nd.sensed);
            let nd = &mut self.nodes[n];
            for ch in nd.configured.channels() {
                let (was, now) = (nd.ch_busy.contains(ch), v.busy.contains(ch));
                if now && !was {
                    nd.busy_since[ch as usize] = t;
                } else if was && !now {
                    nd.idle_since[ch as usize] = t;
                }
            }
            nd.ch_busy = v.busy;
            let busy = v.overall_busy();
            if busy != nd.medium_busy {
                nd.medium_busy = busy;
                if busy {
                    self.on_busy(n, t)?;
                } else {
                    self.on_idle(n, t)?;
                }
            }
        }
        Ok(())
    }

    /// Channels idle for `n` over the assessment window ending at `t`.
    fn idle_window(&self, n: usize, t: Nanos) -> ChannelMask {
        let nd = &self.nodes[n];
        let win = self.phy.slot + self.phy.sifs;
        nd.configured
            .channels()
            .filter(|&c| {
                let busy_before = nd.ch_busy.contains(c) && nd.busy_since[c as usize] < t;
                !busy_before && nd.idle_since[c as usize] + win <= t
            })
            .fold(ChannelMask::EMPTY, |m, c| m.union(ChannelMask::single(c)))
    }

    fn arrival(&mut self, n: usize, t: Nanos) -> Result<(), SimError> {
        let in_window = t > self.w0 && t <= self.w1;
        let nd = &mut self.nodes[n];
        if nd.queue.push_arrival() && in_window {
            self.metrics[n].offered_bits += u64::from(self.phy.mpdu_payload_bits);
        }
        if let Some(mean) = nd.arrival_mean {
            let dt = libm::ceil(nd.rng_traffic.exponential(mean)).max(1.0) as Nanos;
            self.at(t + dt, n, Ev::Arrival)?;
        }
        if self.nodes[n].mac == Mac::Idle {
            self.contend(n, t, true)?;
        }
        Ok(())
    }

    // ---- exchange construction --------------------------------------------

    fn start_batch(&mut self, t: Nanos) -> Result<(), SimError> {
        self.batch_handle = None;
        // Anyone else due at this instant joins, whatever fired first.
        for n in 0..self.nodes.len() {
            match self.nodes[n].mac {
                Mac::Deferring { resume_at, handle } if resume_at == t => {
                    self.sched.cancel(handle);
                    self.resume(n, t)?;
                }
                Mac::Counting { t0, handle } if expiry_time(t0, self.nodes[n].backoff.counter, self.phy.slot) == t => {
                    self.sched.cancel(handle);
                    self.nodes[n].backoff.counter = 0;
                    self.add_to_batch(n, t)?;
                }
                _ => {}
            }
        }
        if let Some(h) = self.batch_handle.take() {
            self.sched.cancel(h);
        }
        let mut batch = core::mem::take(&mut self.batch);
        batch.sort_unstable();
        batch.dedup();
        if self.opts.reverse_batch_order {
            batch.reverse();
        }
        let mut taken = vec![false; self.nodes.len()];
        let mut built = Vec::new();
        for &n in &batch {
            if taken[n] {
                continue;
            }
            taken[n] = true;
            match self.build_for(n, t, &batch, &mut taken)? {
                Some(b) => built.push(b),
                None => {
                    let nd = &mut self.nodes[n];
                    nd.backoff.on_outcome(Outcome::None, false, self.proto.protocol, &self.phy, &mut nd.rng_backoff);
                    self.contend(n, t, true)?;
                }
            }
        }
        built.sort_by_key(|b: &Built| b.ex.initiator);
        for b in built {
            self.start_exchange(b, t)?;
        }
        self.refresh_cca(t)
    }

    fn streams(&self, a: usize, b: usize) -> u32 {
        self.nodes[a].antennas.min(self.nodes[b].antennas)
    }

    fn agg(&self) -> u32 {
        self.proto.aggregation.min(self.phy.max_aggregation)
    }

    fn ul_candidates(&self, ap: usize, t: Nanos) -> Vec<usize> {
        if !self.proto.ul_mumimo {
            return Vec::new();
        }
        self.nodes[ap]
            .bsr
            .iter()
            .filter(|&(&s, &(backlog, at))| {
                backlog > 0
                    && t.saturating_sub(at) <= self.proto.buffer_staleness
                    && !matches!(self.nodes[s].mac, Mac::Engaged(_) | Mac::Starting)
            })
            .map(|(&s, _)| s)
            .collect()
    }

    fn csi(&self, ap: usize, s: usize) -> CsiRecord {
        let nd = &self.nodes[ap];
        let p = split_power(nd.radio.tx_power_dbm, u32::from(nd.configured.len())) + self.links.gain_db(ap, s);
        CsiRecord {
            sta: s,
            timestamp: nd.csi_time.get(&s).copied().unwrap_or(0),
            quality: dbm_to_mw(p - self.phy.propagation.noise_floor_dbm),
            signature: self.nodes[s].signature.clone(),
        }
    }

    /// Picks up to `y` stations from a rotating pool of at most `2y`.
    fn pick_group(&self, ap: usize, pool: &[usize], y: usize) -> Vec<usize> {
        let pool = &pool[..pool.len().min(2 * y)];
        let csi: Vec<CsiRecord> = pool.iter().map(|&s| self.csi(ap, s)).collect();
        select_group(&csi, y.min(pool.len())).unwrap_or_default()
    }

    fn build_for(&mut self, n: usize, t: Nanos, batch: &[usize], taken: &mut [bool]) -> Result<Option<Built>, SimError> {
        let width_set = if self.proto.dbca {
            let cfg = self.nodes[n].configured;
            dbca_assess(&cfg, self.idle_window(n, t))
                .unwrap_or_else(|_| ChannelSet::block(cfg.primary(), 1, cfg.primary()).unwrap_or(cfg))
        } else {
            self.nodes[n].configured
        };
        let width = width_set.mask();
        let agg = self.agg();
        let phy = self.phy;

        if self.nodes[n].is_ap {
            let dl = self.nodes[n].queue.candidates();
            let ul = self.ul_candidates(n, t);
            let do_ul = !ul.is_empty() && (dl.is_empty() || self.nodes[n].next_ul);
            if !ul.is_empty() && !dl.is_empty() {
                self.nodes[n].next_ul = !self.nodes[n].next_ul;
            }
            if do_ul {
                let (y, z) = match self.proto.mumimo {
                    Some(c) => (c.users as usize, c.streams_per_user),
                    None => (self.nodes[n].antennas as usize, 1),
                };
                let rr = self.nodes[n].ul_rr % ul.len();
                let pool: Vec<usize> = ul[rr..].iter().chain(ul[..rr].iter()).copied().collect();
                let group = self.pick_group(n, &pool, y);
                self.nodes[n].ul_rr = rr + group.len();
                let members: Vec<(usize, u32)> =
                    group.iter().map(|&s| (s, self.nodes[s].queue.backlog_for(n).min(agg))).collect();
                let ex = build_ul_mumimo(n, &members, z, width, &phy, self.proto.mu_rate_penalty, agg)
                    .map_err(|e| SimError::Invariant(e.to_string()))?;
                return Ok(Some(Built::plain(ex)));
            }
            if dl.is_empty() {
                return Ok(None);
            }
            if let Some(cfg) = self.proto.mumimo {
                let group = self.pick_group(n, &dl, cfg.users as usize);
                let sound = match self.proto.sounding_interval {
                    Some(iv) if group.len() > 1 => group.iter().any(|s| {
                        self.nodes[n].csi_time.get(s).map_or(true, |&ts| t.saturating_sub(ts) >= iv)
                    }),
                    _ => false,
                };
                if sound {
                    for &s in &group {
                        self.nodes[n].csi_time.insert(s, t);
                    }
                }
                let members: Vec<(usize, u32)> =
                    group.iter().map(|&s| (s, self.nodes[n].queue.backlog_for(s).min(agg))).collect();
                if let Some(&last) = dl.iter().rev().find(|s| group.contains(s)) {
                    self.nodes[n].queue.served(last);
                }
                let ex = build_dl_mumimo(n, &cfg, &members, width, &phy, self.proto.mu_rate_penalty, sound)
                    .map_err(|e| SimError::Invariant(e.to_string()))?;
                return Ok(Some(Built::plain(ex)));
            }
            if let Some(cap) = self.proto.ofdma {
                let mut cands = dl.clone();
                cands.sort_unstable();
                let mut cursor = self.nodes[n].ofdma_cursor;
                let alloc = ofdma_allocate(&width_set, cap, &cands, &mut cursor)
                    .map_err(|e| SimError::Invariant(e.to_string()))?;
                self.nodes[n].ofdma_cursor = cursor;
                let q = &self.nodes[n].queue;
                let ex = build_ofdma_exchange(n, &alloc, &|s| q.backlog_for(s).min(agg), &phy)
                    .map_err(|e| SimError::Invariant(e.to_string()))?;
                return Ok(Some(Built::plain(ex)));
            }
        }

        let Some(dest) = self.nodes[n].queue.next_dest() else {
            return Ok(None);
        };
        let mpdus = self.nodes[n].queue.backlog_for(dest).min(agg);
        let spec = TxopSpec {
            initiator: n,
            dest,
            mpdus,
            width,
            streams: self.streams(n, dest),
            extra_bits: 0,
            omit_ack: false,
        };
        let reverse = self.nodes[dest].queue.backlog_for(n).min(agg);

        // Full duplex.
        let both_str = self.proto.str_enabled && self.nodes[n].radio.str_capable && self.nodes[dest].radio.str_capable;
        if both_str && reverse > 0 {
            let peer_in_batch = batch.contains(&dest) && !taken[dest] && self.nodes[dest].queue.next_dest() == Some(n);
            let peer_free = matches!(
                self.nodes[dest].mac,
                Mac::Idle | Mac::Frozen | Mac::Deferring { .. } | Mac::Counting { .. }
            );
            let joins = peer_in_batch
                || (self.proto.protocol == AccessProtocol::CsmaEca
                    && self.nodes[n].backoff.mode == BackoffMode::Deterministic
                    && peer_free);
            if joins {
                taken[dest] = true;
                if !peer_in_batch {
                    self.detach(dest, t);
                }
                let (a, b) = if peer_in_batch && dest < n { (dest, n) } else { (n, dest) };
                let a_mpdus = self.nodes[a].queue.backlog_for(b).min(agg);
                let b_mpdus = self.nodes[b].queue.backlog_for(a).min(agg);
                let ex = build_str_pair(
                    &TxopSpec {
                        initiator: a,
                        dest: b,
                        mpdus: a_mpdus,
                        ..spec
                    },
                    b_mpdus,
                    &phy,
                );
                return Ok(Some(Built::plain(ex)));
            }
        }

        let mut spec = spec;
        let (mut owed, mut settles) = (None, None);
        if self.proto.piggyback {
            if self.nodes[n].queue.piggyback_pending.contains(&dest) {
                spec.extra_bits = phy.ack_bits;
                settles = Some((n, dest));
            }
            if reverse > 0 {
                spec.omit_ack = true;
                owed = Some((dest, n));
            }
        }
        let ex = build_txop(&spec, &self.nodes[n].queue, &phy).map_err(|e| SimError::Invariant(e.to_string()))?;
        Ok(Some(Built {
            ex,
            piggyback_owed: owed,
            piggyback_settles: settles,
        }))
    }

    /// Pulls a contending node out of its countdown to take part in an
    /// exchange it did not start.
    fn detach(&mut self, n: usize, t: Nanos) {
        let slot = self.phy.slot;
        let nd = &mut self.nodes[n];
        match nd.mac {
            Mac::Counting { t0, handle } => {
                self.sched.cancel(handle);
                let done = elapsed_slots(t0, t, slot).min(nd.backoff.counter);
                nd.backoff.counter -= done;
                nd.pending_decrement = true;
            }
            Mac::Deferring { handle, .. } => {
                self.sched.cancel(handle);
                nd.pending_decrement = true;
            }
            Mac::Frozen => nd.pending_decrement = true,
            _ => {}
        }
    }

    // ---- exchange execution -------------------------------------------------

    fn start_exchange(&mut self, b: Built, t: Nanos) -> Result<(), SimError> {
        let id = self.next_exchange;
        self.next_exchange += 1;
        let ex = b.ex;
        self.nodes[ex.initiator].mac = Mac::Engaged(id);
        if let Some(p) = ex.joint_peer {
            self.nodes[p].mac = Mac::Engaged(id);
        }
        if self.opts.trace {
            self.trace.push(TraceRecord {
                time: t,
                event: TraceEvent::ExchangeStart {
                    exchange: id,
                    kind: ex.kind,
                    initiator: ex.initiator,
                    peer: ex.joint_peer,
                    channels: ex.width,
                },
            });
        }
        self.medium_change(t, 1);
        self.running.insert(
            id,
            Running {
                ex,
                start: t,
                phase: 0,
                frames: Vec::new(),
                delivered: Vec::new(),
                failed: false,
                responders: Vec::new(),
                piggyback_owed: b.piggyback_owed,
                piggyback_settles: b.piggyback_settles,
            },
        );
        self.start_phase(id, t)
    }

    fn start_phase(&mut self, id: u64, t: Nanos) -> Result<(), SimError> {
        let group = self.next_group;
        self.next_group += 1;
        let run = self.running.get(&id).ok_or_else(|| SimError::Invariant("unknown exchange".into()))?;
        let phase = &run.ex.phases[run.phase];
        let end = t + phase.duration();
        let mut frames = Vec::with_capacity(phase.txs.len());
        for tx in &phase.txs {
            let used = phase
                .txs
                .iter()
                .filter(|o| o.tx == tx.tx)
                .fold(ChannelMask::EMPTY, |m, o| m.union(o.channels));
            let power = split_power(self.nodes[tx.tx].radio.tx_power_dbm, used.count());
            let fid = self.next_frame;
            self.next_frame += 1;
            frames.push(fid);
            self.air.push(Transmission {
                id: fid,
                tx: tx.tx,
                channels: tx.channels,
                start: t,
                end,
                power_dbm_per_channel: power,
                receivers: tx.receivers.clone(),
                group,
            });
            if self.opts.trace {
                self.trace.push(TraceRecord {
                    time: t,
                    event: TraceEvent::Frame {
                        exchange: id,
                        kind: tx.kind,
                        tx: tx.tx,
                        receivers: tx.receivers.clone(),
                        channels: tx.channels,
                        bits: tx.bits,
                        end,
                    },
                });
            }
        }
        if let Some(run) = self.running.get_mut(&id) {
            run.frames = frames;
        }
        self.at(end, 0, Ev::PhaseEnd(id))?;
        Ok(())
    }

    fn receiver_busy_elsewhere(&self, rx: usize, id: u64) -> bool {
        match self.nodes[rx].mac {
            Mac::Engaged(other) => other != id,
            Mac::Starting => true,
            _ => false,
        }
    }

    fn phase_end(&mut self, id: u64, t: Nanos) -> Result<(), SimError> {
        self.refresh_cca(t)?;
        let run = self.running.get(&id).ok_or_else(|| SimError::Invariant("unknown exchange".into()))?;
        let k = run.phase;
        let phase = run.ex.phases[k].clone();
        let frames: Vec<Transmission> = run
            .frames
            .iter()
            .filter_map(|fid| self.air.iter().find(|f| f.id == *fid).cloned())
            .collect();

        let mut ok_pairs: Vec<(usize, usize)> = Vec::new();
        let mut any_fail = false;
        for (tx, fr) in phase.txs.iter().zip(&frames) {
            for &rx in &tx.receivers {
                let view = ReceiverView {
                    node: rx,
                    radio: &self.nodes[rx].radio,
                };
                let got = resolve_reception(fr, view, &self.air, &self.links, &self.phy.propagation) == Reception::Success
                    && !(tx.kind != FrameKind::Ack && self.receiver_busy_elsewhere(rx, id));
                if got {
                    ok_pairs.push((tx.tx, rx));
                } else {
                    any_fail = true;
                }
            }
        }
        self.prune_air(t);

        let sifs = self.phy.sifs;
        let timeout = sifs + control_duration(&self.phy, self.phy.cts_bits);
        if phase.is_control() {
            if any_fail {
                self.abort(id, t + timeout)?;
                return Ok(());
            }
            let receivers: Vec<usize> = phase.txs.iter().flat_map(|x| x.receivers.iter().copied()).collect();
            for rx in receivers {
                self.engage(rx, id, t);
            }
        } else if phase.txs.iter().any(|x| x.kind == FrameKind::Data) {
            let mut delivered = Vec::new();
            for tx in &phase.txs {
                for d in &tx.deliveries {
                    if ok_pairs.contains(&(tx.tx, d.rx)) {
                        delivered.push((tx.tx, *d));
                    }
                }
            }
            let run = self.running.get_mut(&id).ok_or_else(|| SimError::Invariant("unknown exchange".into()))?;
            let expected = phase.txs.iter().map(|x| x.deliveries.len()).sum::<usize>();
            if delivered.len() < expected {
                run.failed = true;
            }
            // ACKs only from receivers that decoded their DATA.
            for later in run.ex.phases[k + 1..].iter_mut() {
                later.txs.retain(|a| {
                    a.kind != FrameKind::Ack || a.receivers.iter().all(|&r| ok_pairs.contains(&(r, a.tx)))
                });
            }
            let keep_from = k + 1;
            let mut rest: Vec<_> = run.ex.phases.drain(keep_from..).filter(|p| !p.txs.is_empty()).collect();
            run.ex.phases.append(&mut rest);
            run.delivered.extend(delivered);
            if run.delivered.is_empty() {
                self.abort(id, t + timeout)?;
                return Ok(());
            }
        }

        let run = self.running.get_mut(&id).ok_or_else(|| SimError::Invariant("unknown exchange".into()))?;
        if k + 1 < run.ex.phases.len() {
            run.phase = k + 1;
            self.at(t + sifs, 0, Ev::PhaseStart(id))?;
        } else {
            self.exchange_end(id, t)?;
        }
        Ok(())
    }

    fn abort(&mut self, id: u64, end: Nanos) -> Result<(), SimError> {
        if let Some(run) = self.running.get_mut(&id) {
            run.failed = true;
        }
        self.at(end, 0, Ev::ExchangeEnd(id))?;
        Ok(())
    }

    fn engage(&mut self, rx: usize, id: u64, t: Nanos) {
        if self.nodes[rx].mac == Mac::Engaged(id) {
            return;
        }
        self.detach(rx, t);
        self.nodes[rx].mac = Mac::Engaged(id);
        if let Some(run) = self.running.get_mut(&id) {
            run.responders.push(rx);
        }
    }

    /// Drops frames that can no longer overlap anything still to be resolved.
    fn prune_air(&mut self, t: Nanos) {
        let horizon = self
            .air
            .iter()
            .filter(|f| f.end > t)
            .map(|f| f.start)
            .min()
            .unwrap_or(t);
        // Frames ending now may still be needed by other phases ending now.
        self.air.retain(|f| f.end >= t || f.end > horizon);
    }

    fn medium_change(&mut self, t: Nanos, delta: i64) {
        self.accumulate(t);
        self.holders = (self.holders as i64 + delta) as u64;
    }

    fn accumulate(&mut self, t: Nanos) {
        let a = self.last_medium.max(self.w0);
        let b = t.min(self.w1);
        if b > a {
            let d = b - a;
            if self.holders == 0 {
                self.raw_medium.idle_ns += d;
            } else {
                self.raw_medium.busy_ns += d;
                self.raw_medium.excess_ns += (self.holders - 1) * d;
            }
        }
        self.last_medium = self.last_medium.max(t);
    }

    fn charge_airtime(&mut self, ex: &FrameExchange, start: Nanos, end: Nanos) {
        let d = end.min(self.w1).saturating_sub(start.max(self.w0));
        match ex.joint_peer {
            Some(p) => {
                self.metrics[ex.initiator].airtime_ns += d - d / 2;
                self.metrics[p].airtime_ns += d / 2;
            }
            None => self.metrics[ex.initiator].airtime_ns += d,
        }
    }

    fn exchange_end(&mut self, id: u64, t: Nanos) -> Result<(), SimError> {
        let run = self
            .running
            .remove(&id)
            .ok_or_else(|| SimError::Invariant("unknown exchange".into()))?;
        self.medium_change(t, -1);
        self.charge_airtime(&run.ex, run.start, t);
        let success = !run.failed;
        let in_window = t > self.w0 && t <= self.w1;
        let initiators: Vec<usize> = core::iter::once(run.ex.initiator).chain(run.ex.joint_peer).collect();
        let delivered_bits: u64 = run.delivered.iter().map(|(_, d)| d.payload_bits).sum();

        if in_window {
            for &i in &initiators {
                self.metrics[i].attempts += 1;
                if success {
                    self.metrics[i].successes += 1;
                } else {
                    self.metrics[i].collisions += 1;
                }
            }
            for (tx, d) in &run.delivered {
                self.metrics[*tx].delivered_bits += d.payload_bits;
                self.metrics[d.rx].received_bits += d.payload_bits;
            }
        }
        for (tx, d) in &run.delivered {
            self.nodes[*tx].queue.consume(d.rx, d.mpdus);
            if !self.nodes[*tx].is_ap {
                self.nodes[*tx].queue.served(d.rx);
            }
            if self.nodes[d.rx].is_ap && self.nodes[*tx].ap == d.rx {
                let backlog = self.nodes[*tx].queue.backlog_for(d.rx);
                self.nodes[d.rx].bsr.insert(*tx, (backlog, t));
            }
        }
        if run.ex.kind == ExchangeKind::Single {
            if let Some((_, d)) = run.delivered.first() {
                if self.nodes[run.ex.initiator].is_ap {
                    self.nodes[run.ex.initiator].queue.served(d.rx);
                }
            }
        }
        if success {
            if let Some((owner, peer)) = run.piggyback_owed {
                self.nodes[owner].queue.piggyback_pending.insert(peer);
            }
            if let Some((owner, peer)) = run.piggyback_settles {
                self.nodes[owner].queue.piggyback_pending.remove(&peer);
            }
        }
        if self.opts.trace {
            self.trace.push(TraceRecord {
                time: t,
                event: TraceEvent::ExchangeEnd {
                    exchange: id,
                    initiator: run.ex.initiator,
                    success,
                    delivered_bits,
                },
            });
        }

        let (protocol, phy, limit) = (self.proto.protocol, self.phy, self.proto.retry_limit);
        for &i in &initiators {
            let nd = &mut self.nodes[i];
            if success {
                nd.retries = 0;
                nd.backoff.on_outcome(Outcome::Success, false, protocol, &phy, &mut nd.rng_backoff);
            } else {
                nd.retries += 1;
                let dropped = nd.retries > limit;
                if dropped {
                    nd.retries = 0;
                    if let Some(dest) = nd.queue.next_dest() {
                        let agg = self.proto.aggregation;
                        nd.queue.consume(dest, agg);
                    }
                    if in_window {
                        self.metrics[i].drops += 1;
                    }
                }
                let nd = &mut self.nodes[i];
                nd.backoff.on_outcome(Outcome::Collision, dropped, protocol, &phy, &mut nd.rng_backoff);
            }
            self.contend(i, t, true)?;
        }
        for r in run.responders {
            if self.nodes[r].mac == Mac::Engaged(id) {
                self.contend(r, t, false)?;
            }
        }
        // An AP that just learned of uplink backlog may want the medium.
        let ap = self.nodes[run.ex.initiator].ap;
        if self.nodes[ap].mac == Mac::Idle {
            self.contend(ap, t, true)?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<SimOutput, SimError> {
        let w1 = self.w1;
        self.accumulate(w1);
        let open: Vec<(FrameExchange, Nanos)> = self.running.values().map(|r| (r.ex.clone(), r.start)).collect();
        for (ex, start) in open {
            self.charge_airtime(&ex, start, w1);
        }
        let window = w1 - self.w0;
        let raw = MetricsRaw {
            window_ns: window,
            node_ids: self.nodes.iter().map(|n| n.id.clone()).collect(),
            wlan_ids: self.scn.wlans.iter().map(|w| w.id.clone()).collect(),
            wlan_of: self.nodes.iter().map(|n| n.wlan).collect(),
            is_ap: self.nodes.iter().map(|n| n.is_ap).collect(),
            nodes: self.metrics,
            medium: self.raw_medium,
            events_fired: self.sched.fired(),
        };
        check_invariants(&raw)?;
        Ok(SimOutput {
            report: reduce(&raw),
            raw,
            trace: self.trace,
        })
    }
}

struct Built {
    ex: FrameExchange,
    piggyback_owed: Option<(usize, usize)>,
    piggyback_settles: Option<(usize, usize)>,
}

impl Built {
    fn plain(ex: FrameExchange) -> Self {
        Self {
            ex,
            piggyback_owed: None,
            piggyback_settles: None,
        }
    }

}

/// Accounting identities every run must satisfy.
pub fn check_invariants(raw: &MetricsRaw) -> Result<(), SimError> {
    let sent: u64 = raw.nodes.iter().map(|m| m.delivered_bits).sum();
    let got: u64 = raw.nodes.iter().map(|m| m.received_bits).sum();
    if sent != got {
        return Err(SimError::Invariant(format!("delivered {sent} bits but received {got}")));
    }
    for (i, m) in raw.nodes.iter().enumerate() {
        if m.successes + m.collisions > m.attempts {
            return Err(SimError::Invariant(format!("{}: outcomes exceed attempts", raw.node_ids[i])));
        }
    }
    let airtime: u64 = raw.nodes.iter().map(|m| m.airtime_ns).sum();
    let md = &raw.medium;
    if airtime + md.idle_ns != raw.window_ns + md.excess_ns {
        return Err(SimError::Invariant(format!(
            "airtime {airtime} + idle {} != window {} + overlap {}",
            md.idle_ns, raw.window_ns, md.excess_ns
        )));
    }
    if md.idle_ns + md.busy_ns != raw.window_ns {
        return Err(SimError::Invariant("idle + busy differs from the window".to_string()));
    }
    Ok(())
}
