//! Spectrum occupancy, propagation, carrier sensing, dynamic bandwidth
//! assessment and reception resolution.
//!
//! The spectrum is a row of 20 MHz basic channels indexed from 0. A
//! [`ChannelSet`] is the contiguous block a WLAN is configured for; a
//! [`ChannelMask`] is any set of basic channels a single transmission
//! occupies (OFDMA can hand a station a non-contiguous union).

use alloc::vec::Vec;
use core::fmt;

use crate::Nanos;

/// Highest basic channel index plus one.
pub const MAX_CHANNELS: u8 = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChannelSetError {
    Empty,
    NotContiguous,
    BadWidth(usize),
    PrimaryNotMember(u8),
    IndexOutOfRange(u8),
}

impl fmt::Display for ChannelSetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChannelSetError::Empty => f.write_str("channel set is empty"),
            ChannelSetError::NotContiguous => f.write_str("channels not contiguous"),
            ChannelSetError::BadWidth(n) => {
                write!(f, "width must be 1,2,4,8 basic channels (got {n})")
            }
            ChannelSetError::PrimaryNotMember(p) => {
                write!(f, "primary channel {p} is not a member of the channel set")
            }
            ChannelSetError::IndexOutOfRange(c) => {
                write!(f, "basic channel index {c} out of range (max {})", MAX_CHANNELS - 1)
            }
        }
    }
}

impl core::error::Error for ChannelSetError {}

/// Bitmask over basic channel indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ChannelMask(pub u64);

impl ChannelMask {
    pub const EMPTY: ChannelMask = ChannelMask(0);

    pub fn single(ch: u8) -> Self {
        ChannelMask(1u64 << ch)
    }

    /// `len` channels starting at `lo`.
    pub fn range(lo: u8, len: u8) -> Self {
        if len == 0 {
            return Self::EMPTY;
        }
        let bits = if len >= 64 { u64::MAX } else { (1u64 << len) - 1 };
        ChannelMask(bits << lo)
    }

    pub fn contains(self, ch: u8) -> bool {
        ch < 64 && self.0 & (1u64 << ch) != 0
    }

    pub fn intersects(self, other: ChannelMask) -> bool {
        self.0 & other.0 != 0
    }

    pub fn is_subset_of(self, other: ChannelMask) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn union(self, other: ChannelMask) -> Self {
        ChannelMask(self.0 | other.0)
    }

    pub fn intersection(self, other: ChannelMask) -> Self {
        ChannelMask(self.0 & other.0)
    }

    pub fn count(self) -> u32 {
        self.0.count_ones()
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = u8> {
        let bits = self.0;
        (0..64u8).filter(move |&c| bits & (1u64 << c) != 0)
    }

    /// The contiguous set this mask describes, if it is one of the valid widths.
    pub fn as_contiguous(self) -> Option<(u8, u8)> {
        if self.0 == 0 {
            return None;
        }
        let lo = self.0.trailing_zeros() as u8;
        let len = self.0.count_ones() as u8;
        let shifted = self.0 >> lo;
        if shifted == (1u64 << len) - 1 && matches!(len, 1 | 2 | 4 | 8) {
            Some((lo, len))
        } else {
            None
        }
    }
}

/// Contiguous block of 1, 2, 4 or 8 basic channels with a marked primary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChannelSet {
    lo: u8,
    len: u8,
    primary: u8,
}

impl ChannelSet {
    pub fn new(channels: &[u8], primary: u8) -> Result<Self, ChannelSetError> {
        if channels.is_empty() {
            return Err(ChannelSetError::Empty);
        }
        let mut sorted: Vec<u8> = channels.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if let Some(&c) = sorted.iter().find(|&&c| c >= MAX_CHANNELS) {
            return Err(ChannelSetError::IndexOutOfRange(c));
        }
        if sorted.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(ChannelSetError::NotContiguous);
        }
        if !matches!(sorted.len(), 1 | 2 | 4 | 8) {
            return Err(ChannelSetError::BadWidth(sorted.len()));
        }
        if !sorted.contains(&primary) {
            return Err(ChannelSetError::PrimaryNotMember(primary));
        }
        Ok(Self {
            lo: sorted[0],
            len: sorted.len() as u8,
            primary,
        })
    }

    /// Contiguous block without re-checking; `primary` must be inside.
    pub fn block(lo: u8, len: u8, primary: u8) -> Result<Self, ChannelSetError> {
        let chans: Vec<u8> = (lo..lo.saturating_add(len)).collect();
        Self::new(&chans, primary)
    }

    pub fn primary(&self) -> u8 {
        self.primary
    }

    pub fn lo(&self) -> u8 {
        self.lo
    }

    pub fn len(&self) -> u8 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn width_mhz(&self) -> u32 {
        20 * u32::from(self.len)
    }

    pub fn contains(&self, ch: u8) -> bool {
        ch >= self.lo && ch < self.lo + self.len
    }

    pub fn channels(&self) -> impl Iterator<Item = u8> {
        self.lo..self.lo + self.len
    }

    pub fn to_vec(&self) -> Vec<u8> {
        self.channels().collect()
    }

    pub fn mask(&self) -> ChannelMask {
        ChannelMask::range(self.lo, self.len)
    }

    pub fn intersects(&self, other: &ChannelSet) -> bool {
        self.mask().intersects(other.mask())
    }

    pub fn is_subset_of(&self, other: &ChannelSet) -> bool {
        self.mask().is_subset_of(other.mask())
    }

    /// Nested primary-containing sub-blocks, widest first: the full set, the
    /// half holding the primary, the quarter holding it, down to the primary
    /// alone.
    pub fn nested_candidates(&self) -> Vec<ChannelSet> {
        let mut out = Vec::new();
        let mut lo = self.lo;
        let mut len = self.len;
        loop {
            out.push(ChannelSet {
                lo,
                len,
                primary: self.primary,
            });
            if len == 1 {
                break;
            }
            len /= 2;
            if self.primary >= lo + len {
                lo += len;
            }
        }
        out
    }

    /// Splits the set into `parts` equal contiguous sub-blocks, in channel order.
    pub fn split(&self, parts: u8) -> Option<Vec<ChannelMask>> {
        if parts == 0 || self.len % parts != 0 || !matches!(parts, 1 | 2 | 4 | 8) {
            return None;
        }
        let w = self.len / parts;
        Some((0..parts).map(|k| ChannelMask::range(self.lo + k * w, w)).collect())
    }
}

impl fmt::Display for ChannelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}..{}}} p{}", self.lo, self.lo + self.len - 1, self.primary)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChannelError {
    NonPositiveDistance(f64),
    ChannelNotUsed(u8),
    PrimaryBusy,
    InvalidModel(&'static str),
}

impl fmt::Display for ChannelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChannelError::NonPositiveDistance(d) => write!(f, "distance must be positive (got {d})"),
            ChannelError::ChannelNotUsed(c) => {
                write!(f, "basic channel {c} is not occupied by the transmission")
            }
            ChannelError::PrimaryBusy => {
                f.write_str("bandwidth assessment invoked while the primary channel is busy")
            }
            ChannelError::InvalidModel(why) => write!(f, "invalid propagation model: {why}"),
        }
    }
}

impl core::error::Error for ChannelError {}

/// Log-distance path loss plus the receiver noise floor and capture rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationModel {
    /// Loss at the 1 m reference distance, dB.
    pub pl0_db: f64,
    pub exponent: f64,
    /// Noise power per 20 MHz basic channel, dBm.
    pub noise_floor_dbm: f64,
    /// Minimum SINR for a reception to succeed. `+inf` selects the pure
    /// collision model.
    pub capture_threshold_db: f64,
}

impl Default for PropagationModel {
    fn default() -> Self {
        Self {
            pl0_db: 40.0,
            exponent: 3.5,
            noise_floor_dbm: -95.0,
            capture_threshold_db: f64::INFINITY,
        }
    }
}

impl PropagationModel {
    pub fn check(&self) -> Result<(), ChannelError> {
        if !(self.exponent >= 2.0) {
            return Err(ChannelError::InvalidModel("exponent must be >= 2"));
        }
        if !(self.pl0_db > 0.0) {
            return Err(ChannelError::InvalidModel("pl0 must be > 0 dB"));
        }
        if self.noise_floor_dbm.is_nan() || self.capture_threshold_db.is_nan() {
            return Err(ChannelError::InvalidModel("noise floor and capture threshold must be numbers"));
        }
        Ok(())
    }
}

/// `pl0 + 10·n·log10(d)`, with distances under 1 m clamped to 1 m.
pub fn path_loss(d: f64, model: &PropagationModel) -> Result<f64, ChannelError> {
    if !(d > 0.0) {
        return Err(ChannelError::NonPositiveDistance(d));
    }
    let d = if d < 1.0 { 1.0 } else { d };
    Ok(model.pl0_db + 10.0 * model.exponent * libm::log10(d))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AntennaPattern {
    Omni,
    Sector {
        /// Beam centre, degrees counter-clockwise from the +x axis.
        azimuth_deg: f64,
        /// Full beamwidth in (0, 360].
        beamwidth_deg: f64,
        mainlobe_gain_db: f64,
        backlobe_attenuation_db: f64,
    },
}

impl AntennaPattern {
    /// Gain in dB toward a bearing (degrees).
    pub fn gain_toward(&self, bearing_deg: f64) -> f64 {
        match *self {
            AntennaPattern::Omni => 0.0,
            AntennaPattern::Sector {
                azimuth_deg,
                beamwidth_deg,
                mainlobe_gain_db,
                backlobe_attenuation_db,
            } => {
                let mut diff = libm::fmod(bearing_deg - azimuth_deg, 360.0);
                if diff < 0.0 {
                    diff += 360.0;
                }
                if diff > 180.0 {
                    diff = 360.0 - diff;
                }
                if diff <= beamwidth_deg / 2.0 {
                    mainlobe_gain_db
                } else {
                    -backlobe_attenuation_db
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadioParams {
    pub tx_power_dbm: f64,
    pub cca_threshold_dbm: f64,
    pub antenna_pattern: AntennaPattern,
    pub str_capable: bool,
}

impl Default for RadioParams {
    fn default() -> Self {
        Self {
            tx_power_dbm: 20.0,
            cca_threshold_dbm: -82.0,
            antenna_pattern: AntennaPattern::Omni,
            str_capable: false,
        }
    }
}

pub fn dbm_to_mw(dbm: f64) -> f64 {
    libm::pow(10.0, dbm / 10.0)
}

pub fn mw_to_dbm(mw: f64) -> f64 {
    10.0 * libm::log10(mw)
}

/// Per-basic-channel power when `total_dbm` is split equally over `n` channels.
pub fn split_power(total_dbm: f64, n: u32) -> f64 {
    total_dbm - 10.0 * libm::log10(f64::from(n.max(1)))
}

/// Bearing from `a` to `b` in degrees.
pub fn bearing_deg(a: [f64; 2], b: [f64; 2]) -> f64 {
    libm::atan2(b[1] - a[1], b[0] - a[0]).to_degrees()
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    libm::hypot(b[0] - a[0], b[1] - a[1])
}

/// Static link gains (beam gain minus path loss) between every node pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkTable {
    n: usize,
    gain_db: Vec<f64>,
}

impl LinkTable {
    pub fn build(
        positions: &[[f64; 2]],
        radios: &[RadioParams],
        model: &PropagationModel,
    ) -> Result<Self, ChannelError> {
        let n = positions.len();
        let mut gain_db = alloc::vec![0.0; n * n];
        for tx in 0..n {
            for rx in 0..n {
                if tx == rx {
                    continue;
                }
                let d = distance(positions[tx], positions[rx]).max(1e-9);
                let beam = radios[tx]
                    .antenna_pattern
                    .gain_toward(bearing_deg(positions[tx], positions[rx]));
                gain_db[tx * n + rx] = beam - path_loss(d, model)?;
            }
        }
        Ok(Self { n, gain_db })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn gain_db(&self, tx: usize, rx: usize) -> f64 {
        self.gain_db[tx * self.n + rx]
    }
}

/// One frame on the air.
#[derive(Debug, Clone, PartialEq)]
pub struct Transmission {
    pub id: u64,
    pub tx: usize,
    pub channels: ChannelMask,
    pub start: Nanos,
    pub end: Nanos,
    pub power_dbm_per_channel: f64,
    pub receivers: Vec<usize>,
    /// Frames of the same coordinated exchange phase (MU-MIMO streams,
    /// OFDMA subchannels, a full-duplex pair) share a group and do not
    /// interfere with each other.
    pub group: u64,
}

impl Transmission {
    pub fn is_active_at(&self, t: Nanos) -> bool {
        self.start <= t && t < self.end
    }

    pub fn overlaps_in_time(&self, other: &Transmission) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// Received power in dBm on basic channel `ch`.
pub fn received_power(
    tx: &Transmission,
    links: &LinkTable,
    rx: usize,
    ch: u8,
) -> Result<f64, ChannelError> {
    if !tx.channels.contains(ch) {
        return Err(ChannelError::ChannelNotUsed(ch));
    }
    Ok(tx.power_dbm_per_channel + links.gain_db(tx.tx, rx))
}

/// Carrier-sense result for one node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CcaVerdict {
    /// Busy channels among the assessed ones.
    pub busy: ChannelMask,
    /// Channels the node senses for its backoff.
    pub sensed: ChannelMask,
}

impl CcaVerdict {
    pub fn is_busy(&self, ch: u8) -> bool {
        self.busy.contains(ch)
    }

    pub fn overall_busy(&self) -> bool {
        self.busy.intersects(self.sensed)
    }
}

/// Energy-detect carrier sensing of `node` at time `t` over `assessed`
/// channels. A channel is busy when the linear sum of received powers from
/// other active transmissions reaches the CCA threshold. The node's own
/// transmission makes every assessed channel busy unless the node can
/// transmit and receive simultaneously.
pub fn cca_assess(
    node: usize,
    radio: &RadioParams,
    t: Nanos,
    active: &[Transmission],
    links: &LinkTable,
    assessed: ChannelMask,
    sensed: ChannelMask,
) -> CcaVerdict {
    let threshold_mw = dbm_to_mw(radio.cca_threshold_dbm);
    let mut busy = ChannelMask::EMPTY;
    for ch in assessed.iter() {
        let mut sum_mw = 0.0;
        let mut own = false;
        for tr in active.iter().filter(|tr| tr.is_active_at(t) && tr.channels.contains(ch)) {
            if tr.tx == node {
                own = true;
                continue;
            }
            sum_mw += dbm_to_mw(tr.power_dbm_per_channel + links.gain_db(tr.tx, node));
        }
        if (own && !radio.str_capable) || sum_mw >= threshold_mw {
            busy = busy.union(ChannelMask::single(ch));
        }
    }
    CcaVerdict { busy, sensed }
}

/// Widest nested primary-containing sub-block of `configured` whose channels
/// were all idle over the assessment window.
pub fn dbca_assess(configured: &ChannelSet, idle_over_window: ChannelMask) -> Result<ChannelSet, ChannelError> {
    if !idle_over_window.contains(configured.primary()) {
        return Err(ChannelError::PrimaryBusy);
    }
    configured
        .nested_candidates()
        .into_iter()
        .find(|c| c.mask().is_subset_of(idle_over_window))
        .ok_or(ChannelError::PrimaryBusy)
}

/// Outcome of one `(transmission, receiver)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reception {
    Success,
    Failure,
}

/// Inputs for reception resolution at one receiver.
#[derive(Debug, Clone, Copy)]
pub struct ReceiverView<'a> {
    pub node: usize,
    pub radio: &'a RadioParams,
}

/// Decides whether `rx` decoded `target`, given every transmission that
/// overlapped it in time.
///
/// The frame must be above the noise floor on each of its channels. Over its
/// whole duration, on every channel it uses, the SINR must reach the capture
/// threshold; with an infinite threshold any overlapping foreign frame heard
/// above the noise floor destroys it. The worst instant is one of the start
/// times of the overlapping frames.
pub fn resolve_reception(
    target: &Transmission,
    rx: ReceiverView<'_>,
    overlapping: &[Transmission],
    links: &LinkTable,
    model: &PropagationModel,
) -> Reception {
    let noise_mw = dbm_to_mw(model.noise_floor_dbm);
    let signal_dbm = target.power_dbm_per_channel + links.gain_db(target.tx, rx.node);
    if !(signal_dbm > model.noise_floor_dbm) {
        return Reception::Failure;
    }
    let signal_mw = dbm_to_mw(signal_dbm);

    let relevant: Vec<&Transmission> = overlapping
        .iter()
        .filter(|o| o.id != target.id && o.overlaps_in_time(target))
        .collect();

    for o in &relevant {
        if o.tx == rx.node {
            if rx.radio.str_capable {
                continue;
            }
            return Reception::Failure;
        }
    }
    let foreign: Vec<&Transmission> = relevant
        .into_iter()
        .filter(|o| o.tx != rx.node && o.group != target.group)
        .collect();

    let mut instants: Vec<Nanos> = foreign.iter().map(|o| o.start.max(target.start)).collect();
    instants.push(target.start);

    for ch in target.channels.iter() {
        for &t in &instants {
            let mut interf_mw = 0.0;
            for o in foreign.iter().filter(|o| o.channels.contains(ch) && o.is_active_at(t)) {
                let p = o.power_dbm_per_channel + links.gain_db(o.tx, rx.node);
                if model.capture_threshold_db == f64::INFINITY {
                    if p > model.noise_floor_dbm {
                        return Reception::Failure;
                    }
                } else {
                    interf_mw += dbm_to_mw(p);
                }
            }
            if model.capture_threshold_db != f64::INFINITY {
                let sinr_db = mw_to_dbm(signal_mw) - mw_to_dbm(noise_mw + interf_mw);
                if sinr_db < model.capture_threshold_db {
                    return Reception::Failure;
                }
            }
        }
    }
    Reception::Success
}

/// Resolves every `(transmission, intended receiver)` pair of a batch of
/// frames ending together.
pub fn resolve_receptions(
    batch: &[Transmission],
    overlapping: &[Transmission],
    radios: &[RadioParams],
    links: &LinkTable,
    model: &PropagationModel,
) -> Vec<(u64, usize, Reception)> {
    let mut out = Vec::new();
    for tr in batch {
        for &rx in &tr.receivers {
            let view = ReceiverView {
                node: rx,
                radio: &radios[rx],
            };
            out.push((tr.id, rx, resolve_reception(tr, view, overlapping, links, model)));
        }
    }
    out
}
