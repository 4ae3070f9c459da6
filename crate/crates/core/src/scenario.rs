//! Simulation inputs: topology, radio and PHY parameters, protocol switches,
//! plus the built-in reference topologies.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::channel::{AntennaPattern, ChannelSet, ChannelSetError, PropagationModel};
use crate::engine::RandomStream;
use crate::multiuser::MumimoConfig;
use crate::{Nanos, NS_PER_MS, NS_PER_S, NS_PER_US};

pub use crate::channel::RadioParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Ap,
    Sta,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Traffic {
    Saturated,
    /// Poisson arrivals of MPDUs at the given rate in bits per second. Zero
    /// means the node never initiates.
    OfferedLoad(f64),
}

impl Traffic {
    pub fn is_active(&self) -> bool {
        match *self {
            Traffic::Saturated => true,
            Traffic::OfferedLoad(r) => r > 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub role: Role,
    /// Metres.
    pub position: [f64; 2],
    pub radio: RadioParams,
    pub antennas: u32,
    pub traffic: Traffic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Wlan {
    pub id: String,
    pub ap: Node,
    pub stas: Vec<Node>,
    /// Basic channel indices as configured; checked by [`validate`].
    pub channels: Vec<u8>,
    pub primary: u8,
}

impl Wlan {
    pub fn channel_set(&self) -> Result<ChannelSet, ChannelSetError> {
        ChannelSet::new(&self.channels, self.primary)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        core::iter::once(&self.ap).chain(self.stas.iter())
    }
}

/// Rate multiplier per channel width, relative to 20 MHz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WidthFactors {
    /// Entries for 20, 40, 80 and 160 MHz.
    pub factors: [f64; 4],
}

impl Default for WidthFactors {
    fn default() -> Self {
        Self {
            factors: [1.0, 2.1, 4.5, 9.0],
        }
    }
}

impl WidthFactors {
    /// Factor for a bonded block of `n` basic channels (1, 2, 4 or 8).
    pub fn for_channels(&self, n: u32) -> Option<f64> {
        match n {
            1 => Some(self.factors[0]),
            2 => Some(self.factors[1]),
            4 => Some(self.factors[2]),
            8 => Some(self.factors[3]),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhyParams {
    pub slot: Nanos,
    pub sifs: Nanos,
    pub difs: Nanos,
    pub phy_header: Nanos,
    /// Bits per second.
    pub control_rate: f64,
    /// Bits per second for one spatial stream on 20 MHz.
    pub base_rate_20mhz_1ss: f64,
    pub width_factors: WidthFactors,
    pub cw_min: u32,
    pub cw_max: u32,
    pub max_aggregation: u32,
    pub mac_header_bits: u32,
    pub mpdu_payload_bits: u32,
    pub rts_bits: u32,
    pub cts_bits: u32,
    pub ack_bits: u32,
    pub sounding_announce: Nanos,
    pub sounding_ndp: Nanos,
    pub sounding_report_bits: u32,
    pub propagation: PropagationModel,
}

impl Default for PhyParams {
    fn default() -> Self {
        Self {
            slot: 9 * NS_PER_US,
            sifs: 16 * NS_PER_US,
            difs: 34 * NS_PER_US,
            phy_header: 40 * NS_PER_US,
            control_rate: 24e6,
            base_rate_20mhz_1ss: 65e6,
            width_factors: WidthFactors::default(),
            cw_min: 16,
            cw_max: 1024,
            max_aggregation: 64,
            mac_header_bits: 288,
            mpdu_payload_bits: 12_000,
            rts_bits: 160,
            cts_bits: 112,
            ack_bits: 112,
            sounding_announce: 40 * NS_PER_US,
            sounding_ndp: 40 * NS_PER_US,
            sounding_report_bits: 1024,
            propagation: PropagationModel::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessProtocol {
    CsmaCa,
    CsmaEca,
}

impl AccessProtocol {
    pub fn as_str(&self) -> &'static str {
        match self {
            AccessProtocol::CsmaCa => "csma-ca",
            AccessProtocol::CsmaEca => "csma-eca",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtocolConfig {
    pub protocol: AccessProtocol,
    pub str_enabled: bool,
    /// MPDUs per aggregate, 1..=max_aggregation.
    pub aggregation: u32,
    pub piggyback: bool,
    pub retry_limit: u32,
    /// Count down on the primary channel only and pick the width at access
    /// time. When off the whole configured block must be idle.
    pub dbca: bool,
    /// Number of downlink OFDMA subchannels the AP splits its width into.
    pub ofdma: Option<u8>,
    pub mumimo: Option<MumimoConfig>,
    pub ul_mumimo: bool,
    /// `None` disables sounding overhead (ideal channel knowledge).
    pub sounding_interval: Option<Nanos>,
    /// Multiplier applied per extra spatial stream in MU transmissions.
    pub mu_rate_penalty: f64,
    /// Age after which the AP's knowledge of a STA's buffer is unusable.
    pub buffer_staleness: Nanos,
    /// Fraction of the run excluded from the report as warm-up.
    pub warmup_fraction: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            protocol: AccessProtocol::CsmaCa,
            str_enabled: false,
            aggregation: 8,
            piggyback: false,
            retry_limit: 7,
            dbca: false,
            ofdma: None,
            mumimo: None,
            ul_mumimo: false,
            sounding_interval: Some(50 * NS_PER_MS),
            mu_rate_penalty: 1.0,
            buffer_staleness: 50 * NS_PER_MS,
            warmup_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub duration: Nanos,
    pub seed: u64,
    pub wlans: Vec<Wlan>,
    pub radio_defaults: RadioParams,
    pub phy: PhyParams,
    pub protocol: ProtocolConfig,
}

impl Scenario {
    /// All nodes, each WLAN's AP first and then its STAs.
    pub fn nodes(&self) -> impl Iterator<Item = (&Wlan, &Node)> {
        self.wlans.iter().flat_map(|w| w.nodes().map(move |n| (w, n)))
    }

    pub fn node_count(&self) -> usize {
        self.wlans.iter().map(|w| 1 + w.stas.len()).sum()
    }

    pub fn nodes_mut(&mut self) -> impl Iterator<Item = &mut Node> {
        self.wlans
            .iter_mut()
            .flat_map(|w| core::iter::once(&mut w.ap).chain(w.stas.iter_mut()))
    }
}

/// A broken invariant, naming the WLAN or node it concerns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub subject: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.subject, self.message)
    }
}

fn is_pow2(x: u32) -> bool {
    x != 0 && x & (x - 1) == 0
}

/// Checks every scenario invariant. An empty list means the scenario is valid.
pub fn validate(s: &Scenario) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |subject: &str, message: String| {
        out.push(Violation {
            subject: subject.to_string(),
            message,
        })
    };

    if s.duration == 0 {
        push("scenario", "duration must be > 0".into());
    }
    if s.wlans.is_empty() {
        push("scenario", "at least one WLAN is required".into());
    }

    let p = &s.phy;
    for (name, v) in [
        ("slot", p.slot),
        ("sifs", p.sifs),
        ("difs", p.difs),
        ("phy_header", p.phy_header),
        ("sounding_announce", p.sounding_announce),
        ("sounding_ndp", p.sounding_ndp),
    ] {
        if v == 0 {
            push("phy", format!("{name} must be > 0"));
        }
    }
    if !(p.control_rate > 0.0) || !(p.base_rate_20mhz_1ss > 0.0) {
        push("phy", "rates must be > 0".into());
    }
    if p.width_factors.factors.iter().any(|f| !(*f > 0.0)) {
        push("phy", "width factors must be > 0".into());
    }
    if !is_pow2(p.cw_min) || !is_pow2(p.cw_max) {
        push("phy", "cw_min and cw_max must be powers of two".into());
    }
    if p.cw_min > p.cw_max {
        push("phy", "cw_min must not exceed cw_max".into());
    }
    if p.max_aggregation == 0 {
        push("phy", "max_aggregation must be >= 1".into());
    }
    if p.mpdu_payload_bits == 0 {
        push("phy", "mpdu_payload must be > 0".into());
    }
    if let Err(e) = p.propagation.check() {
        push("phy", format!("{e}"));
    }

    let pr = &s.protocol;
    if pr.aggregation == 0 || pr.aggregation > p.max_aggregation {
        push(
            "protocol",
            format!("aggregation must be in 1..={}", p.max_aggregation),
        );
    }
    if let Some(n) = pr.ofdma {
        if !matches!(n, 1 | 2 | 4 | 8) {
            push("protocol", "ofdma subchannel count must be 1,2,4,8".into());
        }
    }
    if let Some(cfg) = pr.mumimo {
        if let Err(e) = cfg.check() {
            push("protocol", format!("{e}"));
        }
    }
    if !(0.0..1.0).contains(&pr.warmup_fraction) {
        push("protocol", "warmup fraction must be in [0, 1)".into());
    }
    if !(pr.mu_rate_penalty > 0.0 && pr.mu_rate_penalty <= 1.0) {
        push("protocol", "mu rate penalty must be in (0, 1]".into());
    }
    if pr.sounding_interval == Some(0) {
        push("protocol", "sounding interval must be > 0".into());
    }

    let mut seen_nodes = BTreeSet::new();
    let mut seen_wlans = BTreeSet::new();
    for w in &s.wlans {
        if !seen_wlans.insert(w.id.as_str()) {
            push(&w.id, format!("wlan id {} duplicated", w.id));
        }
        if let Err(e) = w.channel_set() {
            push(&w.id, format!("{e}"));
        }
        if w.ap.role != Role::Ap {
            push(&w.ap.id, "the WLAN's access point must have role AP".into());
        }
        if let Some(cfg) = pr.mumimo.filter(|c| c.check().is_ok()) {
            let sta_antennas: Vec<u32> = w.stas.iter().map(|n| n.antennas).collect();
            if let Err(e) = cfg.check_antennas(w.ap.antennas, &sta_antennas) {
                push(&w.ap.id, format!("{e} (mumimo {cfg}, AP has {} antennas)", w.ap.antennas));
            }
        }
        for n in w.nodes() {
            if !seen_nodes.insert(n.id.as_str()) {
                push(&n.id, format!("node id {} duplicated", n.id));
            }
            if n.antennas == 0 {
                push(&n.id, "antennas must be >= 1".into());
            }
            if let Traffic::OfferedLoad(r) = n.traffic {
                if !(r >= 0.0) || !r.is_finite() {
                    push(&n.id, "offered load must be a finite value >= 0".into());
                }
            }
            if n.position.iter().any(|c| !c.is_finite()) {
                push(&n.id, "position must be finite".into());
            }
            if let AntennaPattern::Sector {
                beamwidth_deg,
                backlobe_attenuation_db,
                ..
            } = n.radio.antenna_pattern
            {
                if !(beamwidth_deg > 0.0 && beamwidth_deg <= 360.0) {
                    push(&n.id, "beamwidth must be in (0, 360] degrees".into());
                }
                if !(backlobe_attenuation_db >= 0.0) {
                    push(&n.id, "backlobe attenuation must be >= 0 dB".into());
                }
            }
        }
        for sta in &w.stas {
            if sta.role != Role::Sta {
                push(&sta.id, "stations listed under a WLAN must have role STA".into());
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BuiltinName {
    Fig2Overlap,
    StadiumToy,
    TrainToy,
    ApartmentToy,
}

impl BuiltinName {
    pub const ALL: [BuiltinName; 4] = [
        BuiltinName::Fig2Overlap,
        BuiltinName::StadiumToy,
        BuiltinName::TrainToy,
        BuiltinName::ApartmentToy,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            BuiltinName::Fig2Overlap => "fig2-overlap",
            BuiltinName::StadiumToy => "stadium-toy",
            BuiltinName::TrainToy => "train-toy",
            BuiltinName::ApartmentToy => "apartment-toy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownBuiltin(pub String);

impl fmt::Display for UnknownBuiltin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "unknown builtin scenario {:?} (expected fig2-overlap, stadium-toy, train-toy or apartment-toy)",
            self.0
        )
    }
}

impl core::error::Error for UnknownBuiltin {}

impl core::str::FromStr for BuiltinName {
    type Err = UnknownBuiltin;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BuiltinName::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| UnknownBuiltin(s.to_string()))
    }
}

fn node(id: String, role: Role, position: [f64; 2], radio: RadioParams, traffic: Traffic) -> Node {
    Node {
        id,
        role,
        position,
        radio,
        antennas: 1,
        traffic,
    }
}

fn base(name: &str, duration: Nanos) -> Scenario {
    Scenario {
        name: name.to_string(),
        duration,
        seed: 1,
        wlans: Vec::new(),
        radio_defaults: RadioParams::default(),
        phy: PhyParams::default(),
        protocol: ProtocolConfig::default(),
    }
}

/// Distance between neighbouring APs in the overlap topology, metres.
pub const FIG2_AP_SPACING_M: f64 = 10.0;
/// Distance from each AP to its station, metres.
pub const FIG2_STA_OFFSET_M: f64 = 2.0;

fn fig2_overlap() -> Scenario {
    let mut s = base("fig2-overlap", 10 * NS_PER_S);
    let r = s.radio_defaults;
    // APs on an equilateral triangle; each STA sits outward from the centroid.
    let h = FIG2_AP_SPACING_M * libm::sqrt(3.0) / 2.0;
    let aps = [[0.0, 0.0], [FIG2_AP_SPACING_M, 0.0], [FIG2_AP_SPACING_M / 2.0, h]];
    let centroid = [FIG2_AP_SPACING_M / 2.0, h / 3.0];
    let layout: [(&str, &[u8], u8); 3] = [("A", &[0, 1], 0), ("B", &[2, 3], 2), ("C", &[0, 1, 2, 3], 1)];
    for (k, (id, chans, primary)) in layout.into_iter().enumerate() {
        let ap = aps[k];
        let dx = ap[0] - centroid[0];
        let dy = ap[1] - centroid[1];
        let norm = libm::hypot(dx, dy);
        let sta_pos = [
            ap[0] + FIG2_STA_OFFSET_M * dx / norm,
            ap[1] + FIG2_STA_OFFSET_M * dy / norm,
        ];
        s.wlans.push(Wlan {
            id: id.to_string(),
            ap: node(format!("{id}-ap"), Role::Ap, ap, r, Traffic::Saturated),
            stas: alloc::vec![node(format!("{id}-sta1"), Role::Sta, sta_pos, r, Traffic::OfferedLoad(0.0))],
            channels: chans.to_vec(),
            primary,
        });
    }
    s
}

struct ToyLayout {
    name: &'static str,
    aps: usize,
    stas: usize,
    area_m2: f64,
    block: u8,
    ap_load_bps: f64,
    sta_load_bps: f64,
}

fn toy(layout: &ToyLayout) -> Scenario {
    let mut s = base(layout.name, 2 * NS_PER_S);
    let r = s.radio_defaults;
    let side = libm::sqrt(layout.area_m2);
    let mut rng = RandomStream::new(s.seed, layout.name, "placement");
    let place = |rng: &mut RandomStream| [rng.unit_f64() * side, rng.unit_f64() * side];

    let blocks = (8 / layout.block).max(1);
    for k in 0..layout.aps {
        let block = (k as u8) % blocks;
        let lo = block * layout.block;
        let id = format!("w{k}");
        s.wlans.push(Wlan {
            ap: node(format!("{id}-ap"), Role::Ap, place(&mut rng), r, Traffic::OfferedLoad(layout.ap_load_bps)),
            id,
            stas: Vec::new(),
            channels: (lo..lo + layout.block).collect(),
            primary: lo,
        });
    }
    for k in 0..layout.stas {
        let pos = place(&mut rng);
        let nearest = s
            .wlans
            .iter()
            .enumerate()
            .map(|(i, w)| (i, crate::channel::distance(w.ap.position, pos)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let w = &mut s.wlans[nearest];
        let id = format!("{}-sta{}", w.id, k);
        w.stas.push(node(id, Role::Sta, pos, r, Traffic::OfferedLoad(layout.sta_load_bps)));
    }
    s
}

/// Built-in reference topologies. Pure: every call returns the same value.
pub fn builtin_scenario(name: BuiltinName) -> Scenario {
    match name {
        BuiltinName::Fig2Overlap => fig2_overlap(),
        BuiltinName::StadiumToy => toy(&ToyLayout {
            name: "stadium-toy",
            aps: 10,
            stas: 100,
            area_m2: 125.0,
            block: 1,
            ap_load_bps: 4e6,
            sta_load_bps: 0.5e6,
        }),
        BuiltinName::TrainToy => toy(&ToyLayout {
            name: "train-toy",
            aps: 1,
            stas: 120,
            area_m2: 60.0,
            block: 4,
            ap_load_bps: 20e6,
            sta_load_bps: 0.2e6,
        }),
        BuiltinName::ApartmentToy => toy(&ToyLayout {
            name: "apartment-toy",
            aps: 12,
            stas: 36,
            area_m2: 240.0,
            block: 2,
            ap_load_bps: 20e6,
            sta_load_bps: 2e6,
        }),
    }
}

/// Direction of saturated traffic in a single-BSS scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Downlink,
    Uplink,
    Both,
}

/// Parameters for a single AP with `n_stas` stations on a 3 m ring.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleBss {
    pub name: String,
    pub n_stas: usize,
    /// Number of 20 MHz basic channels (1, 2, 4 or 8).
    pub width: u8,
    pub ap_antennas: u32,
    pub sta_antennas: u32,
    pub direction: Direction,
    pub str_capable: bool,
    pub protocol: ProtocolConfig,
    pub duration: Nanos,
    pub seed: u64,
}

impl Default for SingleBss {
    fn default() -> Self {
        Self {
            name: "single-bss".to_string(),
            n_stas: 1,
            width: 1,
            ap_antennas: 1,
            sta_antennas: 1,
            direction: Direction::Downlink,
            str_capable: false,
            protocol: ProtocolConfig::default(),
            duration: 10 * NS_PER_S,
            seed: 1,
        }
    }
}

pub const SINGLE_BSS_RADIUS_M: f64 = 3.0;

pub fn single_bss(spec: &SingleBss) -> Scenario {
    let mut s = base(&spec.name, spec.duration);
    s.seed = spec.seed;
    s.protocol = spec.protocol;
    let mut radio = s.radio_defaults;
    radio.str_capable = spec.str_capable;
    let (ap_traffic, sta_traffic) = match spec.direction {
        Direction::Downlink => (Traffic::Saturated, Traffic::OfferedLoad(0.0)),
        Direction::Uplink => (Traffic::OfferedLoad(0.0), Traffic::Saturated),
        Direction::Both => (Traffic::Saturated, Traffic::Saturated),
    };
    let mut ap = node("ap".to_string(), Role::Ap, [0.0, 0.0], radio, ap_traffic);
    ap.antennas = spec.ap_antennas;
    let stas = (0..spec.n_stas)
        .map(|k| {
            let angle = 2.0 * core::f64::consts::PI * k as f64 / spec.n_stas.max(1) as f64;
            let pos = [
                SINGLE_BSS_RADIUS_M * libm::cos(angle),
                SINGLE_BSS_RADIUS_M * libm::sin(angle),
            ];
            let mut n = node(format!("sta{}", k + 1), Role::Sta, pos, radio, sta_traffic);
            n.antennas = spec.sta_antennas;
            n
        })
        .collect();
    s.wlans.push(Wlan {
        id: "bss".to_string(),
        ap,
        stas,
        channels: (0..spec.width).collect(),
        primary: 0,
    });
    s
}
