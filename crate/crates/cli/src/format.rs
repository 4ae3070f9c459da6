//! Scenario files.
//!
//! A scenario is a TOML document with optional `[radio]`, `[phy]` and
//! `[protocol]` tables and one `[[wlan]]` table per network, each holding a
//! `[wlan.ap]` and any number of `[[wlan.sta]]`. Durations are strings with a
//! unit (`"9us"`, `"10s"`); powers are strings in dBm (`"-82dBm"`). Anything
//! omitted takes its default. See `docs/scenario.md` for the full schema.

use densewlan_core::channel::{AntennaPattern, PropagationModel};
use densewlan_core::multiuser::MumimoConfig;
use densewlan_core::scenario::{
    AccessProtocol, Node, PhyParams, ProtocolConfig, RadioParams, Role, Traffic, Wlan, WidthFactors,
};
use densewlan_core::{Nanos, Scenario, NS_PER_MS, NS_PER_S, NS_PER_US};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("scenario file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("{key}: {message}")]
    Value { key: String, message: String },
    #[error("could not render scenario: {0}")]
    Render(#[from] toml::ser::Error),
}

fn bad(key: &str, message: impl Into<String>) -> FormatError {
    FormatError::Value {
        key: key.to_string(),
        message: message.into(),
    }
}

const UNITS: [(&str, Nanos); 5] = [("ns", 1), ("us", NS_PER_US), ("µs", NS_PER_US), ("ms", NS_PER_MS), ("s", NS_PER_S)];

/// Parses `"<number><unit>"` with unit ns, us, ms or s into whole nanoseconds.
pub fn parse_duration(text: &str) -> Result<Nanos, String> {
    let t = text.trim();
    let split = t
        .find(|c: char| !(c.is_ascii_digit() || c == '.'))
        .ok_or_else(|| format!("\"{text}\" needs a unit (ns, us, ms, s)"))?;
    let (num, unit) = (&t[..split], t[split..].trim());
    let scale = UNITS
        .iter()
        .find(|(u, _)| *u == unit)
        .map(|&(_, s)| s)
        .ok_or_else(|| format!("unknown time unit \"{unit}\""))?;
    let (int, frac) = num.split_once('.').unwrap_or((num, ""));
    if int.is_empty() && frac.is_empty() {
        return Err(format!("\"{text}\" has no number"));
    }
    let digits = |s: &str| -> Result<u128, String> {
        if s.is_empty() {
            Ok(0)
        } else {
            s.parse::<u128>().map_err(|_| format!("\"{text}\" is not a number"))
        }
    };
    let pow = 10u128
        .checked_pow(frac.len() as u32)
        .ok_or_else(|| format!("\"{text}\" has too many decimals"))?;
    let scaled = digits(frac)? * u128::from(scale);
    if scaled % pow != 0 {
        return Err(format!("\"{text}\" is not a whole number of nanoseconds"));
    }
    let ns = digits(int)?
        .checked_mul(u128::from(scale))
        .and_then(|v| v.checked_add(scaled / pow))
        .ok_or_else(|| format!("\"{text}\" is too large"))?;
    Nanos::try_from(ns).map_err(|_| format!("\"{text}\" is too large"))
}

/// Renders with the largest unit that divides exactly.
pub fn render_duration(ns: Nanos) -> String {
    for (unit, scale) in [("s", NS_PER_S), ("ms", NS_PER_MS), ("us", NS_PER_US)] {
        if ns % scale == 0 && ns != 0 {
            return format!("{}{unit}", ns / scale);
        }
    }
    format!("{ns}ns")
}

pub fn parse_dbm(text: &str) -> Result<f64, String> {
    let num = text
        .trim()
        .strip_suffix("dBm")
        .ok_or_else(|| format!("\"{text}\" must end in dBm"))?;
    let v: f64 = num.trim().parse().map_err(|_| format!("\"{text}\" is not a power"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("\"{text}\" is not finite"))
    }
}

pub fn render_dbm(v: f64) -> String {
    format!("{v}dBm")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum Switch {
    Bool(bool),
    Word(String),
}

impl Switch {
    fn get(&self, key: &str) -> Result<bool, FormatError> {
        match self {
            Switch::Bool(b) => Ok(*b),
            Switch::Word(w) if w == "on" => Ok(true),
            Switch::Word(w) if w == "off" => Ok(false),
            Switch::Word(w) => Err(bad(key, format!("expected on or off, got \"{w}\""))),
        }
    }

    fn of(b: bool) -> Self {
        Switch::Word(if b { "on" } else { "off" }.to_string())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum CountOrOff {
    Count(i64),
    Word(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum NumberOrOff {
    Number(f64),
    Word(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum TrafficDoc {
    /// Offered load in bits per second.
    Rate(f64),
    Word(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum AntennaDoc {
    Word(String),
    Sector {
        azimuth: f64,
        beamwidth: f64,
        gain_db: f64,
        backlobe_db: f64,
    },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RadioDoc {
    #[serde(skip_serializing_if = "Option::is_none")]
    tx_power: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cca_threshold: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    str: Option<Switch>,
    #[serde(skip_serializing_if = "Option::is_none")]
    antenna: Option<AntennaDoc>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PhyDoc {
    slot: Option<String>,
    sifs: Option<String>,
    difs: Option<String>,
    phy_header: Option<String>,
    control_rate_bps: Option<f64>,
    base_rate_bps: Option<f64>,
    width_factors: Option<[f64; 4]>,
    cw_min: Option<u32>,
    cw_max: Option<u32>,
    max_aggregation: Option<u32>,
    mac_header_bits: Option<u32>,
    payload_bits: Option<u32>,
    rts_bits: Option<u32>,
    cts_bits: Option<u32>,
    ack_bits: Option<u32>,
    sounding_announce: Option<String>,
    sounding_ndp: Option<String>,
    sounding_report_bits: Option<u32>,
    path_loss_1m_db: Option<f64>,
    path_loss_exponent: Option<f64>,
    noise_floor: Option<String>,
    capture_threshold_db: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProtocolDoc {
    protocol: Option<String>,
    str: Option<Switch>,
    aggregation: Option<u32>,
    piggyback: Option<Switch>,
    retry_limit: Option<u32>,
    dbca: Option<Switch>,
    ofdma: Option<CountOrOff>,
    mumimo: Option<String>,
    ul_mumimo: Option<Switch>,
    sounding_interval_ms: Option<NumberOrOff>,
    mu_rate_penalty: Option<f64>,
    buffer_staleness: Option<String>,
    warmup_fraction: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    id: String,
    /// Metres.
    position: [f64; 2],
    #[serde(skip_serializing_if = "Option::is_none")]
    antennas: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    traffic: Option<TrafficDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tx_power: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cca_threshold: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    str: Option<Switch>,
    #[serde(skip_serializing_if = "Option::is_none")]
    antenna: Option<AntennaDoc>,
}

impl NodeDoc {
    fn radio(&self) -> RadioDoc {
        RadioDoc {
            tx_power: self.tx_power.clone(),
            cca_threshold: self.cca_threshold.clone(),
            str: self.str.clone(),
            antenna: self.antenna.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WlanDoc {
    id: String,
    channels: Vec<u8>,
    primary: u8,
    ap: NodeDoc,
    #[serde(default)]
    sta: Vec<NodeDoc>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDoc {
    #[serde(skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    duration: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    radio: Option<RadioDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    phy: Option<PhyDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    protocol: Option<ProtocolDoc>,
    #[serde(default)]
    wlan: Vec<WlanDoc>,
}

fn duration_at(key: &str, v: &Option<String>, default: Nanos) -> Result<Nanos, FormatError> {
    v.as_deref().map_or(Ok(default), |s| parse_duration(s).map_err(|m| bad(key, m)))
}

fn dbm_at(key: &str, v: &Option<String>, default: f64) -> Result<f64, FormatError> {
    v.as_deref().map_or(Ok(default), |s| parse_dbm(s).map_err(|m| bad(key, m)))
}

fn radio_from(key: &str, doc: &RadioDoc, base: &RadioParams) -> Result<RadioParams, FormatError> {
    let antenna_pattern = match &doc.antenna {
        None => base.antenna_pattern,
        Some(AntennaDoc::Word(w)) if w == "omni" => AntennaPattern::Omni,
        Some(AntennaDoc::Word(w)) => return Err(bad(&format!("{key}.antenna"), format!("unknown pattern \"{w}\""))),
        Some(AntennaDoc::Sector {
            azimuth,
            beamwidth,
            gain_db,
            backlobe_db,
        }) => AntennaPattern::Sector {
            azimuth_deg: *azimuth,
            beamwidth_deg: *beamwidth,
            mainlobe_gain_db: *gain_db,
            backlobe_attenuation_db: *backlobe_db,
        },
    };
    Ok(RadioParams {
        tx_power_dbm: dbm_at(&format!("{key}.tx_power"), &doc.tx_power, base.tx_power_dbm)?,
        cca_threshold_dbm: dbm_at(&format!("{key}.cca_threshold"), &doc.cca_threshold, base.cca_threshold_dbm)?,
        str_capable: doc.str.as_ref().map_or(Ok(base.str_capable), |s| s.get(&format!("{key}.str")))?,
        antenna_pattern,
    })
}

fn radio_doc(r: &RadioParams, base: Option<&RadioParams>) -> RadioDoc {
    let differs = |f: &dyn Fn(&RadioParams) -> bool| base.is_none_or(|b| !f(b));
    RadioDoc {
        tx_power: differs(&|b| b.tx_power_dbm == r.tx_power_dbm).then(|| render_dbm(r.tx_power_dbm)),
        cca_threshold: differs(&|b| b.cca_threshold_dbm == r.cca_threshold_dbm).then(|| render_dbm(r.cca_threshold_dbm)),
        str: differs(&|b| b.str_capable == r.str_capable).then(|| Switch::of(r.str_capable)),
        antenna: differs(&|b| b.antenna_pattern == r.antenna_pattern).then(|| match r.antenna_pattern {
            AntennaPattern::Omni => AntennaDoc::Word("omni".to_string()),
            AntennaPattern::Sector {
                azimuth_deg,
                beamwidth_deg,
                mainlobe_gain_db,
                backlobe_attenuation_db,
            } => AntennaDoc::Sector {
                azimuth: azimuth_deg,
                beamwidth: beamwidth_deg,
                gain_db: mainlobe_gain_db,
                backlobe_db: backlobe_attenuation_db,
            },
        }),
    }
}

fn phy_from(doc: &PhyDoc) -> Result<PhyParams, FormatError> {
    let d = PhyParams::default();
    let p = &d.propagation;
    Ok(PhyParams {
        slot: duration_at("phy.slot", &doc.slot, d.slot)?,
        sifs: duration_at("phy.sifs", &doc.sifs, d.sifs)?,
        difs: duration_at("phy.difs", &doc.difs, d.difs)?,
        phy_header: duration_at("phy.phy_header", &doc.phy_header, d.phy_header)?,
        control_rate: doc.control_rate_bps.unwrap_or(d.control_rate),
        base_rate_20mhz_1ss: doc.base_rate_bps.unwrap_or(d.base_rate_20mhz_1ss),
        width_factors: doc.width_factors.map_or(d.width_factors, |factors| WidthFactors { factors }),
        cw_min: doc.cw_min.unwrap_or(d.cw_min),
        cw_max: doc.cw_max.unwrap_or(d.cw_max),
        max_aggregation: doc.max_aggregation.unwrap_or(d.max_aggregation),
        mac_header_bits: doc.mac_header_bits.unwrap_or(d.mac_header_bits),
        mpdu_payload_bits: doc.payload_bits.unwrap_or(d.mpdu_payload_bits),
        rts_bits: doc.rts_bits.unwrap_or(d.rts_bits),
        cts_bits: doc.cts_bits.unwrap_or(d.cts_bits),
        ack_bits: doc.ack_bits.unwrap_or(d.ack_bits),
        sounding_announce: duration_at("phy.sounding_announce", &doc.sounding_announce, d.sounding_announce)?,
        sounding_ndp: duration_at("phy.sounding_ndp", &doc.sounding_ndp, d.sounding_ndp)?,
        sounding_report_bits: doc.sounding_report_bits.unwrap_or(d.sounding_report_bits),
        propagation: PropagationModel {
            pl0_db: doc.path_loss_1m_db.unwrap_or(p.pl0_db),
            exponent: doc.path_loss_exponent.unwrap_or(p.exponent),
            noise_floor_dbm: dbm_at("phy.noise_floor", &doc.noise_floor, p.noise_floor_dbm)?,
            capture_threshold_db: doc.capture_threshold_db.unwrap_or(p.capture_threshold_db),
        },
    })
}

fn phy_doc(p: &PhyParams) -> PhyDoc {
    PhyDoc {
        slot: Some(render_duration(p.slot)),
        sifs: Some(render_duration(p.sifs)),
        difs: Some(render_duration(p.difs)),
        phy_header: Some(render_duration(p.phy_header)),
        control_rate_bps: Some(p.control_rate),
        base_rate_bps: Some(p.base_rate_20mhz_1ss),
        width_factors: Some(p.width_factors.factors),
        cw_min: Some(p.cw_min),
        cw_max: Some(p.cw_max),
        max_aggregation: Some(p.max_aggregation),
        mac_header_bits: Some(p.mac_header_bits),
        payload_bits: Some(p.mpdu_payload_bits),
        rts_bits: Some(p.rts_bits),
        cts_bits: Some(p.cts_bits),
        ack_bits: Some(p.ack_bits),
        sounding_announce: Some(render_duration(p.sounding_announce)),
        sounding_ndp: Some(render_duration(p.sounding_ndp)),
        sounding_report_bits: Some(p.sounding_report_bits),
        path_loss_1m_db: Some(p.propagation.pl0_db),
        path_loss_exponent: Some(p.propagation.exponent),
        noise_floor: Some(render_dbm(p.propagation.noise_floor_dbm)),
        capture_threshold_db: Some(p.propagation.capture_threshold_db),
    }
}

pub fn parse_protocol_name(s: &str) -> Result<AccessProtocol, String> {
    match s {
        "csma-ca" => Ok(AccessProtocol::CsmaCa),
        "csma-eca" => Ok(AccessProtocol::CsmaEca),
        _ => Err(format!("expected csma-ca or csma-eca, got \"{s}\"")),
    }
}

/// `off` or a subchannel count.
pub fn parse_ofdma(s: &str) -> Result<Option<u8>, String> {
    if s == "off" {
        return Ok(None);
    }
    s.parse::<u8>()
        .map(Some)
        .map_err(|_| format!("expected off or a subchannel count, got \"{s}\""))
}

/// `off` or `x:y:z`.
pub fn parse_mumimo(s: &str) -> Result<Option<MumimoConfig>, String> {
    if s == "off" {
        return Ok(None);
    }
    s.parse::<MumimoConfig>().map(Some).map_err(|e| e.to_string())
}

fn protocol_from(doc: &ProtocolDoc) -> Result<ProtocolConfig, FormatError> {
    let d = ProtocolConfig::default();
    let switch = |key: &str, v: &Option<Switch>, default: bool| v.as_ref().map_or(Ok(default), |s| s.get(key));
    let ofdma = match &doc.ofdma {
        None => d.ofdma,
        Some(CountOrOff::Count(n)) => {
            Some(u8::try_from(*n).map_err(|_| bad("protocol.ofdma", format!("{n} is out of range")))?)
        }
        Some(CountOrOff::Word(w)) => parse_ofdma(w).map_err(|m| bad("protocol.ofdma", m))?,
    };
    let sounding_interval = match &doc.sounding_interval_ms {
        None => d.sounding_interval,
        Some(NumberOrOff::Word(w)) if w == "off" => None,
        Some(NumberOrOff::Word(w)) => return Err(bad("protocol.sounding_interval_ms", format!("expected off or a number, got \"{w}\""))),
        Some(NumberOrOff::Number(ms)) => {
            if !(ms.is_finite() && *ms > 0.0) {
                return Err(bad("protocol.sounding_interval_ms", "must be positive"));
            }
            Some((ms * NS_PER_MS as f64).round() as Nanos)
        }
    };
    Ok(ProtocolConfig {
        protocol: doc
            .protocol
            .as_deref()
            .map_or(Ok(d.protocol), parse_protocol_name)
            .map_err(|m| bad("protocol.protocol", m))?,
        str_enabled: switch("protocol.str", &doc.str, d.str_enabled)?,
        aggregation: doc.aggregation.unwrap_or(d.aggregation),
        piggyback: switch("protocol.piggyback", &doc.piggyback, d.piggyback)?,
        retry_limit: doc.retry_limit.unwrap_or(d.retry_limit),
        dbca: switch("protocol.dbca", &doc.dbca, d.dbca)?,
        ofdma,
        mumimo: doc
            .mumimo
            .as_deref()
            .map_or(Ok(d.mumimo), parse_mumimo)
            .map_err(|m| bad("protocol.mumimo", m))?,
        ul_mumimo: switch("protocol.ul_mumimo", &doc.ul_mumimo, d.ul_mumimo)?,
        sounding_interval,
        mu_rate_penalty: doc.mu_rate_penalty.unwrap_or(d.mu_rate_penalty),
        buffer_staleness: duration_at("protocol.buffer_staleness", &doc.buffer_staleness, d.buffer_staleness)?,
        warmup_fraction: doc.warmup_fraction.unwrap_or(d.warmup_fraction),
    })
}

fn protocol_doc(p: &ProtocolConfig) -> ProtocolDoc {
    ProtocolDoc {
        protocol: Some(p.protocol.as_str().to_string()),
        str: Some(Switch::of(p.str_enabled)),
        aggregation: Some(p.aggregation),
        piggyback: Some(Switch::of(p.piggyback)),
        retry_limit: Some(p.retry_limit),
        dbca: Some(Switch::of(p.dbca)),
        ofdma: Some(p.ofdma.map_or(CountOrOff::Word("off".to_string()), |n| CountOrOff::Count(n.into()))),
        mumimo: Some(p.mumimo.map_or("off".to_string(), |m| m.to_string())),
        ul_mumimo: Some(Switch::of(p.ul_mumimo)),
        sounding_interval_ms: Some(p.sounding_interval.map_or(NumberOrOff::Word("off".to_string()), |ns| {
            NumberOrOff::Number(ns as f64 / NS_PER_MS as f64)
        })),
        mu_rate_penalty: Some(p.mu_rate_penalty),
        buffer_staleness: Some(render_duration(p.buffer_staleness)),
        warmup_fraction: Some(p.warmup_fraction),
    }
}

fn node_from(doc: &NodeDoc, role: Role, defaults: &RadioParams) -> Result<Node, FormatError> {
    let key = format!("node {}", doc.id);
    let traffic = match &doc.traffic {
        None => Traffic::Saturated,
        Some(TrafficDoc::Word(w)) if w == "saturated" => Traffic::Saturated,
        Some(TrafficDoc::Word(w)) => return Err(bad(&format!("{key}.traffic"), format!("expected \"saturated\" or bits per second, got \"{w}\""))),
        Some(TrafficDoc::Rate(r)) => Traffic::OfferedLoad(*r),
    };
    Ok(Node {
        id: doc.id.clone(),
        role,
        position: doc.position,
        radio: radio_from(&key, &doc.radio(), defaults)?,
        antennas: doc.antennas.unwrap_or(1),
        traffic,
    })
}

fn node_doc(n: &Node, defaults: &RadioParams) -> NodeDoc {
    let radio = radio_doc(&n.radio, Some(defaults));
    NodeDoc {
        id: n.id.clone(),
        position: n.position,
        antennas: (n.antennas != 1).then_some(n.antennas),
        traffic: match n.traffic {
            Traffic::Saturated => None,
            Traffic::OfferedLoad(r) => Some(TrafficDoc::Rate(r)),
        },
        tx_power: radio.tx_power,
        cca_threshold: radio.cca_threshold,
        str: radio.str,
        antenna: radio.antenna,
    }
}

/// Parses a scenario document. The result is not validated; pass it to
/// [`densewlan_core::validate`] or let the simulator reject it.
pub fn parse_scenario(text: &str) -> Result<Scenario, FormatError> {
    let doc: ScenarioDoc = toml::from_str(text)?;
    let radio_defaults = radio_from("radio", doc.radio.as_ref().unwrap_or(&RadioDoc::default()), &RadioParams::default())?;
    let wlans = doc
        .wlan
        .iter()
        .map(|w| {
            Ok(Wlan {
                id: w.id.clone(),
                ap: node_from(&w.ap, Role::Ap, &radio_defaults)?,
                stas: w
                    .sta
                    .iter()
                    .map(|s| node_from(s, Role::Sta, &radio_defaults))
                    .collect::<Result<_, FormatError>>()?,
                channels: w.channels.clone(),
                primary: w.primary,
            })
        })
        .collect::<Result<Vec<_>, FormatError>>()?;
    Ok(Scenario {
        name: doc.name.unwrap_or_else(|| "scenario".to_string()),
        duration: duration_at("duration", &doc.duration, 10 * NS_PER_S)?,
        seed: doc.seed.unwrap_or(1),
        wlans,
        radio_defaults,
        phy: phy_from(doc.phy.as_ref().unwrap_or(&PhyDoc::default()))?,
        protocol: protocol_from(doc.protocol.as_ref().unwrap_or(&ProtocolDoc::default()))?,
    })
}

/// Writes every setting explicitly; node radios list only what differs from
/// `[radio]`.
pub fn render_scenario(s: &Scenario) -> Result<String, FormatError> {
    let d = &s.radio_defaults;
    let doc = ScenarioDoc {
        name: Some(s.name.clone()),
        duration: Some(render_duration(s.duration)),
        seed: Some(s.seed),
        radio: Some(radio_doc(d, None)),
        phy: Some(phy_doc(&s.phy)),
        protocol: Some(protocol_doc(&s.protocol)),
        wlan: s
            .wlans
            .iter()
            .map(|w| WlanDoc {
                id: w.id.clone(),
                channels: w.channels.clone(),
                primary: w.primary,
                ap: node_doc(&w.ap, d),
                sta: w.stas.iter().map(|n| node_doc(n, d)).collect(),
            })
            .collect(),
    };
    Ok(toml::to_string(&doc)?)
}
