//! Raw tallies, their reduction to reports, and the contention-free
//! throughput oracle.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::scenario::PhyParams;
use crate::Nanos;

/// Counters for one node over the measurement window.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NodeMetrics {
    pub attempts: u64,
    pub successes: u64,
    pub collisions: u64,
    /// Payload bits this node delivered as transmitter.
    pub delivered_bits: u64,
    /// Payload bits this node received.
    pub received_bits: u64,
    pub airtime_ns: u64,
    pub drops: u64,
    /// Payload bits that arrived at the queue (offered-load nodes only).
    pub offered_bits: u64,
}

/// Occupancy of the medium as a whole: time with no exchange in progress,
/// time with at least one, and the overlap beyond the first.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MediumMetrics {
    pub idle_ns: u64,
    pub busy_ns: u64,
    pub excess_ns: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsRaw {
    pub window_ns: Nanos,
    pub node_ids: Vec<String>,
    pub wlan_ids: Vec<String>,
    /// WLAN index of each node.
    pub wlan_of: Vec<usize>,
    /// Whether each node is an AP.
    pub is_ap: Vec<bool>,
    pub nodes: Vec<NodeMetrics>,
    pub medium: MediumMetrics,
    pub events_fired: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeReport {
    pub id: String,
    pub wlan: usize,
    pub throughput_bps: f64,
    pub collision_prob: f64,
    pub airtime_share: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WlanReport {
    pub id: String,
    pub throughput_bps: f64,
    pub collision_prob: f64,
    pub airtime_share: f64,
    /// Fairness of the service (bits sent plus received) across the WLAN's
    /// stations.
    pub jain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub window_ns: Nanos,
    pub nodes: Vec<NodeReport>,
    pub wlans: Vec<WlanReport>,
    pub throughput_bps: f64,
    pub collision_prob: f64,
    pub airtime_share: f64,
    /// Fairness of throughput across WLANs.
    pub jain: f64,
}

impl Report {
    pub fn wlan(&self, id: &str) -> Option<&WlanReport> {
        self.wlans.iter().find(|w| w.id == id)
    }
}

/// Jain's index. An empty or all-zero input counts as perfectly fair.
pub fn jain(xs: &[f64]) -> f64 {
    let sum: f64 = xs.iter().sum();
    let sq: f64 = xs.iter().map(|x| x * x).sum();
    if xs.is_empty() || sq == 0.0 {
        return 1.0;
    }
    sum * sum / (xs.len() as f64 * sq)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn reduce(raw: &MetricsRaw) -> Report {
    let secs = raw.window_ns as f64 / 1e9;
    let rate = |bits: u64| if secs > 0.0 { bits as f64 / secs } else { 0.0 };
    let nodes = raw
        .nodes
        .iter()
        .enumerate()
        .map(|(i, m)| NodeReport {
            id: raw.node_ids[i].clone(),
            wlan: raw.wlan_of[i],
            throughput_bps: rate(m.delivered_bits),
            collision_prob: ratio(m.collisions, m.attempts),
            airtime_share: ratio(m.airtime_ns, raw.window_ns),
        })
        .collect();

    let sum_over = |pick: &dyn Fn(usize) -> bool| {
        raw.nodes
            .iter()
            .enumerate()
            .filter(|(i, _)| pick(*i))
            .fold(NodeMetrics::default(), |mut acc, (_, m)| {
                acc.attempts += m.attempts;
                acc.collisions += m.collisions;
                acc.delivered_bits += m.delivered_bits;
                acc.airtime_ns += m.airtime_ns;
                acc
            })
    };

    let wlans: Vec<WlanReport> = raw
        .wlan_ids
        .iter()
        .enumerate()
        .map(|(w, id)| {
            let m = sum_over(&|i| raw.wlan_of[i] == w);
            let service: Vec<f64> = raw
                .nodes
                .iter()
                .enumerate()
                .filter(|&(i, _)| raw.wlan_of[i] == w && !raw.is_ap[i])
                .map(|(_, n)| (n.delivered_bits + n.received_bits) as f64)
                .collect();
            WlanReport {
                id: id.clone(),
                throughput_bps: rate(m.delivered_bits),
                collision_prob: ratio(m.collisions, m.attempts),
                airtime_share: ratio(m.airtime_ns, raw.window_ns),
                jain: jain(&service),
            }
        })
        .collect();

    let all = sum_over(&|_| true);
    let per_wlan: Vec<f64> = wlans.iter().map(|w| w.throughput_bps).collect();
    Report {
        window_ns: raw.window_ns,
        nodes,
        throughput_bps: rate(all.delivered_bits),
        collision_prob: ratio(all.collisions, all.attempts),
        airtime_share: ratio(all.airtime_ns, raw.window_ns),
        jain: jain(&per_wlan),
        wlans,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleError {
    /// The closed form only covers a single contention-free transmitter.
    ContendersOutOfScope(u32),
    BadWidth(u32),
    ZeroCount,
}

impl fmt::Display for OracleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleError::ContendersOutOfScope(n) => {
                write!(f, "oracle covers a single transmitter, got {n} contenders")
            }
            OracleError::BadWidth(w) => write!(f, "width must be 1, 2, 4 or 8 basic channels, got {w}"),
            OracleError::ZeroCount => f.write_str("streams and aggregation must be >= 1"),
        }
    }
}

impl core::error::Error for OracleError {}

/// Saturation throughput in bits/s of a lone transmitter using RTS/CTS:
/// payload over DIFS, mean backoff, RTS, CTS, DATA, ACK and three SIFS.
/// Frame durations are computed here in floating point, independently of the
/// integer-nanosecond airtime code used by the simulator.
pub fn analytic_saturation_throughput(
    phy: &PhyParams,
    width_channels: u32,
    streams: u32,
    aggregation: u32,
    n_contenders: u32,
) -> Result<f64, OracleError> {
    if n_contenders != 1 {
        return Err(OracleError::ContendersOutOfScope(n_contenders));
    }
    if streams == 0 || aggregation == 0 {
        return Err(OracleError::ZeroCount);
    }
    let factor = phy
        .width_factors
        .for_channels(width_channels)
        .ok_or(OracleError::BadWidth(width_channels))?;
    let s = |ns: Nanos| ns as f64 * 1e-9;
    let header = s(phy.phy_header);
    let ctrl = |bits: u32| header + f64::from(bits) / phy.control_rate;
    let rate = phy.base_rate_20mhz_1ss * factor * f64::from(streams);
    let data_bits = f64::from(aggregation) * f64::from(phy.mac_header_bits + phy.mpdu_payload_bits);
    let mean_backoff = (f64::from(phy.cw_min) - 1.0) / 2.0;
    let cycle = s(phy.difs)
        + mean_backoff * s(phy.slot)
        + ctrl(phy.rts_bits)
        + ctrl(phy.cts_bits)
        + header
        + data_bits / rate
        + ctrl(phy.ack_bits)
        + 3.0 * s(phy.sifs);
    Ok(f64::from(aggregation) * f64::from(phy.mpdu_payload_bits) / cycle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    #[test]
    fn jain_examples() {
        assert_eq!(jain(&[3.0, 3.0, 3.0]), 1.0);
        assert_eq!(jain(&[5.0, 0.0]), 0.5);
        assert_eq!(jain(&[0.0, 0.0]), 1.0);
        assert_eq!(jain(&[]), 1.0);
    }

    #[test]
    fn zero_attempts_reduce_to_zero() {
        let raw = MetricsRaw {
            window_ns: 1_000_000_000,
            node_ids: vec!["a".to_string()],
            wlan_ids: vec!["w".to_string()],
            wlan_of: vec![0],
            is_ap: vec![true],
            nodes: vec![NodeMetrics::default()],
            ..Default::default()
        };
        let r = reduce(&raw);
        assert_eq!(r.nodes[0].collision_prob, 0.0);
        assert_eq!(r.nodes[0].throughput_bps, 0.0);
    }

    #[test]
    fn reduce_sums_per_wlan() {
        let m = |bits, att, col| NodeMetrics {
            delivered_bits: bits,
            attempts: att,
            collisions: col,
            successes: att - col,
            ..Default::default()
        };
        let raw = MetricsRaw {
            window_ns: 2_000_000_000,
            node_ids: ["a", "b", "c"].iter().map(|s| s.to_string()).collect(),
            wlan_ids: vec!["w0".to_string(), "w1".to_string()],
            wlan_of: vec![0, 0, 1],
            is_ap: vec![true, false, true],
            nodes: vec![m(4_000, 4, 1), m(2_000, 4, 3), m(6_000, 2, 0)],
            ..Default::default()
        };
        let r = reduce(&raw);
        assert_eq!(r.wlans[0].throughput_bps, 3_000.0);
        assert_eq!(r.wlans[0].collision_prob, 0.5);
        assert_eq!(r.throughput_bps, 6_000.0);
        assert_eq!(r.jain, 1.0);
    }

    #[test]
    fn oracle_hand_cycle() {
        let p = PhyParams::default();
        let t = analytic_saturation_throughput(&p, 1, 1, 1, 1).unwrap();
        // 34 + 67.5 + 46.667 + 44.667 + 229.046 + 44.667 + 48 = 514.547 us
        let cycle_us: f64 = 34.0 + 67.5 + (40.0 + 160.0 / 24.0) + 2.0 * (40.0 + 112.0 / 24.0) + 40.0 + 12288.0 / 65.0 + 48.0;
        assert!((cycle_us - 514.547).abs() < 1e-3);
        assert!((t - 12_000.0 / (cycle_us * 1e-6)).abs() < 1e-6);
        assert!((t / 1e6 - 23.32).abs() < 0.01);
    }

    #[test]
    fn oracle_limits_and_ratios() {
        let p = PhyParams::default();
        let t20 = analytic_saturation_throughput(&p, 1, 1, 8, 1).unwrap();
        let t40 = analytic_saturation_throughput(&p, 2, 1, 8, 1).unwrap();
        assert!(t40 / t20 < 2.1 && t40 > t20);
        let big = analytic_saturation_throughput(&p, 1, 1, 1_000_000, 1).unwrap();
        let phy_rate = 65e6 * 12_000.0 / 12_288.0;
        assert!((big - phy_rate).abs() / phy_rate < 1e-3);
        assert_eq!(
            analytic_saturation_throughput(&p, 1, 1, 1, 2),
            Err(OracleError::ContendersOutOfScope(2))
        );
        assert_eq!(analytic_saturation_throughput(&p, 3, 1, 1, 1), Err(OracleError::BadWidth(3)));
    }
}
