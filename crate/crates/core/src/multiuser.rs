//! OFDMA allocation, extended RTS frames, channel sounding, MU-MIMO group
//! selection and the multi-user exchange builders.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::channel::{ChannelMask, ChannelSet};
use crate::mac::{
    aggregate_bits, control_duration, data_duration, stream_rate, Delivery, ExchangeKind, FrameExchange,
    FrameKind, Phase, PhaseTx,
};
use crate::scenario::PhyParams;
use crate::Nanos;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MultiuserError {
    ZeroCount,
    BadConfig(&'static str),
    ParseConfig,
    NoCandidates,
    InsufficientCsi { needed: usize, fresh: usize },
    GroupMismatch { group: usize, users: u32 },
    EmptyGroup,
}

impl fmt::Display for MultiuserError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MultiuserError::ZeroCount => f.write_str("count must be >= 1"),
            MultiuserError::BadConfig(m) => write!(f, "invalid mumimo config: {m}"),
            MultiuserError::ParseConfig => f.write_str("mumimo config must look like x:y:z"),
            MultiuserError::NoCandidates => f.write_str("no station has queued traffic"),
            MultiuserError::InsufficientCsi { needed, fresh } => {
                write!(f, "group of {needed} needs fresh CSI, only {fresh} available")
            }
            MultiuserError::GroupMismatch { group, users } => {
                write!(f, "group of {group} stations does not fit config with {users} users")
            }
            MultiuserError::EmptyGroup => f.write_str("group is empty"),
        }
    }
}

impl core::error::Error for MultiuserError {}

/// Extended RTS length for `n` announced subchannels or stations.
pub fn rts_prime_bits(n: u32) -> Result<u32, MultiuserError> {
    if n == 0 {
        return Err(MultiuserError::ZeroCount);
    }
    Ok(120 + 56 * n)
}

/// `x:y:z`: x spatial streams in total, y destinations, z streams each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MumimoConfig {
    pub total_streams: u32,
    pub users: u32,
    pub streams_per_user: u32,
}

impl MumimoConfig {
    pub const SU: MumimoConfig = MumimoConfig {
        total_streams: 1,
        users: 1,
        streams_per_user: 1,
    };

    pub fn new(x: u32, y: u32, z: u32) -> Result<Self, MultiuserError> {
        let c = Self {
            total_streams: x,
            users: y,
            streams_per_user: z,
        };
        c.check().map(|_| c)
    }

    pub fn check(&self) -> Result<(), MultiuserError> {
        if self.users == 0 || self.streams_per_user == 0 {
            return Err(MultiuserError::BadConfig("y and z must be >= 1"));
        }
        if self.total_streams != self.users * self.streams_per_user {
            return Err(MultiuserError::BadConfig("x must equal y*z"));
        }
        Ok(())
    }

    /// Checks the config against the AP and destination antenna counts.
    pub fn check_antennas(&self, ap_antennas: u32, sta_antennas: &[u32]) -> Result<(), MultiuserError> {
        self.check()?;
        if self.total_streams > ap_antennas {
            return Err(MultiuserError::BadConfig("x exceeds AP antennas"));
        }
        if sta_antennas.iter().any(|&a| self.streams_per_user > a) {
            return Err(MultiuserError::BadConfig("z exceeds station antennas"));
        }
        Ok(())
    }
}

impl fmt::Display for MumimoConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.total_streams, self.users, self.streams_per_user)
    }
}

impl FromStr for MumimoConfig {
    type Err = MultiuserError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut it = s.trim().split(':').map(|p| p.trim().parse::<u32>());
        match (it.next(), it.next(), it.next(), it.next()) {
            (Some(Ok(x)), Some(Ok(y)), Some(Ok(z)), None) => MumimoConfig::new(x, y, z),
            _ => Err(MultiuserError::ParseConfig),
        }
    }
}

/// Subchannels of one OFDMA transmission and the station each one serves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OfdmaAllocation {
    pub subchannels: Vec<(ChannelMask, usize)>,
}

impl OfdmaAllocation {
    pub fn n_tx(&self) -> u32 {
        self.subchannels.len() as u32
    }

    /// Stations in order of their first subchannel, with the union of their
    /// subchannels.
    pub fn per_station(&self) -> Vec<(usize, ChannelMask)> {
        let mut out: Vec<(usize, ChannelMask)> = Vec::new();
        for &(m, sta) in &self.subchannels {
            match out.iter_mut().find(|(s, _)| *s == sta) {
                Some((_, acc)) => *acc = acc.union(m),
                None => out.push((sta, m)),
            }
        }
        out
    }

    pub fn mask(&self) -> ChannelMask {
        self.subchannels
            .iter()
            .fold(ChannelMask::EMPTY, |acc, &(m, _)| acc.union(m))
    }
}

/// Round-robin position kept by each AP across OFDMA allocations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OfdmaCursor {
    pub last_served: Option<usize>,
}

/// Splits `available` into `min(cap, width)` equal subchannels and hands them
/// out cyclically, starting after the last served station. When stations are
/// fewer than subchannels, the earliest ones get one extra each; every
/// station's subchannels are adjacent.
pub fn ofdma_allocate(
    available: &ChannelSet,
    cap: u8,
    candidates: &[usize],
    cursor: &mut OfdmaCursor,
) -> Result<OfdmaAllocation, MultiuserError> {
    if candidates.is_empty() {
        return Err(MultiuserError::NoCandidates);
    }
    if cap == 0 {
        return Err(MultiuserError::ZeroCount);
    }
    let n = cap.min(available.len());
    let subs = available.split(n).ok_or(MultiuserError::BadConfig("subchannel count"))?;
    let c = candidates.len();
    let start = match cursor.last_served {
        Some(last) => candidates.iter().position(|&s| s > last).unwrap_or(0),
        None => 0,
    };
    let n = n as usize;
    let served = n.min(c);
    let mut k = 0;
    let mut subchannels = Vec::with_capacity(n);
    for i in 0..served {
        let count = n / served + usize::from(i < n % served);
        let sta = candidates[(start + i) % c];
        for _ in 0..count {
            subchannels.push((subs[k], sta));
            k += 1;
        }
    }
    cursor.last_served = Some(candidates[(start + served - 1) % c]);
    Ok(OfdmaAllocation { subchannels })
}

fn frame(kind: FrameKind, tx: usize, receivers: Vec<usize>, channels: ChannelMask, duration: Nanos, bits: u64) -> PhaseTx {
    PhaseTx {
        kind,
        tx,
        receivers,
        channels,
        duration,
        bits,
        deliveries: Vec::new(),
    }
}

fn ctrl(phy: &PhyParams, kind: FrameKind, tx: usize, rx: Vec<usize>, ch: ChannelMask, bits: u32) -> PhaseTx {
    frame(kind, tx, rx, ch, control_duration(phy, bits), u64::from(bits))
}

fn delivery(phy: &PhyParams, rx: usize, mpdus: u32) -> Delivery {
    Delivery {
        rx,
        mpdus,
        payload_bits: u64::from(mpdus) * u64::from(phy.mpdu_payload_bits),
    }
}

/// Downlink OFDMA: RTS' over the whole width, one CTS per station on its
/// subchannels, parallel DATA and parallel ACKs. `mpdus` gives the aggregate
/// size for each station of the allocation.
pub fn build_ofdma_exchange(
    ap: usize,
    alloc: &OfdmaAllocation,
    mpdus: &dyn Fn(usize) -> u32,
    phy: &PhyParams,
) -> Result<FrameExchange, MultiuserError> {
    let stations = alloc.per_station();
    if stations.is_empty() {
        return Err(MultiuserError::NoCandidates);
    }
    let width = alloc.mask();
    let stas: Vec<usize> = stations.iter().map(|&(s, _)| s).collect();
    let rts = ctrl(phy, FrameKind::RtsPrime, ap, stas.clone(), width, rts_prime_bits(alloc.n_tx())?);
    let cts = stations
        .iter()
        .map(|&(s, m)| ctrl(phy, FrameKind::Cts, s, vec![ap], m, phy.cts_bits))
        .collect();
    let data = stations
        .iter()
        .map(|&(s, m)| {
            let n = mpdus(s);
            let bits = aggregate_bits(phy, n);
            let mut t = frame(FrameKind::Data, ap, vec![s], m, data_duration(phy, bits, stream_rate(phy, m), 1), bits);
            t.deliveries.push(delivery(phy, s, n));
            t
        })
        .collect();
    let acks = stations
        .iter()
        .map(|&(s, m)| ctrl(phy, FrameKind::Ack, s, vec![ap], m, phy.ack_bits))
        .collect();
    Ok(FrameExchange {
        kind: ExchangeKind::Ofdma,
        initiator: ap,
        joint_peer: None,
        width,
        phases: vec![Phase::single(rts), Phase { txs: cts }, Phase { txs: data }, Phase { txs: acks }],
    })
}

pub fn report_duration(phy: &PhyParams) -> Nanos {
    control_duration(phy, phy.sounding_report_bits)
}

/// Announcement plus NDP, then one SIFS and report per sounded station.
pub fn sounding_overhead(n_stas: u32, phy: &PhyParams) -> Result<Nanos, MultiuserError> {
    if n_stas == 0 {
        return Err(MultiuserError::ZeroCount);
    }
    Ok(phy.sounding_announce + phy.sounding_ndp + u64::from(n_stas) * (phy.sifs + report_duration(phy)))
}

/// Sounding phases: the announcement and NDP back to back, then the reports
/// one after another.
pub fn sounding_phases(ap: usize, stas: &[usize], width: ChannelMask, phy: &PhyParams) -> Vec<Phase> {
    let mut phases = vec![Phase::single(frame(
        FrameKind::Announce,
        ap,
        stas.to_vec(),
        width,
        phy.sounding_announce + phy.sounding_ndp,
        0,
    ))];
    for &s in stas {
        phases.push(Phase::single(ctrl(phy, FrameKind::Report, s, vec![ap], width, phy.sounding_report_bits)));
    }
    phases
}

/// Channel knowledge the AP holds about one station.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiRecord {
    pub sta: usize,
    pub timestamp: Nanos,
    /// Linear SNR, > 0.
    pub quality: f64,
    /// Unit vector, one entry per AP antenna.
    pub signature: Vec<f64>,
}

fn abs_dot(a: &[f64], b: &[f64]) -> f64 {
    libm::fabs(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

/// Greedy grouping: start from the best station, then keep adding the one
/// whose worst correlation with the chosen set is lowest. Ties go to the
/// station whose quality is closest to the group mean, then to input order.
pub fn select_group(csi: &[CsiRecord], y: usize) -> Result<Vec<usize>, MultiuserError> {
    if y == 0 {
        return Err(MultiuserError::ZeroCount);
    }
    if csi.len() < y {
        return Err(MultiuserError::InsufficientCsi {
            needed: y,
            fresh: csi.len(),
        });
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(y);
    let first = (0..csi.len())
        .fold(0, |best, i| if csi[i].quality > csi[best].quality { i } else { best });
    chosen.push(first);
    while chosen.len() < y {
        let mean = chosen.iter().map(|&i| csi[i].quality).sum::<f64>() / chosen.len() as f64;
        let mut best: Option<(f64, f64, usize)> = None;
        for i in (0..csi.len()).filter(|i| !chosen.contains(i)) {
            let corr = chosen
                .iter()
                .map(|&j| abs_dot(&csi[i].signature, &csi[j].signature))
                .fold(0.0, f64::max);
            let gap = libm::fabs(csi[i].quality - mean);
            let better = match best {
                None => true,
                Some((bc, bg, _)) => corr < bc || (corr == bc && gap < bg),
            };
            if better {
                best = Some((corr, gap, i));
            }
        }
        if let Some((_, _, i)) = best {
            chosen.push(i);
        }
    }
    Ok(chosen.into_iter().map(|i| csi[i].sta).collect())
}

/// Downlink MU-MIMO: optional sounding, RTS to the group, parallel CTS, one
/// multi-stream DATA frame and sequential ACKs. `group` pairs each station
/// with its aggregate size.
pub fn build_dl_mumimo(
    ap: usize,
    cfg: &MumimoConfig,
    group: &[(usize, u32)],
    width: ChannelMask,
    phy: &PhyParams,
    rate_penalty: f64,
    sound: bool,
) -> Result<FrameExchange, MultiuserError> {
    cfg.check()?;
    if group.is_empty() {
        return Err(MultiuserError::EmptyGroup);
    }
    if group.len() > cfg.users as usize {
        return Err(MultiuserError::GroupMismatch {
            group: group.len(),
            users: cfg.users,
        });
    }
    let stas: Vec<usize> = group.iter().map(|&(s, _)| s).collect();
    let mut phases = Vec::new();
    if sound && stas.len() > 1 {
        phases.extend(sounding_phases(ap, &stas, width, phy));
    }
    phases.push(Phase::single(ctrl(phy, FrameKind::Rts, ap, stas.clone(), width, phy.rts_bits)));
    phases.push(Phase {
        txs: stas
            .iter()
            .map(|&s| ctrl(phy, FrameKind::Cts, s, vec![ap], width, phy.cts_bits))
            .collect(),
    });
    let streams = group.len() as u32 * cfg.streams_per_user;
    let per_stream = stream_rate(phy, width) * libm::pow(rate_penalty, f64::from(streams - 1));
    let max_bits = group.iter().map(|&(_, n)| aggregate_bits(phy, n)).max().unwrap_or(0);
    let mut data = frame(
        FrameKind::Data,
        ap,
        stas.clone(),
        width,
        data_duration(phy, max_bits, per_stream, cfg.streams_per_user),
        group.iter().map(|&(_, n)| aggregate_bits(phy, n)).sum(),
    );
    data.deliveries = group.iter().map(|&(s, n)| delivery(phy, s, n)).collect();
    phases.push(Phase::single(data));
    for &s in &stas {
        phases.push(Phase::single(ctrl(phy, FrameKind::Ack, s, vec![ap], width, phy.ack_bits)));
    }
    Ok(FrameExchange {
        kind: ExchangeKind::DlMumimo,
        initiator: ap,
        joint_peer: None,
        width,
        phases,
    })
}

/// Uplink MU-MIMO: RTS'' naming the group, the stations transmit together,
/// then the AP acknowledges each in turn. A station with nothing queued sends
/// padding and delivers no payload.
pub fn build_ul_mumimo(
    ap: usize,
    group: &[(usize, u32)],
    streams_per_user: u32,
    width: ChannelMask,
    phy: &PhyParams,
    rate_penalty: f64,
    agg: u32,
) -> Result<FrameExchange, MultiuserError> {
    if group.is_empty() {
        return Err(MultiuserError::EmptyGroup);
    }
    let stas: Vec<usize> = group.iter().map(|&(s, _)| s).collect();
    let streams = group.len() as u32 * streams_per_user;
    let per_stream = stream_rate(phy, width) * libm::pow(rate_penalty, f64::from(streams - 1));
    let longest = group.iter().map(|&(_, n)| n).max().unwrap_or(0).max(1).min(agg.max(1));
    let dur = data_duration(phy, aggregate_bits(phy, longest), per_stream, streams_per_user);
    let mut phases = vec![Phase::single(ctrl(
        phy,
        FrameKind::RtsPrime,
        ap,
        stas.clone(),
        width,
        rts_prime_bits(group.len() as u32)?,
    ))];
    phases.push(Phase {
        txs: group
            .iter()
            .map(|&(s, n)| {
                let n = n.min(agg);
                let mut t = frame(FrameKind::Data, s, vec![ap], width, dur, aggregate_bits(phy, longest));
                t.deliveries.push(delivery(phy, ap, n));
                t
            })
            .collect(),
    });
    for &s in &stas {
        phases.push(Phase::single(ctrl(phy, FrameKind::Ack, ap, vec![s], width, phy.ack_bits)));
    }
    Ok(FrameExchange {
        kind: ExchangeKind::UlMumimo,
        initiator: ap,
        joint_peer: None,
        width,
        phases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mac::{build_txop, TxQueue, TxopSpec};
    use alloc::string::ToString;

    fn phy() -> PhyParams {
        PhyParams::default()
    }

    #[test]
    fn rts_prime_examples() {
        assert_eq!(rts_prime_bits(1), Ok(176));
        assert_eq!(rts_prime_bits(8), Ok(568));
        assert!(rts_prime_bits(2).unwrap() < 2 * rts_prime_bits(1).unwrap());
        assert_eq!(rts_prime_bits(0), Err(MultiuserError::ZeroCount));
        for n in 1..200 {
            assert_eq!(rts_prime_bits(n + 1).unwrap() - rts_prime_bits(n).unwrap(), 56);
        }
    }

    #[test]
    fn mumimo_config_parse_and_check() {
        assert_eq!("16:4:4".parse::<MumimoConfig>(), MumimoConfig::new(16, 4, 4));
        assert!("16:4:3".parse::<MumimoConfig>().is_err());
        assert!("16:4".parse::<MumimoConfig>().is_err());
        let c = MumimoConfig::new(16, 16, 1).unwrap();
        assert_eq!(c.to_string(), "16:16:1");
        assert!(c.check_antennas(8, &[1]).is_err());
        assert!(MumimoConfig::new(4, 2, 2).unwrap().check_antennas(4, &[1, 2]).is_err());
        assert!(c.check_antennas(16, &[1; 16]).is_ok());
    }

    fn counts(a: &OfdmaAllocation) -> Vec<usize> {
        a.per_station()
            .iter()
            .map(|&(s, _)| a.subchannels.iter().filter(|&&(_, x)| x == s).count())
            .collect()
    }

    #[test]
    fn ofdma_eight_over_three() {
        let set = ChannelSet::block(0, 8, 0).unwrap();
        let mut c = OfdmaCursor::default();
        let a = ofdma_allocate(&set, 8, &[10, 11, 12], &mut c).unwrap();
        assert_eq!(counts(&a), vec![3, 3, 2]);
        assert_eq!(a.n_tx(), 8);
    }

    #[test]
    fn ofdma_single_station_takes_all() {
        let set = ChannelSet::block(0, 4, 0).unwrap();
        let a = ofdma_allocate(&set, 4, &[5], &mut OfdmaCursor::default()).unwrap();
        assert_eq!(a.per_station(), vec![(5, set.mask())]);
    }

    #[test]
    fn ofdma_cursor_rotates() {
        let set = ChannelSet::block(0, 2, 0).unwrap();
        let mut c = OfdmaCursor { last_served: Some(1) };
        let a = ofdma_allocate(&set, 2, &[1, 2, 3], &mut c).unwrap();
        assert_eq!(a.subchannels[0].1, 2);
        assert_eq!(c.last_served, Some(3));
        assert!(ofdma_allocate(&set, 2, &[], &mut c).is_err());
    }

    #[test]
    fn ofdma_single_subchannel_costs_sixteen_rts_bits_more() {
        let p = phy();
        let set = ChannelSet::block(0, 8, 0).unwrap();
        let a = ofdma_allocate(&set, 1, &[1], &mut OfdmaCursor::default()).unwrap();
        let ofdma = build_ofdma_exchange(0, &a, &|_| 8, &p).unwrap();
        let su = build_txop(
            &TxopSpec {
                initiator: 0,
                dest: 1,
                mpdus: 8,
                width: set.mask(),
                streams: 1,
                extra_bits: 0,
                omit_ack: false,
            },
            &TxQueue::new(true, vec![1], 0),
            &p,
        )
        .unwrap();
        let extra = control_duration(&p, p.rts_bits + 16) - control_duration(&p, p.rts_bits);
        assert_eq!(ofdma.airtime(p.sifs), su.airtime(p.sifs) + extra);
    }

    #[test]
    fn ofdma_data_phase_waits_for_slowest() {
        let p = phy();
        let set = ChannelSet::block(0, 2, 0).unwrap();
        let a = ofdma_allocate(&set, 2, &[1, 2], &mut OfdmaCursor::default()).unwrap();
        let ex = build_ofdma_exchange(0, &a, &|s| if s == 1 { 2 } else { 8 }, &p).unwrap();
        let d = &ex.phases[2];
        assert_eq!(d.duration(), d.txs.iter().map(|t| t.duration).max().unwrap());
        assert!(d.txs[0].duration < d.txs[1].duration);
    }

    #[test]
    fn sounding_is_affine() {
        let p = phy();
        let one = sounding_overhead(1, &p).unwrap();
        assert_eq!(one, p.sounding_announce + p.sounding_ndp + p.sifs + report_duration(&p));
        let slope = p.sifs + report_duration(&p);
        for n in 1..20 {
            assert_eq!(sounding_overhead(n + 1, &p).unwrap() - sounding_overhead(n, &p).unwrap(), slope);
        }
        let stas = [1, 2, 3];
        let phases = sounding_phases(0, &stas, ChannelMask::single(0), &p);
        let total: Nanos = phases.iter().map(Phase::duration).sum::<Nanos>() + p.sifs * 3;
        assert_eq!(total, sounding_overhead(3, &p).unwrap());
    }

    fn rec(sta: usize, quality: f64, sig: &[f64]) -> CsiRecord {
        CsiRecord {
            sta,
            timestamp: 0,
            quality,
            signature: sig.to_vec(),
        }
    }

    #[test]
    fn orthogonal_group_has_zero_correlation() {
        let csi = [
            rec(1, 5.0, &[1.0, 0.0, 0.0]),
            rec(2, 4.0, &[0.0, 1.0, 0.0]),
            rec(3, 3.0, &[0.0, 0.0, 1.0]),
        ];
        assert_eq!(select_group(&csi, 2).unwrap(), vec![1, 2]);
        assert_eq!(select_group(&csi, 3).unwrap().len(), 3);
        assert!(select_group(&csi, 4).is_err());
    }

    #[test]
    fn identical_signatures_never_paired_when_avoidable() {
        let s = libm::sqrt(0.5);
        let sigs: [&[f64]; 4] = [&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[s, s]];
        // Every quality ordering of the four stations.
        let qualities = [[4.0, 3.0, 2.0, 1.0], [3.0, 4.0, 1.0, 2.0], [1.0, 2.0, 3.0, 4.0], [2.0, 1.0, 4.0, 3.0]];
        for q in qualities {
            let csi: Vec<CsiRecord> = (0..4).map(|i| rec(i, q[i], sigs[i])).collect();
            let g = select_group(&csi, 2).unwrap();
            assert!(!(g.contains(&0) && g.contains(&1)), "{g:?}");
        }
    }

    #[test]
    fn one_one_one_matches_single_user() {
        let p = phy();
        let w = ChannelMask::single(0);
        let mu = build_dl_mumimo(0, &MumimoConfig::SU, &[(1, 8)], w, &p, 1.0, true).unwrap();
        let su = build_txop(
            &TxopSpec {
                initiator: 0,
                dest: 1,
                mpdus: 8,
                width: w,
                streams: 1,
                extra_bits: 0,
                omit_ack: false,
            },
            &TxQueue::new(true, vec![1], 0),
            &p,
        )
        .unwrap();
        assert_eq!(mu.airtime(p.sifs), su.airtime(p.sifs));
        assert_eq!(mu.payload_bits(), su.payload_bits());
    }

    #[test]
    fn ack_count_follows_users() {
        let p = phy();
        let w = ChannelMask::single(0);
        let count_acks = |ex: &FrameExchange| {
            ex.phases.iter().filter(|ph| ph.txs[0].kind == FrameKind::Ack).count()
        };
        let g16: Vec<(usize, u32)> = (1..=16).map(|s| (s, 1)).collect();
        let g4: Vec<(usize, u32)> = (1..=4).map(|s| (s, 1)).collect();
        let a = build_dl_mumimo(0, &MumimoConfig::new(16, 16, 1).unwrap(), &g16, w, &p, 1.0, false).unwrap();
        let b = build_dl_mumimo(0, &MumimoConfig::new(16, 4, 4).unwrap(), &g4, w, &p, 1.0, false).unwrap();
        assert_eq!((count_acks(&a), count_acks(&b)), (16, 4));
        assert!(build_dl_mumimo(0, &MumimoConfig::new(4, 4, 1).unwrap(), &g16, w, &p, 1.0, false).is_err());
    }

    #[test]
    fn uplink_group_shape() {
        let p = phy();
        let w = ChannelMask::single(0);
        let one = build_ul_mumimo(0, &[(1, 4)], 1, w, &p, 1.0, 8).unwrap();
        assert_eq!(one.phases[0].txs[0].bits, 176);
        let four = build_ul_mumimo(0, &[(1, 4), (2, 4), (3, 0), (4, 4)], 1, w, &p, 1.0, 8).unwrap();
        assert_eq!(four.phases.len(), 1 + 1 + 4);
        assert_eq!(four.phases[1].txs.len(), 4);
        assert_eq!(four.payload_bits(), 12 * 12_000);
        assert_eq!(build_ul_mumimo(0, &[], 1, w, &p, 1.0, 8), Err(MultiuserError::EmptyGroup));
    }
}
