use densewlan_core::channel::{
    cca_assess, dbca_assess, ChannelMask, ChannelSet, LinkTable, PropagationModel, RadioParams, Transmission,
};
use densewlan_core::engine::RandomStream;
use densewlan_core::mac::{
    build_str_pair, build_txop, sample_backoff, step_slot, BackoffMode, BackoffState, FrameExchange, Outcome,
    Phase, SlotAction, TxQueue, TxopSpec,
};
use densewlan_core::multiuser::{
    build_dl_mumimo, build_ofdma_exchange, build_ul_mumimo, ofdma_allocate, rts_prime_bits, MumimoConfig,
    OfdmaCursor,
};
use densewlan_core::scenario::{AccessProtocol, PhyParams};
use densewlan_core::Nanos;
use proptest::prelude::*;

fn widths() -> impl Strategy<Value = u8> {
    prop::sample::select(vec![1u8, 2, 4, 8])
}

fn block() -> impl Strategy<Value = ChannelSet> {
    (widths(), 0u8..8).prop_map(|(len, p)| {
        let lo = 8 - len;
        ChannelSet::block(lo, len, lo + p % len).unwrap()
    })
}

fn mask8() -> impl Strategy<Value = ChannelMask> {
    (0u64..256).prop_map(ChannelMask)
}

fn frame(id: u64, tx: usize, channels: ChannelMask, power: f64) -> Transmission {
    Transmission {
        id,
        tx,
        channels,
        start: 0,
        end: 1_000,
        power_dbm_per_channel: power,
        receivers: vec![],
        group: id,
    }
}

proptest! {
    #[test]
    fn cca_never_clears_a_busy_channel(
        positions in prop::collection::vec((0.0f64..60.0, 0.0f64..60.0), 2..7),
        frames in prop::collection::vec((0usize..6, 1u64..256, -10.0f64..23.0), 0..6),
        extra in (0usize..6, 1u64..256, -10.0f64..23.0),
        node in 0usize..6,
        str_capable in any::<bool>(),
    ) {
        let n = positions.len();
        let pos: Vec<[f64; 2]> = positions.iter().map(|&(x, y)| [x, y]).collect();
        let radios = vec![RadioParams { str_capable, ..Default::default() }; n];
        let links = LinkTable::build(&pos, &radios, &PropagationModel::default()).unwrap();
        let node = node % n;
        let mut active: Vec<Transmission> = frames
            .iter()
            .enumerate()
            .map(|(i, &(tx, m, p))| frame(i as u64, tx % n, ChannelMask(m), p))
            .collect();
        let all = ChannelMask(0xff);
        let before = cca_assess(node, &radios[node], 10, &active, &links, all, all);
        active.push(frame(99, extra.0 % n, ChannelMask(extra.1), extra.2));
        let after = cca_assess(node, &radios[node], 10, &active, &links, all, all);
        prop_assert!(before.busy.is_subset_of(after.busy));
    }

    #[test]
    fn dbca_result_is_valid_and_monotone(set in block(), idle in mask8(), more in mask8()) {
        let wider = idle.union(more);
        match dbca_assess(&set, idle) {
            Ok(r) => {
                prop_assert!(r.is_subset_of(&set));
                prop_assert!(r.contains(set.primary()));
                prop_assert!(ChannelSet::new(&r.to_vec(), r.primary()).is_ok());
                let w = dbca_assess(&set, wider).unwrap();
                prop_assert!(w.len() >= r.len());
            }
            Err(_) => prop_assert!(!idle.contains(set.primary())),
        }
    }

    #[test]
    fn ofdma_allocation_partitions_the_subchannels(
        set in block(),
        cap in widths(),
        cands in prop::collection::btree_set(1usize..40, 1..12),
        last in prop::option::of(0usize..45),
    ) {
        let cands: Vec<usize> = cands.into_iter().collect();
        let mut cursor = OfdmaCursor { last_served: last };
        let a = ofdma_allocate(&set, cap, &cands, &mut cursor).unwrap();
        let n = cap.min(set.len()) as usize;
        prop_assert_eq!(a.subchannels.len(), n);
        let mut seen = ChannelMask::EMPTY;
        for &(m, sta) in &a.subchannels {
            prop_assert!(!m.intersects(seen));
            prop_assert!(cands.contains(&sta));
            seen = seen.union(m);
        }
        prop_assert_eq!(seen, set.mask());
        // Shares differ by at most one subchannel and each share is adjacent.
        let shares: Vec<(usize, ChannelMask)> = a.per_station();
        let counts: Vec<u32> = shares.iter().map(|(_, m)| m.count() / (set.len() as u32 / n as u32)).collect();
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
        for (_, m) in shares {
            let bits = m.0 >> m.0.trailing_zeros();
            prop_assert_eq!(bits & (bits + 1), 0);
        }
    }

    #[test]
    fn rts_prime_is_affine(n in 1u32..10_000) {
        prop_assert_eq!(rts_prime_bits(n).unwrap(), 120 + 56 * n);
    }

    #[test]
    fn exchange_airtime_is_additive(
        mpdus in prop::collection::vec(1u32..65, 1..9),
        width in widths(),
        streams in 1u32..5,
        kind in 0u8..5,
        omit_ack in any::<bool>(),
    ) {
        let phy = PhyParams::default();
        let set = ChannelSet::block(0, width, 0).unwrap();
        let w = set.mask();
        let sat = TxQueue::new(true, (1..20).collect(), 0);
        let ex: FrameExchange = match kind {
            0 => build_txop(&TxopSpec { initiator: 0, dest: 1, mpdus: mpdus[0], width: w, streams, extra_bits: 0, omit_ack }, &sat, &phy).unwrap(),
            1 => build_str_pair(&TxopSpec { initiator: 0, dest: 1, mpdus: mpdus[0], width: w, streams, extra_bits: 0, omit_ack: false }, *mpdus.last().unwrap(), &phy),
            2 => {
                let cands: Vec<usize> = (1..=mpdus.len()).collect();
                let a = ofdma_allocate(&set, width, &cands, &mut OfdmaCursor::default()).unwrap();
                build_ofdma_exchange(0, &a, &|s| mpdus[s - 1], &phy).unwrap()
            }
            3 => {
                let g: Vec<(usize, u32)> = mpdus.iter().enumerate().map(|(i, &m)| (i + 1, m)).collect();
                let cfg = MumimoConfig::new(g.len() as u32 * streams, g.len() as u32, streams).unwrap();
                build_dl_mumimo(0, &cfg, &g, w, &phy, 1.0, omit_ack).unwrap()
            }
            _ => {
                let g: Vec<(usize, u32)> = mpdus.iter().enumerate().map(|(i, &m)| (i + 1, m)).collect();
                build_ul_mumimo(0, &g, streams, w, &phy, 1.0, 64).unwrap()
            }
        };
        let mut t: Nanos = 0;
        for (i, p) in ex.phases.iter().enumerate() {
            prop_assert!(p.duration() > 0);
            if i > 0 {
                t += phy.sifs;
            }
            t += p.duration();
        }
        prop_assert_eq!(ex.airtime(phy.sifs), t);
        let sum: Nanos = ex.phases.iter().map(Phase::duration).sum();
        prop_assert_eq!(ex.airtime(phy.sifs), sum + phy.sifs * (ex.phases.len() as Nanos - 1));
    }

    #[test]
    fn backoff_counter_stays_in_range(
        seed in any::<u64>(),
        steps in prop::collection::vec((any::<bool>(), 0u8..4), 1..300),
        eca in any::<bool>(),
    ) {
        let phy = PhyParams::default();
        let proto = if eca { AccessProtocol::CsmaEca } else { AccessProtocol::CsmaCa };
        let mut rng = RandomStream::new(seed, "node", "backoff");
        let mut s = BackoffState::default();
        s.counter = sample_backoff(&mut s, proto, &phy, &mut rng);
        for (busy, event) in steps {
            match s.mode {
                BackoffMode::Random => prop_assert!(s.counter < s.cw(&phy)),
                BackoffMode::Deterministic => prop_assert!(s.counter <= phy.cw_min / 2 - 1),
            }
            if s.counter == 0 || event == 3 {
                let outcome = if event % 2 == 0 { Outcome::Success } else { Outcome::Collision };
                s.on_outcome(outcome, event == 1, proto, &phy, &mut rng);
                prop_assert!(s.cw(&phy) <= phy.cw_max);
                continue;
            }
            let before = s.counter;
            match step_slot(&mut s, busy) {
                SlotAction::Freeze => prop_assert_eq!(s.counter, before),
                SlotAction::Decrement => prop_assert_eq!(s.counter, before - 1),
                SlotAction::Transmit => prop_assert_eq!(s.counter, 0),
            }
        }
    }
}
