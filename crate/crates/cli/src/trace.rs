//! Event trace as CSV: one line per exchange start, frame and exchange end.

use std::io::Write;

use densewlan_core::channel::ChannelMask;
use densewlan_core::sim::{TraceEvent, TraceRecord};
use serde::Serialize;

#[derive(Serialize)]
struct Line<'a> {
    time_ns: u64,
    event: &'static str,
    exchange: u64,
    kind: &'static str,
    node: &'a str,
    peers: String,
    channels: String,
    bits: Option<u64>,
    end_ns: Option<u64>,
    success: Option<bool>,
    delivered_bits: Option<u64>,
}

fn channels(m: ChannelMask) -> String {
    m.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ")
}

/// `node_ids` maps node indices to their configured ids.
pub fn write_trace<W: Write>(trace: &[TraceRecord], node_ids: &[String], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let ids = |xs: &mut dyn Iterator<Item = usize>| xs.map(|i| node_ids[i].as_str()).collect::<Vec<_>>().join(" ");
    for r in trace {
        let line = match &r.event {
            TraceEvent::ExchangeStart {
                exchange,
                kind,
                initiator,
                peer,
                channels: ch,
            } => Line {
                time_ns: r.time,
                event: "exchange-start",
                exchange: *exchange,
                kind: kind.as_str(),
                node: &node_ids[*initiator],
                peers: ids(&mut peer.iter().copied()),
                channels: channels(*ch),
                bits: None,
                end_ns: None,
                success: None,
                delivered_bits: None,
            },
            TraceEvent::Frame {
                exchange,
                kind,
                tx,
                receivers,
                channels: ch,
                bits,
                end,
            } => Line {
                time_ns: r.time,
                event: "frame",
                exchange: *exchange,
                kind: kind.as_str(),
                node: &node_ids[*tx],
                peers: ids(&mut receivers.iter().copied()),
                channels: channels(*ch),
                bits: Some(*bits),
                end_ns: Some(*end),
                success: None,
                delivered_bits: None,
            },
            TraceEvent::ExchangeEnd {
                exchange,
                initiator,
                success,
                delivered_bits,
            } => Line {
                time_ns: r.time,
                event: "exchange-end",
                exchange: *exchange,
                kind: "",
                node: &node_ids[*initiator],
                peers: String::new(),
                channels: String::new(),
                bits: None,
                end_ns: None,
                success: Some(*success),
                delivered_bits: Some(*delivered_bits),
            },
        };
        w.serialize(line)?;
    }
    w.flush()?;
    Ok(())
}
