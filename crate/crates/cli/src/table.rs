//! Result rows and their CSV form.
//!
//! Each run contributes one row per node, one per WLAN (node `*`) and one for
//! the whole network (WLAN and node `*`). Sweeps add `mean` and `stddev` rows
//! in the seed column for every axis value.

use std::io::Write;

use densewlan_core::Report;
use serde::Serialize;

pub const ALL: &str = "*";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub axis_value: String,
    pub seed: String,
    pub wlan_id: String,
    pub node_id: String,
    pub throughput_bps: f64,
    pub collision_prob: f64,
    pub airtime_share: f64,
    /// Empty for node rows.
    pub jain: Option<f64>,
}

/// Rows for one run in canonical order: for each WLAN its aggregate then its
/// nodes, and the network total last.
pub fn report_rows(axis_value: &str, seed: &str, report: &Report) -> Vec<Row> {
    let row = |wlan: &str, node: &str, t: f64, c: f64, a: f64, j: Option<f64>| Row {
        axis_value: axis_value.to_string(),
        seed: seed.to_string(),
        wlan_id: wlan.to_string(),
        node_id: node.to_string(),
        throughput_bps: t,
        collision_prob: c,
        airtime_share: a,
        jain: j,
    };
    let mut out = Vec::with_capacity(report.nodes.len() + report.wlans.len() + 1);
    for (w, wr) in report.wlans.iter().enumerate() {
        out.push(row(&wr.id, ALL, wr.throughput_bps, wr.collision_prob, wr.airtime_share, Some(wr.jain)));
        for n in report.nodes.iter().filter(|n| n.wlan == w) {
            out.push(row(&wr.id, &n.id, n.throughput_bps, n.collision_prob, n.airtime_share, None));
        }
    }
    out.push(row(
        ALL,
        ALL,
        report.throughput_bps,
        report.collision_prob,
        report.airtime_share,
        Some(report.jain),
    ));
    out
}

/// Sample mean and standard deviation (zero for a single sample).
pub fn mean_stddev(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `mean` and `stddev` rows over runs that share an axis value. Every run must
/// have produced the same row layout.
pub fn summary_rows(axis_value: &str, runs: &[Vec<Row>]) -> Vec<Row> {
    let Some(first) = runs.first() else {
        return Vec::new();
    };
    let mut mean_rows = Vec::with_capacity(first.len());
    let mut sd_rows = Vec::with_capacity(first.len());
    for (i, proto) in first.iter().enumerate() {
        let col = |f: &dyn Fn(&Row) -> f64| -> (f64, f64) {
            let xs: Vec<f64> = runs.iter().map(|r| f(&r[i])).collect();
            mean_stddev(&xs)
        };
        let t = col(&|r| r.throughput_bps);
        let c = col(&|r| r.collision_prob);
        let a = col(&|r| r.airtime_share);
        let j = proto.jain.map(|_| col(&|r| r.jain.unwrap_or(0.0)));
        let make = |seed: &str, pick: fn((f64, f64)) -> f64| Row {
            axis_value: axis_value.to_string(),
            seed: seed.to_string(),
            wlan_id: proto.wlan_id.clone(),
            node_id: proto.node_id.clone(),
            throughput_bps: pick(t),
            collision_prob: pick(c),
            airtime_share: pick(a),
            jain: j.map(pick),
        };
        mean_rows.push(make("mean", |p| p.0));
        sd_rows.push(make("stddev", |p| p.1));
    }
    mean_rows.extend(sd_rows);
    mean_rows
}

pub fn write_csv<W: Write>(rows: &[Row], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
