//! Parameter sweeps: one run per (axis value, seed), executed in parallel.

use std::fmt;
use std::str::FromStr;

use densewlan_core::scenario::Node;
use densewlan_core::{run, Nanos, Scenario, SimError, SimOptions};
use rayon::prelude::*;
use thiserror::Error;

use crate::format::{parse_dbm, parse_mumimo, parse_ofdma};
use crate::table::{report_rows, summary_rows, Row};

/// STAs added by an `n_stas` sweep sit on a ring of this radius around their
/// AP when the WLAN has no STA to copy the distance from.
const DEFAULT_RING_M: f64 = 3.0;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("unknown sweep axis \"{0}\" (expected ofdma, mumimo, cca_threshold[@WLAN], tx_power[@WLAN], aggregation or n_stas)")]
    UnknownAxis(String),
    #[error("axis {axis}: value \"{value}\": {message}")]
    BadValue { axis: String, value: String, message: String },
    #[error("axis {axis}: no WLAN \"{wlan}\"")]
    UnknownWlan { axis: String, wlan: String },
    #[error("value {value}, seed {seed}: {source}")]
    Run { value: String, seed: u64, source: SimError },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Axis {
    Ofdma,
    Mumimo,
    /// Applies to one WLAN's nodes, or to every node.
    CcaThreshold(Option<String>),
    TxPower(Option<String>),
    Aggregation,
    NStas,
}

impl FromStr for Axis {
    type Err = SweepError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (key, wlan) = match s.split_once('@') {
            Some((k, w)) => (k, Some(w.to_string())),
            None => (s, None),
        };
        let axis = match key {
            "ofdma" => Axis::Ofdma,
            "mumimo" => Axis::Mumimo,
            "cca_threshold" => Axis::CcaThreshold(wlan.clone()),
            "tx_power" => Axis::TxPower(wlan.clone()),
            "aggregation" => Axis::Aggregation,
            "n_stas" => Axis::NStas,
            _ => return Err(SweepError::UnknownAxis(s.to_string())),
        };
        match (&axis, wlan) {
            (Axis::CcaThreshold(_) | Axis::TxPower(_), _) | (_, None) => Ok(axis),
            (_, Some(_)) => Err(SweepError::UnknownAxis(s.to_string())),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let scoped = |f: &mut fmt::Formatter<'_>, k: &str, w: &Option<String>| match w {
            Some(w) => write!(f, "{k}@{w}"),
            None => f.write_str(k),
        };
        match self {
            Axis::Ofdma => f.write_str("ofdma"),
            Axis::Mumimo => f.write_str("mumimo"),
            Axis::CcaThreshold(w) => scoped(f, "cca_threshold", w),
            Axis::TxPower(w) => scoped(f, "tx_power", w),
            Axis::Aggregation => f.write_str("aggregation"),
            Axis::NStas => f.write_str("n_stas"),
        }
    }
}

/// A bare number is read as dBm.
fn power(v: &str) -> Result<f64, String> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => parse_dbm(v),
    }
}

impl Axis {
    /// Sets the swept parameter of `s` to `value`. The result is validated
    /// when it runs.
    pub fn apply(&self, s: &mut Scenario, value: &str) -> Result<(), SweepError> {
        let bad = |message: String| SweepError::BadValue {
            axis: self.to_string(),
            value: value.to_string(),
            message,
        };
        match self {
            Axis::Ofdma => s.protocol.ofdma = parse_ofdma(value).map_err(bad)?,
            Axis::Mumimo => s.protocol.mumimo = parse_mumimo(value).map_err(bad)?,
            Axis::Aggregation => {
                s.protocol.aggregation = value.parse().map_err(|_| bad("expected an MPDU count".into()))?
            }
            Axis::CcaThreshold(w) | Axis::TxPower(w) => {
                let v = power(value).map_err(bad)?;
                let cca = matches!(self, Axis::CcaThreshold(_));
                let set = |n: &mut Node| {
                    if cca {
                        n.radio.cca_threshold_dbm = v;
                    } else {
                        n.radio.tx_power_dbm = v;
                    }
                };
                match w {
                    Some(id) => {
                        let wlan = s.wlans.iter_mut().find(|x| &x.id == id).ok_or_else(|| SweepError::UnknownWlan {
                            axis: self.to_string(),
                            wlan: id.clone(),
                        })?;
                        set(&mut wlan.ap);
                        wlan.stas.iter_mut().for_each(set);
                    }
                    None => {
                        s.nodes_mut().for_each(set);
                        if cca {
                            s.radio_defaults.cca_threshold_dbm = v;
                        } else {
                            s.radio_defaults.tx_power_dbm = v;
                        }
                    }
                }
            }
            Axis::NStas => {
                let n: usize = value.parse().map_err(|_| bad("expected a station count".into()))?;
                for w in &mut s.wlans {
                    resize_stas(w, n, &s.radio_defaults);
                }
            }
        }
        Ok(())
    }
}

/// Keeps the first `n` STAs, or adds copies of the first one spread evenly
/// on a ring around the AP.
fn resize_stas(w: &mut densewlan_core::scenario::Wlan, n: usize, radio: &densewlan_core::scenario::RadioParams) {
    use densewlan_core::scenario::{Role, Traffic};
    if n <= w.stas.len() {
        w.stas.truncate(n);
        return;
    }
    let ap = w.ap.position;
    let template = w.stas.first().cloned().unwrap_or(Node {
        id: String::new(),
        role: Role::Sta,
        position: [ap[0] + DEFAULT_RING_M, ap[1]],
        radio: *radio,
        antennas: 1,
        traffic: Traffic::Saturated,
    });
    let r = {
        let d = densewlan_core::channel::distance(ap, template.position);
        if d > 0.0 {
            d
        } else {
            DEFAULT_RING_M
        }
    };
    let start = w.stas.len();
    for k in start..n {
        let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
        w.stas.push(Node {
            id: format!("{}.sta{}", w.id, k + 1),
            position: [ap[0] + r * a.cos(), ap[1] + r * a.sin()],
            ..template.clone()
        });
    }
}

pub struct SweepSpec<'a> {
    pub base: &'a Scenario,
    pub axis: Axis,
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
    /// Overrides the scenario's duration.
    pub duration: Option<Nanos>,
}

/// Runs every cell and returns rows sorted by value (in the given order),
/// then seed (in the given order), then the summary rows for that value.
pub fn sweep(spec: &SweepSpec) -> Result<Vec<Row>, SweepError> {
    let mut prepared = Vec::with_capacity(spec.values.len());
    for v in &spec.values {
        let mut s = spec.base.clone();
        spec.axis.apply(&mut s, v)?;
        if let Some(d) = spec.duration {
            s.duration = d;
        }
        prepared.push(s);
    }
    let cells: Vec<(usize, usize)> = (0..spec.values.len())
        .flat_map(|v| (0..spec.seeds.len()).map(move |k| (v, k)))
        .collect();
    let mut results: Vec<((usize, usize), Result<Vec<Row>, SweepError>)> = cells
        .par_iter()
        .map(|&(v, k)| {
            let mut s = prepared[v].clone();
            s.seed = spec.seeds[k];
            let value = &spec.values[v];
            let out = run(&s, &SimOptions::default())
                .map(|o| report_rows(value, &s.seed.to_string(), &o.report))
                .map_err(|source| SweepError::Run {
                    value: value.clone(),
                    seed: s.seed,
                    source,
                });
            ((v, k), out)
        })
        .collect();
    results.sort_by_key(|(key, _)| *key);

    let mut rows = Vec::new();
    let mut per_value: Vec<Vec<Row>> = Vec::new();
    let mut current = None;
    for ((v, _), r) in results {
        if current != Some(v) {
            if let Some(prev) = current {
                rows.extend(summary_rows(&spec.values[prev], &per_value));
            }
            per_value.clear();
            current = Some(v);
        }
        let r = r?;
        rows.extend(r.iter().cloned());
        per_value.push(r);
    }
    if let Some(prev) = current {
        rows.extend(summary_rows(&spec.values[prev], &per_value));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use densewlan_core::{builtin_scenario, BuiltinName};

    #[test]
    fn axis_names() {
        assert_eq!("ofdma".parse::<Axis>().unwrap(), Axis::Ofdma);
        assert_eq!("cca_threshold@C".parse::<Axis>().unwrap(), Axis::CcaThreshold(Some("C".into())));
        assert!("ofdma@C".parse::<Axis>().is_err());
        assert!("bandwidth".parse::<Axis>().is_err());
        assert_eq!(Axis::TxPower(Some("A".into())).to_string(), "tx_power@A");
    }

    #[test]
    fn apply_targets_one_wlan() {
        let mut s = builtin_scenario(BuiltinName::Fig2Overlap);
        Axis::CcaThreshold(Some("C".into())).apply(&mut s, "-62dBm").unwrap();
        assert_eq!(s.wlans[2].ap.radio.cca_threshold_dbm, -62.0);
        assert_eq!(s.wlans[0].ap.radio.cca_threshold_dbm, -82.0);
        let err = Axis::TxPower(Some("Z".into())).apply(&mut s, "10").unwrap_err();
        assert!(matches!(err, SweepError::UnknownWlan { .. }));
    }

    #[test]
    fn n_stas_grows_and_shrinks() {
        let mut s = builtin_scenario(BuiltinName::Fig2Overlap);
        Axis::NStas.apply(&mut s, "4").unwrap();
        assert!(s.wlans.iter().all(|w| w.stas.len() == 4));
        assert!(densewlan_core::validate(&s).is_empty());
        Axis::NStas.apply(&mut s, "0").unwrap();
        assert!(s.wlans.iter().all(|w| w.stas.is_empty()));
    }

    #[test]
    fn bad_values_are_reported() {
        let mut s = builtin_scenario(BuiltinName::Fig2Overlap);
        assert!(Axis::Ofdma.apply(&mut s, "many").is_err());
        assert!(Axis::Mumimo.apply(&mut s, "4:3:1").is_err());
        assert!(Axis::Aggregation.apply(&mut s, "-1").is_err());
    }
}
