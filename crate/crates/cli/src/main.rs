use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use densewlan::format::{parse_duration, render_scenario};
use densewlan::sweep::{sweep, Axis, SweepSpec};
use densewlan::table::{report_rows, write_csv};
use densewlan::trace::write_trace;
use densewlan::{create, load_builtin, load_file, Error};
use densewlan_core::metrics::analytic_saturation_throughput;
use densewlan_core::scenario::PhyParams;
use densewlan_core::{run, Nanos, Report, Scenario, SimOptions};

#[derive(Parser)]
#[command(name = "densewlan", version, about = "Discrete-event simulator for dense 802.11ax deployments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Source {
    /// Scenario file (TOML).
    #[arg(long, value_name = "FILE")]
    scenario: Option<PathBuf>,
    /// Built-in scenario: fig2-overlap, stadium-toy, train-toy, apartment-toy.
    #[arg(long, value_name = "NAME")]
    builtin: Option<String>,
}

impl Source {
    fn load(&self) -> Result<Scenario, Error> {
        match (&self.scenario, &self.builtin) {
            (Some(p), _) => load_file(p),
            (_, Some(b)) => load_builtin(b),
            _ => Err(Error::Config("give --scenario or --builtin".into())),
        }
    }
}

fn duration_arg(s: &str) -> Result<Nanos, String> {
    parse_duration(s)
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and print per-WLAN results.
    Run {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        seed: Option<u64>,
        /// Simulated time, e.g. 10s or 500ms.
        #[arg(long, value_parser = duration_arg)]
        duration: Option<Nanos>,
        /// Write the event trace as CSV.
        #[arg(long, value_name = "PATH")]
        trace: Option<PathBuf>,
        /// Write per-node, per-WLAN and total rows as CSV.
        #[arg(long, value_name = "PATH")]
        csv: Option<PathBuf>,
    },
    /// Run a scenario for every combination of axis value and seed.
    Sweep {
        #[command(flatten)]
        source: Source,
        /// ofdma, mumimo, cca_threshold[@WLAN], tx_power[@WLAN], aggregation or n_stas.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        values: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        seeds: Vec<u64>,
        #[arg(long, value_parser = duration_arg)]
        duration: Option<Nanos>,
        #[arg(long, value_name = "PATH")]
        csv: PathBuf,
    },
    /// Closed-form saturation throughput of a lone transmitter.
    Oracle {
        /// Channel width in MHz: 20, 40, 80 or 160.
        #[arg(long)]
        width: u32,
        #[arg(long, default_value_t = 1)]
        streams: u32,
        #[arg(long, default_value_t = 1)]
        agg: u32,
    },
    /// Print a scenario in file form.
    Show {
        #[command(flatten)]
        source: Source,
    },
}

fn print_report(s: &Scenario, r: &Report) {
    println!(
        "{} seed {} window {:.3} s",
        s.name,
        s.seed,
        r.window_ns as f64 / 1e9
    );
    println!("{:<12} {:>14} {:>10} {:>9} {:>7}", "wlan", "Mb/s", "coll.prob", "airtime", "jain");
    for w in &r.wlans {
        println!(
            "{:<12} {:>14.3} {:>10.4} {:>9.4} {:>7.4}",
            w.id,
            w.throughput_bps / 1e6,
            w.collision_prob,
            w.airtime_share,
            w.jain
        );
    }
    println!(
        "{:<12} {:>14.3} {:>10.4} {:>9.4} {:>7.4}",
        "total",
        r.throughput_bps / 1e6,
        r.collision_prob,
        r.airtime_share,
        r.jain
    );
}

fn execute(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Run {
            source,
            seed,
            duration,
            trace,
            csv,
        } => {
            let mut s = source.load()?;
            if let Some(k) = seed {
                s.seed = k;
            }
            if let Some(d) = duration {
                s.duration = d;
            }
            let out = run(
                &s,
                &SimOptions {
                    trace: trace.is_some(),
                    ..Default::default()
                },
            )?;
            print_report(&s, &out.report);
            if let Some(p) = trace {
                write_trace(&out.trace, &out.raw.node_ids, create(&p)?)?;
            }
            if let Some(p) = csv {
                write_csv(&report_rows("", &s.seed.to_string(), &out.report), create(&p)?)?;
            }
        }
        Command::Sweep {
            source,
            axis,
            values,
            seeds,
            duration,
            csv,
        } => {
            let base = source.load()?;
            let axis: Axis = axis.parse()?;
            let rows = sweep(&SweepSpec {
                base: &base,
                axis,
                values,
                seeds,
                duration,
            })?;
            write_csv(&rows, create(&csv)?)?;
        }
        Command::Oracle { width, streams, agg } => {
            let channels = match width {
                20 => 1,
                40 => 2,
                80 => 4,
                160 => 8,
                _ => return Err(Error::Config(format!("width must be 20, 40, 80 or 160 MHz, got {width}"))),
            };
            let t = analytic_saturation_throughput(&PhyParams::default(), channels, streams, agg, 1)
                .map_err(|e| Error::Config(e.to_string()))?;
            println!("{t:.0} bit/s ({:.3} Mb/s)", t / 1e6);
        }
        Command::Show { source } => {
            let s = source.load()?;
            let text = render_scenario(&s)?;
            std::io::stdout().write_all(text.as_bytes()).map_err(|e| Error::Io {
                path: "stdout".into(),
                source: e,
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
