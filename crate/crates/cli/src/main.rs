use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::{Arc, Mutex};

use acslm_core::compensation::{average_responses, design_regularized_inverse, DEFAULT_TAPER_BAND, DEFAULT_TAPS};
use acslm_core::conformance::history::compare_time_histories;
use acslm_core::conformance::{run_suite, Profile};
use acslm_core::meter::{CalibrationState, SplMeter, SplSeries, TimeWeighting, WeightingKind};
use acslm_core::mic::{rms_for_spl, simulate_microphone, MicResponseModel, PA_PER_UNIT};
use acslm_core::response::MagnitudeResponse;
use acslm_core::sweep::{generate_sweep, magnitude_from_ir, measure_system, subtract_reference, DEFAULT_NFFT};
use acslm_core::SampleBuffer;
use acslm_nodenet::codec::Codec;
use acslm_nodenet::commands::CommandKind;
use acslm_nodenet::node::{Node, NodeConfig, PinkNoiseSource};
use acslm_nodenet::server::Server;
use acslm_nodenet::transport::{serve_tcp, TcpTransport};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "acslm", version, about = "Software sound level meter and sensor node toolkit")]
struct Cli {
    /// Seed for every random source.
    #[arg(long, global = true, env = "ACSLM_SEED", default_value_t = 1)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Conformance battery.
    #[command(subcommand)]
    Conformance(ConformanceCmd),
    /// Compensation filter design.
    #[command(subcommand)]
    Comp(CompCmd),
    /// Sound level computation.
    #[command(subcommand)]
    Spl(SplCmd),
    /// Sweep measurements.
    #[command(subcommand)]
    Sweep(SweepCmd),
    /// Simulated sensor node.
    #[command(subcommand)]
    Node(NodeCmd),
    /// Ingest server.
    #[command(subcommand)]
    Server(ServerCmd),
    /// Compare two level histories.
    Compare(CompareArgs),
}

#[derive(Subcommand)]
enum ConformanceCmd {
    Run(ConformanceRun),
}

#[derive(Args)]
struct ConformanceRun {
    #[arg(long, default_value = "ideal")]
    profile: Profile,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 44_100)]
    rate: u32,
}

#[derive(Subcommand)]
enum CompCmd {
    Design(CompDesign),
}

#[derive(Args)]
struct CompDesign {
    /// Measured response CSVs (freq_hz,level_db).
    #[arg(long, num_args = 1.., required = true)]
    responses: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TAPS)]
    taps: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 44_100)]
    rate: u32,
    /// Also write the taps as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand)]
enum SplCmd {
    Compute(SplCompute),
}

#[derive(Args)]
struct SplCompute {
    /// 16-bit mono WAV.
    #[arg(long = "in")]
    input: PathBuf,
    /// Calibrate so the reference recording reads this level.
    #[arg(long)]
    cal: Option<f64>,
    /// Calibration recording; the input itself when omitted.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Fixed calibration offset in dB, instead of `--cal`.
    #[arg(long, conflicts_with = "cal")]
    offset_db: Option<f64>,
    #[arg(long, default_value = "A")]
    weighting: WeightingKind,
    #[arg(long, default_value = "fast")]
    detector: TimeWeighting,
    #[arg(long, default_value_t = 0.125)]
    interval: f64,
    /// Series CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum SweepCmd {
    Measure(SweepMeasure),
}

#[derive(Args)]
struct SweepMeasure {
    /// Microphone response CSV to simulate the measurement through.
    #[arg(long)]
    through: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 44_100)]
    rate: u32,
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    #[arg(long, default_value_t = 1)]
    averages: usize,
    /// Drive level, full scale = 1.
    #[arg(long, default_value_t = 0.01)]
    gain: f64,
    /// Fractional-octave smoothing denominator.
    #[arg(long)]
    smoothing: Option<u32>,
    /// Include microphone self-noise.
    #[arg(long)]
    noise: bool,
}

#[derive(Subcommand)]
enum NodeCmd {
    Run(NodeRun),
}

#[derive(Args)]
struct NodeRun {
    #[arg(long)]
    minutes: usize,
    /// Server address, host:port.
    #[arg(long)]
    server: String,
    #[arg(long, default_value = "node-1")]
    node_id: String,
    #[arg(long, default_value_t = 44_100)]
    rate: u32,
    #[arg(long, default_value = "lossless")]
    codec: Codec,
    /// Keep the sealed backlog in this directory.
    #[arg(long)]
    storage: Option<PathBuf>,
    /// Approximate level of the simulated pink noise.
    #[arg(long, default_value_t = 60.0)]
    level: f64,
    #[arg(long, default_value_t = 0)]
    start_ms: i64,
}

#[derive(Subcommand)]
enum ServerCmd {
    Run(ServerRun),
    /// List stored records.
    Records(ServerRecords),
}

#[derive(Args)]
struct ServerRun {
    #[arg(long, default_value = "127.0.0.1:7878")]
    listen: String,
    #[arg(long)]
    store: PathBuf,
    /// Queue a command, NODE:flush, NODE:reboot, NODE:gain:DB or NODE:update:VERSION.
    #[arg(long = "command")]
    commands: Vec<String>,
}

#[derive(Args)]
struct ServerRecords {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    node: Option<String>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
}

fn conformance(args: ConformanceRun, seed: u64) -> Result<bool> {
    let report = run_suite(args.profile, seed, args.rate)?;
    print!("{}", report.to_table());
    if let Some(out) = &args.out {
        std::fs::write(out, report.to_json()).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(report.overall_pass)
}

fn comp_design(args: CompDesign) -> Result<()> {
    let responses = args
        .responses
        .iter()
        .map(|p| MagnitudeResponse::load(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let avg = if responses.len() == 1 {
        responses[0].normalized()
    } else {
        let (avg, stats) = average_responses(&responses)?;
        eprintln!(
            "averaged {} responses: mean std {:.3} dB, max pairwise difference {:.3} dB",
            responses.len(),
            stats.mean_std_db,
            stats.max_pairwise_diff_db
        );
        avg
    };
    let filter = design_regularized_inverse(&avg, args.taps, DEFAULT_TAPER_BAND, args.rate)?;
    let (worst_db, worst_hz) = filter.target_error(&avg, DEFAULT_TAPER_BAND);
    filter.save(&args.out)?;
    if let Some(csv) = &args.csv {
        filter.write_csv(std::fs::File::create(csv)?)?;
    }
    println!(
        "{} taps at {} Hz, worst target error {:.3} dB at {:.0} Hz, written to {}",
        filter.len(),
        args.rate,
        worst_db,
        worst_hz,
        args.out.display()
    );
    Ok(())
}

fn spl_compute(args: SplCompute) -> Result<()> {
    let input = SampleBuffer::read_wav(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let mut meter = SplMeter::new(args.weighting, input.sample_rate_hz())?
        .with_time_weighting(args.detector)
        .with_interval(args.interval);
    if let Some(target) = args.cal {
        let reference = match &args.reference {
            Some(p) => SampleBuffer::read_wav(p).with_context(|| format!("reading {}", p.display()))?,
            None => input.clone(),
        };
        let cal = meter.calibrate(&reference, target)?;
        eprintln!("calibration offset {:.3} dB", cal.offset_db);
    } else if let Some(off) = args.offset_db {
        meter = meter.with_calibration(CalibrationState::with_offset(off));
    }
    let series = meter.measure(&input)?;
    eprintln!(
        "Leq {:.2} dB, max {:.2} dB over {:.2} s",
        meter.leq(&input)?,
        series.max_level_db,
        input.duration_s()
    );
    match &args.out {
        Some(p) => series.write_csv(std::fs::File::create(p)?)?,
        None => series.write_csv(std::io::stdout().lock())?,
    }
    Ok(())
}

fn sweep_measure(args: SweepMeasure, seed: u64) -> Result<()> {
    let curve = MagnitudeResponse::load(&args.through).with_context(|| format!("reading {}", args.through.display()))?;
    let model = MicResponseModel {
        response: curve,
        seed,
        noise_enabled: args.noise,
        ..MicResponseModel::default()
    };
    model.validate()?;
    let nyquist = args.rate as f64 / 2.0;
    let sweep = generate_sweep(20.0, 20_000f64.min(nyquist), args.duration, args.rate)?;
    let dut = measure_system(&sweep, args.averages, 1.0, args.gain, |x| simulate_microphone(x, &model, None))?;
    let reference = measure_system(&sweep, 1, 1.0, args.gain, |x| Ok(x.clone()))?;
    let dut = magnitude_from_ir(&dut, DEFAULT_NFFT, args.smoothing)?;
    let reference = magnitude_from_ir(&reference, DEFAULT_NFFT, args.smoothing)?;
    let response = subtract_reference(&dut, &reference)?;
    response.save(&args.out)?;
    println!(
        "{} points {:.1}..{:.0} Hz written to {}",
        response.len(),
        response.f_min(),
        response.f_max(),
        args.out.display()
    );
    Ok(())
}

fn node_run(args: NodeRun, seed: u64) -> Result<bool> {
    let cfg = NodeConfig {
        node_id: args.node_id,
        sample_rate_hz: args.rate,
        codec: args.codec,
        start_time_ms: args.start_ms,
        storage_dir: args.storage,
        ..NodeConfig::default()
    };
    let sens = 10f64.powf(cfg.sensitivity_db_re_1v_pa / 20.0);
    let mut source = PinkNoiseSource {
        sample_rate_hz: args.rate,
        seed,
        rms: rms_for_spl(args.level) * PA_PER_UNIT * sens,
    };
    let mut node = Node::new(cfg)?;
    let mut link = TcpTransport::new(args.server);
    for minute in 0..args.minutes {
        let s = node.run_minute(&mut source, &mut link)?;
        println!(
            "minute {minute}: Leq {:.2} dBA, max {:.2} dBA, gain {:+.1} dB, pending {}",
            s.leq_dba,
            s.max_dba,
            node.gain_db(),
            node.pending()
        );
    }
    let drained = node.drain(&mut link, 3_600_000)?;
    let st = node.stats();
    println!(
        "captured {}, acked {}, rejected {}, link failures {}, pending {}",
        st.captured,
        st.acked,
        st.rejected,
        st.link_failures,
        node.pending()
    );
    Ok(drained)
}

fn parse_command(spec: &str) -> Result<(String, CommandKind)> {
    let parts: Vec<&str> = spec.split(':').collect();
    let kind = match parts.as_slice() {
        [_, "flush"] => CommandKind::Flush,
        [_, "reboot"] => CommandKind::Reboot,
        [_, "gain", db] => CommandKind::GainAdjust {
            delta_db: db.parse().with_context(|| format!("bad gain in '{spec}'"))?,
        },
        [_, "update", v] => CommandKind::Update { version: v.to_string() },
        _ => bail!("cannot parse command '{spec}'"),
    };
    Ok((parts[0].to_string(), kind))
}

fn server_run(args: ServerRun, seed: u64) -> Result<()> {
    let mut server = Server::open(&args.store, seed)?;
    for spec in &args.commands {
        let (node, kind) = parse_command(spec)?;
        let id = server.queue_command(&node, kind)?;
        eprintln!("queued command {id} for {node}");
    }
    let listener = TcpListener::bind(&args.listen).with_context(|| format!("binding {}", args.listen))?;
    eprintln!("listening on {}, store {}", listener.local_addr()?, args.store.display());
    serve_tcp(listener, Arc::new(Mutex::new(server)), Arc::new(AtomicBool::new(false)))?;
    Ok(())
}

fn server_records(args: ServerRecords, seed: u64) -> Result<()> {
    let server = Server::open(&args.store, seed)?;
    let nodes = match args.node {
        Some(n) => vec![n],
        None => server.nodes(),
    };
    println!("node_id,seq,start_time_ms,duration_ms,leq_dba,max_dba,short");
    for n in nodes {
        for r in server.records(&n) {
            println!(
                "{},{},{},{},{:.2},{:.2},{}",
                r.node_id,
                r.seq,
                r.start_time_ms,
                r.duration_ms(),
                r.leq_dba,
                r.max_dba,
                r.short
            );
        }
    }
    Ok(())
}

fn read_series(p: &Path) -> Result<SplSeries> {
    let f = std::fs::File::open(p).with_context(|| format!("reading {}", p.display()))?;
    Ok(SplSeries::read_csv(f)?)
}

fn compare(args: CompareArgs) -> Result<()> {
    let c = compare_time_histories(&read_series(&args.a)?, &read_series(&args.b)?)?;
    println!("n {}", c.n);
    println!("r_squared {:.4}", c.r_squared);
    println!("mean_diff {:.3}", c.mean_diff);
    println!("std_diff {:.3}", c.std_diff);
    println!("min_diff {:.3}", c.min_diff);
    println!("max_diff {:.3}", c.max_diff);
    println!("mean_abs_diff {:.3}", c.mean_abs_diff);
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let seed = cli.seed;
    match cli.command {
        Command::Conformance(ConformanceCmd::Run(a)) => conformance(a, seed),
        Command::Comp(CompCmd::Design(a)) => comp_design(a).map(|_| true),
        Command::Spl(SplCmd::Compute(a)) => spl_compute(a).map(|_| true),
        Command::Sweep(SweepCmd::Measure(a)) => sweep_measure(a, seed).map(|_| true),
        Command::Node(NodeCmd::Run(a)) => node_run(a, seed),
        Command::Server(ServerCmd::Run(a)) => server_run(a, seed).map(|_| true),
        Command::Server(ServerCmd::Records(a)) => server_records(a, seed).map(|_| true),
        Command::Compare(a) => compare(a).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
