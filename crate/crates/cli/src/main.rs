use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::Ordering;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tagrelay::cloud::CloudServer;
use tagrelay::net::{wall_clock, ServerHandle};
use tagrelay::presets::{ExperimentPreset, Preset};
use tagrelay::relay::{read_capture_log, ClockMode, RelayClient, RelayServer, Role};
use tagrelay::time::parse_duration;
use tagrelay::{
    decode_advertisement, derive_epoch_keypair, encode_advertisement, Advertisement, CloudStore, KeyId, MasterSecret,
    RelayState, ReplayCommand, RotationPolicy, Scenario, TagStatus, Timestamp,
};

#[derive(Parser)]
#[command(name = "tagrelay", version, about = "Offline-finding relay attack simulator and testbed")]
struct Cli {
    /// Seed for the simulation RNG.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Log debug output to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario or preset and write the event log as CSV.
    Sim(SimArgs),
    /// Run the cloud store or relay server until interrupted.
    Serve(ServeArgs),
    /// Derive epoch keys from a master secret.
    Keys(KeysArgs),
    /// Encode or decode advertisement frames.
    Adv {
        #[command(subcommand)]
        op: AdvOp,
    },
    /// Act as a relay node: collector, emitter or controller.
    Node {
        #[command(subcommand)]
        role: NodeRole,
    },
}

#[derive(Args)]
struct SimArgs {
    /// Scenario JSON file.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    scenario: Option<PathBuf>,
    /// One of relay-basic, key-rotation, local-override, replay-lifetime, alternation.
    #[arg(long)]
    preset: Option<String>,
    /// Preset parameter override, KEY=VALUE (distance, interval, poll).
    #[arg(long = "set", value_name = "KEY=VALUE", requires = "preset")]
    set: Vec<String>,
    /// Virtual end time, e.g. 3600, 36h, 10d. Defaults to the preset's horizon.
    #[arg(long)]
    until: Option<String>,
    /// Output path; stdout when omitted or "-".
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ServeRole {
    Cloud,
    Relay,
}

#[derive(Args)]
struct ServeArgs {
    role: ServeRole,
    #[arg(long, default_value = "127.0.0.1:7400")]
    listen: String,
    /// Append-only journal; replayed on start.
    #[arg(long)]
    journal: Option<PathBuf>,
    /// Relay only: time advances only on `advance` requests.
    #[arg(long = "virtual")]
    virtual_clock: bool,
}

#[derive(Args)]
struct KeysArgs {
    /// 32-byte master secret, hex.
    #[arg(long)]
    secret: String,
    /// Epoch or inclusive range, e.g. 3 or 0..2.
    #[arg(long, default_value = "0")]
    epoch: String,
    #[arg(long, default_value = "0")]
    pairing_time: String,
    #[arg(long, default_value = "86400")]
    period: String,
}

#[derive(Subcommand)]
enum AdvOp {
    /// Build a frame from a 32-byte public key.
    Encode {
        key: String,
        #[arg(long, value_enum, default_value_t = StatusArg::Lost)]
        status: StatusArg,
        #[arg(long)]
        battery_low: bool,
    },
    /// Parse a 34-byte frame.
    Decode { frame: String },
}

#[derive(Clone, Copy, ValueEnum)]
enum StatusArg {
    Lost,
    Connected,
}

#[derive(Subcommand)]
enum NodeRole {
    /// Send a JSONL capture log to the relay; prints one beacon per line.
    Collector {
        #[arg(long)]
        relay: String,
        #[arg(long)]
        id: String,
        /// Capture log path; stdin when "-".
        #[arg(long)]
        capture: PathBuf,
    },
    /// Print emit frames pushed by the relay.
    Emitter {
        #[arg(long)]
        relay: String,
        #[arg(long)]
        id: String,
        /// Exit after this many frames.
        #[arg(long)]
        count: Option<u64>,
    },
    /// Schedule, stop or advance replays.
    Control {
        #[arg(long)]
        relay: String,
        #[command(subcommand)]
        op: ControlOp,
    },
}

#[derive(Subcommand)]
enum ControlOp {
    Schedule {
        #[arg(long)]
        beacon: u64,
        #[arg(long)]
        emitter: String,
        #[arg(long)]
        start: String,
        #[arg(long)]
        interval: String,
        #[arg(long)]
        repeat: Option<u64>,
    },
    Stop {
        #[arg(long)]
        emitter: Option<String>,
        #[arg(long)]
        beacon: Option<u64>,
    },
    /// Virtual-mode relays only.
    Advance { to: String },
}

/// Exit 2 for bad input, 1 for runtime failures.
enum Failure {
    Input(anyhow::Error),
    Runtime(anyhow::Error),
}

type CmdResult = Result<(), Failure>;

trait InputErr<T> {
    fn input(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> InputErr<T> for Result<T, E> {
    fn input(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Input(e.into()))
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { log::LevelFilter::Debug } else { log::LevelFilter::Warn };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();

    let result = match cli.command {
        Command::Sim(args) => sim(args, cli.seed),
        Command::Serve(args) => serve(args),
        Command::Keys(args) => keys(args),
        Command::Adv { op } => adv(op),
        Command::Node { role } => node(role),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain()
        .filter_map(|c| c.downcast_ref::<io::Error>())
        .any(|e| e.kind() == io::ErrorKind::BrokenPipe)
}

fn duration(s: &str) -> Result<u64, Failure> {
    parse_duration(s).input()
}

fn sim(args: SimArgs, seed: u64) -> CmdResult {
    let (scenario, default_until) = match (&args.scenario, &args.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read {}", path.display()))
                .input()?;
            let scenario = Scenario::from_json(&text)
                .with_context(|| path.display().to_string())
                .input()?;
            (scenario, None)
        }
        (None, Some(name)) => {
            let preset: Preset = name.parse().map_err(|e: String| Failure::Input(anyhow!(e)))?;
            let mut parameters = BTreeMap::new();
            for kv in &args.set {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Failure::Input(anyhow!("--set expects KEY=VALUE, got {kv:?}")))?;
                parameters.insert(k.trim().to_owned(), v.trim().to_owned());
            }
            let scenario = ExperimentPreset { preset, parameters }.expand().input()?;
            (scenario, Some(preset.default_until()))
        }
        (None, None) => unreachable!("clap requires one of --scenario/--preset"),
    };
    let until = match (&args.until, default_until) {
        (Some(u), _) => duration(u)?,
        (None, Some(d)) => d,
        (None, None) => return Err(Failure::Input(anyhow!("--until is required with --scenario"))),
    };
    let log = tagrelay::sim::run(&scenario, seed, until).input()?;
    match args.out.as_deref() {
        Some(p) if p.as_os_str() != "-" => {
            let f = File::create(p).with_context(|| format!("cannot create {}", p.display()))?;
            let mut w = BufWriter::new(f);
            log.write_csv(&mut w)?;
            w.flush()?;
            log::info!("wrote {} rows to {}", log.len(), p.display());
        }
        _ => {
            let mut w = BufWriter::new(io::stdout().lock());
            log.write_csv(&mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn serve(args: ServeArgs) -> CmdResult {
    let handle: ServerHandle = match args.role {
        ServeRole::Cloud => {
            if args.virtual_clock {
                return Err(Failure::Input(anyhow!("--virtual applies to the relay only")));
            }
            let store = match &args.journal {
                Some(p) => CloudStore::open(p).with_context(|| format!("cannot open journal {}", p.display()))?,
                None => CloudStore::new(),
            };
            log::info!("cloud store loaded {} reports", store.len());
            CloudServer::spawn(&args.listen, store.into_shared(), wall_clock())
                .with_context(|| format!("cannot listen on {}", args.listen))?
        }
        ServeRole::Relay => {
            let state = match &args.journal {
                Some(p) => RelayState::open(p).with_context(|| format!("cannot open journal {}", p.display()))?,
                None => RelayState::new(),
            };
            log::info!("relay loaded {} beacons", state.beacons().len());
            let mode = if args.virtual_clock { ClockMode::Virtual } else { ClockMode::Live(wall_clock()) };
            RelayServer::spawn(&args.listen, state, mode).with_context(|| format!("cannot listen on {}", args.listen))?
        }
    };
    println!("listening on {}", handle.local_addr());
    io::stdout().flush()?;
    let flag = handle.shutdown_flag();
    ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)).context("cannot install signal handler")?;
    handle.wait();
    eprintln!("shut down");
    Ok(())
}

fn parse_epochs(s: &str) -> Result<(u64, u64), Failure> {
    let bad = || Failure::Input(anyhow!("bad epoch range {s:?}; expected N or A..B"));
    let (a, b) = match s.split_once("..") {
        Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
        None => {
            let n = s.trim().parse().map_err(|_| bad())?;
            (n, n)
        }
    };
    if a > b {
        return Err(bad());
    }
    Ok((a, b))
}

fn keys(args: KeysArgs) -> CmdResult {
    let bytes = hex::decode(args.secret.trim()).context("secret is not hex").input()?;
    let pairing: Timestamp = duration(&args.pairing_time)?;
    let secret = MasterSecret::from_slice(&bytes, pairing).input()?;
    let policy = RotationPolicy::new(duration(&args.period)?).input()?;
    let (first, last) = parse_epochs(&args.epoch)?;
    let mut out = io::stdout().lock();
    for epoch in first..=last {
        let kp = derive_epoch_keypair(&secret, epoch);
        writeln!(
            out,
            "epoch={epoch} start={} public={} key_id={}",
            policy.epoch_start(pairing, epoch),
            kp.public_key.to_hex(),
            KeyId::from(&kp.public_key).to_hex()
        )?;
    }
    Ok(())
}

fn adv(op: AdvOp) -> CmdResult {
    match op {
        AdvOp::Encode { key, status, battery_low } => {
            let key = hex::decode(key.trim()).context("key is not hex").input()?;
            let status = TagStatus { lost: matches!(status, StatusArg::Lost), battery_low };
            let adv = encode_advertisement(&key, status).input()?;
            println!("{}", adv.to_hex());
        }
        AdvOp::Decode { frame } => {
            let adv = Advertisement::from_hex(frame.trim()).input()?;
            let (key, status) = decode_advertisement(&adv).input()?;
            println!(
                "key={} status={} battery_low={}",
                key.to_hex(),
                if status.lost { "lost" } else { "connected" },
                status.battery_low
            );
        }
    }
    Ok(())
}

fn node(role: NodeRole) -> CmdResult {
    match role {
        NodeRole::Collector { relay, id, capture } => {
            let msgs = if capture.as_os_str() == "-" {
                read_capture_log(io::stdin().lock())
            } else {
                let f = File::open(&capture).with_context(|| format!("cannot read {}", capture.display())).input()?;
                read_capture_log(BufReader::new(f))
            }
            .with_context(|| format!("bad capture log {}", capture.display()))
            .input()?;
            let mut client = RelayClient::connect(&relay, Role::Collector, &id)?;
            let mut out = io::stdout().lock();
            for mut msg in msgs {
                msg.collector_id = id.clone();
                match client.observe(msg) {
                    Ok(b) => writeln!(
                        out,
                        "beacon={} first_seen={} seen_count={}",
                        b.beacon_id, b.first_seen, b.seen_count
                    )?,
                    Err(e) => writeln!(out, "rejected: {e}")?,
                }
            }
        }
        NodeRole::Emitter { relay, id, count } => {
            let mut client = RelayClient::connect(&relay, Role::Emitter, &id)?;
            let mut out = io::stdout().lock();
            let mut n = 0;
            while count.is_none_or(|c| n < c) {
                let f = client.next_emit()?;
                writeln!(out, "at={} schedule={} beacon={} adv={}", f.at, f.schedule_id, f.beacon_id, hex::encode(&f.advertisement))?;
                out.flush()?;
                n += 1;
            }
        }
        NodeRole::Control { relay, op } => {
            let mut client = RelayClient::connect(&relay, Role::Controller, "cli")?;
            match op {
                ControlOp::Schedule { beacon, emitter, start, interval, repeat } => {
                    let cmd = ReplayCommand {
                        beacon_id: beacon,
                        emitter_id: emitter,
                        start_at: duration(&start)?,
                        interval: duration(&interval)?,
                        repeat,
                    };
                    let id = client.schedule(cmd).input()?;
                    println!("schedule={id}");
                }
                ControlOp::Stop { emitter, beacon } => {
                    if emitter.is_none() && beacon.is_none() {
                        return Err(Failure::Input(anyhow!("stop needs --emitter and/or --beacon")));
                    }
                    println!("stopped={}", client.stop(emitter.as_deref(), beacon)?);
                }
                ControlOp::Advance { to } => {
                    println!("emitted={}", client.advance(duration(&to)?).input()?);
                }
            }
        }
    }
    Ok(())
}
