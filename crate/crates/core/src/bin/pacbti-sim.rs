use std::fs;
use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::rngs::OsRng;

use pacbti_sim::assembler::{assemble, instrument, parse, InstrumentConfig};
use pacbti_sim::attestation::{challenge_response, AttestationKey, Authenticator};
use pacbti_sim::device::{DeviceConfig, DeviceDir, PostPersistPolicy, TraceEvent};
use pacbti_sim::harness::suite::{render_matrix, run_suite};
use pacbti_sim::harness::{run_scenario_with, ScenarioScript};
use pacbti_sim::machine::isa::Instruction;
use pacbti_sim::runpba::RecoveryDecision;

#[derive(Parser)]
#[command(name = "pacbti-sim", version, about = "PACBTI/TrustZone microcontroller simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Level {
    None,
    Pac,
    Bti,
    Full,
}

impl From<Level> for InstrumentConfig {
    fn from(l: Level) -> Self {
        match l {
            Level::None => InstrumentConfig::NONE,
            Level::Pac => InstrumentConfig { pac: true, bti: false },
            Level::Bti => InstrumentConfig { pac: false, bti: true },
            Level::Full => InstrumentConfig::FULL,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Hold,
    Reset,
}

#[derive(Clone, Copy, ValueEnum)]
enum Decision {
    Recover,
    Decommission,
}

#[derive(Subcommand)]
enum Cmd {
    /// Assemble a program, optionally instrumenting it.
    Asm {
        source: PathBuf,
        /// Sign and authenticate return addresses.
        #[arg(long)]
        pac: bool,
        /// Add landing pads at function entries and indirect targets.
        #[arg(long)]
        bti: bool,
        /// Write the binary image here.
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Print the instrumented source and an address listing.
        #[arg(long)]
        listing: bool,
    },
    /// Run one scenario and print its report.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Print the execution trace to stderr.
        #[arg(long)]
        trace: bool,
    },
    /// Run every scenario in a directory and print a pass/fail matrix.
    Suite { dir: PathBuf },
    /// Create a device directory with a provisioned device.
    Provision {
        dir: PathBuf,
        #[arg(long)]
        program: PathBuf,
        #[arg(long, value_enum, default_value = "full")]
        instrument: Level,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        tag_width: u32,
        #[arg(long, value_enum, default_value = "hold")]
        policy: Policy,
    },
    /// List the fault records in a device's trusted storage.
    Faults { dir: PathBuf },
    /// Serve attestation challenges for a device directory.
    Attest {
        dir: PathBuf,
        #[arg(long)]
        listen: String,
        /// Run the device this many ticks before serving.
        #[arg(long, default_value_t = 0)]
        steps: u64,
        /// Input words for the program.
        #[arg(long, value_delimiter = ',')]
        input: Vec<u32>,
        /// Challenges to answer before exiting.
        #[arg(long, default_value_t = 1)]
        count: u32,
    },
    /// Challenge a device and verify its token.
    Verify {
        #[arg(long)]
        connect: String,
        /// Hex attestation key file.
        #[arg(long)]
        key: PathBuf,
        /// Draw the nonce from the OS generator (the only supported mode).
        #[arg(long, default_value_t = true)]
        nonce_random: bool,
    },
    /// Operator decision for a compromised device.
    Recover {
        dir: PathBuf,
        #[arg(value_enum)]
        decision: Decision,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

type Res = Result<ExitCode, Box<dyn std::error::Error>>;

fn run(cli: Cli) -> Res {
    match cli.cmd {
        Cmd::Asm { source, pac, bti, output, listing } => {
            let program = parse(&fs::read_to_string(&source)?)?;
            let program = instrument(&program, InstrumentConfig { pac, bti })?;
            let image = assemble(&program)?;
            if listing {
                print!("{program}");
                let code = image.region("ns_code").expect("code region");
                for (i, w) in code.payload.iter().enumerate() {
                    let addr = code.base + i as u32;
                    let labels: Vec<&str> =
                        image.symbols.iter().filter(|(_, &a)| a == addr).map(|(n, _)| n.as_str()).collect();
                    let text = Instruction::decode(*w).map(|i| i.to_string()).unwrap_or_else(|_| format!(".word {w:#010x}"));
                    println!("{addr:#06x}  {w:08x}  {text:<24} {}", labels.join(" "));
                }
            }
            println!("code {} words, entry {:#06x}", image.code_size(), image.entry);
            if let Some(out) = output {
                fs::write(out, image.to_bytes())?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Run { scenario, report, trace } => {
            let script = ScenarioScript::load(&scenario)?;
            let (r, dev) = run_scenario_with(&script, true)?;
            if trace {
                let mut err = std::io::stderr().lock();
                for (i, e) in dev.trace.entries().iter().enumerate() {
                    writeln!(err, "{i:>8} {}", describe(e))?;
                }
            }
            let json = r.to_json();
            match report {
                Some(path) => fs::write(path, &json)?,
                None => print!("{json}"),
            }
            let failures = script.expect.check(&r);
            let breaches = pacbti_sim::harness::suite::invariant_breaches(&r, &dev);
            for f in failures.iter().chain(&breaches) {
                eprintln!("FAIL {f}");
            }
            Ok(if failures.is_empty() && breaches.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Cmd::Suite { dir } => {
            let rows = run_suite(&dir)?;
            print!("{}", render_matrix(&rows));
            let passed = rows.iter().filter(|r| r.passed()).count();
            println!("{passed}/{} passed", rows.len());
            Ok(if passed == rows.len() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Cmd::Provision { dir, program, instrument: level, seed, tag_width, policy } => {
            let p = instrument(&parse(&fs::read_to_string(&program)?)?, level.into())?;
            let policy = match policy {
                Policy::Hold => PostPersistPolicy::HoldInSpe,
                Policy::Reset => PostPersistPolicy::ResetAfterPersist,
            };
            let config = DeviceConfig { tag_width, policy, runpba: true, trace: false };
            let dd = DeviceDir::new(&dir);
            let dev = dd.provision(assemble(&p)?, config, seed)?;
            println!("provisioned {} ({:?}), key in {}", hex::encode(dev.instance_id()), dev.lifecycle, dd.key_path().display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Faults { dir } => {
            let dev = DeviceDir::new(&dir).load()?;
            println!("lifecycle {:?}, boot epoch {}", dev.lifecycle, dev.boot_epoch);
            println!("{:>6}  {:<18} {:>8} {:>6}", "seq", "kind", "fault_pc", "epoch");
            for r in dev.fault_records()? {
                println!("{:>6}  {:<18} {:#08x} {:>6}", r.sequence, format!("{:?}", r.kind), r.fault_pc, r.boot_epoch);
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Attest { dir, listen, steps, input, count } => {
            let dd = DeviceDir::new(&dir);
            let seed = dd.state()?.seed;
            let mut dev = dd.load()?;
            dev.machine.set_input(input);
            dev.run(steps)?;
            dd.save(&dev, seed)?;
            let listener = TcpListener::bind(&listen)?;
            eprintln!("listening on {}", listener.local_addr()?);
            for _ in 0..count {
                let (mut stream, peer) = listener.accept()?;
                match dev.serve(&mut stream) {
                    Ok(t) => eprintln!("{peer}: token issued, lifecycle claim {:#06x}", t.claims.lifecycle.encode()),
                    Err(e) => eprintln!("{peer}: {e}"),
                }
            }
            dd.save(&dev, seed)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Verify { connect, key, nonce_random: _ } => {
            let text = fs::read_to_string(&key)?;
            let key = AttestationKey::from_hex(text.trim()).ok_or("key file is not 64 hex digits")?;
            let mut stream = TcpStream::connect(&connect)?;
            let claims = challenge_response(&mut stream, &key as &dyn Authenticator, &mut OsRng)?;
            println!("{}", serde_json::to_string_pretty(&claims)?);
            let flagged = claims.lifecycle.runtime_failure || claims.lifecycle.runpba_malfunction;
            Ok(if flagged { ExitCode::FAILURE } else { ExitCode::SUCCESS })
        }
        Cmd::Recover { dir, decision } => {
            let dd = DeviceDir::new(&dir);
            let seed = dd.state()?.seed;
            let mut dev = dd.load()?;
            let d = match decision {
                Decision::Recover => RecoveryDecision::Recover,
                Decision::Decommission => RecoveryDecision::Decommission,
            };
            let state = dev.recover(d)?;
            dd.save(&dev, seed)?;
            println!("{state:?}");
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn describe(e: &TraceEvent) -> String {
    match e {
        TraceEvent::Exec { pc, world } => format!("exec {pc:#06x} {world}"),
        other => format!("{other:?}"),
    }
}
