//! Scenario engine: provisions a device, runs a program under a scripted
//! attack, takes attestation checkpoints and reports what happened.

pub mod attacks;
pub mod corpus;
pub mod overhead;
pub mod scenario;
pub mod suite;

use std::os::unix::net::UnixStream;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use thiserror::Error;

use crate::assembler::{assemble, instrument, parse, AsmError, InstrumentConfig};
use crate::attestation::{challenge_response, AttestError, Claims};
use crate::device::trace::{audit_memory, audit_no_resume, AuditViolation};
use crate::device::{Device, DeviceConfig, DeviceError, HaltReason, PostPersistPolicy};
use crate::machine::cpu::{FaultKind, UsageCause};
use crate::machine::pac::PacbtiControl;
use crate::runpba::{list_records, FaultClass, ItsStore, LifecycleState};
pub use attacks::{Attack, AttackDriver, AttackError, AttackSummary, BruteForceStats, InjectionPlan};
pub use overhead::{overhead_report, run_benign, OverheadReport};
pub use scenario::{Expectations, ScenarioScript};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Asm(#[from] AsmError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error("attack does not fit the program: {0}")]
    Scenario(#[from] AttackError),
    #[error("no halt within {0} steps")]
    NonTermination(u64),
    #[error("device stopped abnormally: {0}")]
    AbnormalHalt(String),
    #[error("scenario file: {0}")]
    Script(String),
    #[error("{path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
}

/// Fault kind as reported: the RunPBA class for invalid-state faults,
/// otherwise the architectural cause.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
pub enum ReportedFault {
    PacFault,
    BtiFault,
    OtherInvalidState,
    UndefinedInstruction,
    MemFault,
    HardFault,
}

impl ReportedFault {
    pub fn of(kind: FaultKind, class: Option<FaultClass>) -> ReportedFault {
        match (kind, class) {
            (_, Some(FaultClass::PacFault)) => ReportedFault::PacFault,
            (_, Some(FaultClass::BtiFault)) => ReportedFault::BtiFault,
            (FaultKind::UsageFault(UsageCause::InvalidState), _) => ReportedFault::OtherInvalidState,
            (FaultKind::UsageFault(UsageCause::UndefinedInstruction), _) => ReportedFault::UndefinedInstruction,
            (FaultKind::MemFault { .. }, _) => ReportedFault::MemFault,
            (FaultKind::HardFault, _) => ReportedFault::HardFault,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TokenReport {
    /// Device tick at which the challenge ran.
    pub tick: u64,
    pub claims: Option<Claims>,
    pub error: Option<String>,
}

impl TokenReport {
    /// The token tells the verifier something is wrong: a failure or
    /// malfunction bit, or feature bits that differ from the provisioned set.
    pub fn flags(&self, expected: PacbtiControl) -> bool {
        match &self.claims {
            Some(c) => c.lifecycle.runtime_failure || c.lifecycle.runpba_malfunction || c.lifecycle.control() != expected,
            None => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct InstrCounts {
    pub plain: u64,
    pub instrumented: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Exit,
    Held,
    StepLimit,
    Decommissioned,
    AttackComplete,
    Diagnostic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuditReport {
    pub no_resume: Option<String>,
    pub memory: Option<String>,
}

impl AuditReport {
    pub fn clean(&self) -> bool {
        self.no_resume.is_none() && self.memory.is_none()
    }
}

/// Result of one scenario. Field order is the serialization order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub seed: u64,
    pub attack: Attack,
    pub instrument: InstrumentConfig,
    pub policy: PostPersistPolicy,
    pub runpba: bool,
    pub secret_leaked: bool,
    pub fault_raised: bool,
    pub fault_kind: Option<ReportedFault>,
    pub fault_pc: Option<u32>,
    pub lifecycle_final: LifecycleState,
    pub boot_epoch_final: u32,
    pub fault_records: usize,
    pub tokens: Vec<TokenReport>,
    pub instr_counts: InstrCounts,
    pub detection_gap: bool,
    pub resumed_normal_flow: bool,
    pub termination: Termination,
    pub diagnostic: Option<String>,
    pub ticks: u64,
    pub output: Vec<u32>,
    pub attack_result: AttackSummary,
    pub audit: AuditReport,
    pub trace_digest: String,
}

impl ScenarioReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Runs one verifier challenge against the device over a socket pair.
pub fn checkpoint(dev: &mut Device, rng: &mut ChaCha20Rng) -> TokenReport {
    let tick = dev.ticks();
    let Some(key) = dev.attestation_key().cloned() else {
        let err = dev.attest(&[0; 32]).err().map(|e| e.to_string());
        return TokenReport { tick, claims: None, error: err };
    };
    let (mut verifier, mut device_end) = UnixStream::pair().expect("socket pair");
    let result: Result<Claims, AttestError> = std::thread::scope(|s| {
        let server = s.spawn(move || {
            let r = dev.serve(&mut device_end);
            drop(device_end);
            r
        });
        let claims = challenge_response(&mut verifier, &key, rng);
        let _ = server.join();
        claims
    });
    match result {
        Ok(c) => TokenReport { tick, claims: Some(c), error: None },
        Err(e) => TokenReport { tick, claims: None, error: Some(e.to_string()) },
    }
}

/// Runs a scenario end to end.
pub fn run_scenario(script: &ScenarioScript) -> Result<ScenarioReport, HarnessError> {
    run_scenario_with(script, true).map(|(r, _)| r)
}

/// Like `run_scenario`, also returning the device for inspection.
pub fn run_scenario_with(script: &ScenarioScript, record_trace: bool) -> Result<(ScenarioReport, Device), HarnessError> {
    let program = parse(&script.source)?;
    let image = assemble(&instrument(&program, script.instrument)?)?;
    let tag_width = match script.attack {
        Attack::PacBruteForce { tag_width, .. } => tag_width,
        _ => script.tag_width,
    };
    let config = DeviceConfig { tag_width, policy: script.policy, runpba: script.runpba, trace: record_trace };
    let mut dev = Device::provision(image, config, script.seed, ItsStore::in_memory())?;
    dev.machine.set_input(script.input.clone());
    let mut driver = AttackDriver::new(script.attack, &dev, script.seed)?;
    let mut verifier_rng = ChaCha20Rng::seed_from_u64(script.seed);
    verifier_rng.set_stream(0x7E51);
    let expected = PacbtiControl::with_features(script.instrument.pac, script.instrument.bti);

    let mut checkpoints: Vec<u64> = script.attestations.clone();
    checkpoints.sort_unstable();
    checkpoints.dedup();
    let mut next_cp = 0;
    let mut tokens = Vec::new();
    let mut hold_left: Option<u64> = None;
    let mut diagnostic = None;

    let termination = loop {
        while next_cp < checkpoints.len() && checkpoints[next_cp] <= dev.ticks() {
            tokens.push(checkpoint(&mut dev, &mut verifier_rng));
            next_cp += 1;
        }
        if let Some(reason) = dev.halted.clone() {
            if driver.on_halt(&mut dev) {
                continue;
            }
            break match reason {
                HaltReason::Exit => Termination::Exit,
                HaltReason::Decommissioned => Termination::Decommissioned,
                HaltReason::Diagnostic(d) => {
                    diagnostic = Some(d);
                    Termination::Diagnostic
                }
            };
        }
        if driver.finished() {
            break Termination::AttackComplete;
        }
        if dev.ticks() >= script.max_steps {
            break Termination::StepLimit;
        }
        driver.before_step(&mut dev);
        if !driver.manages_recovery() && dev.lifecycle == LifecycleState::NspeCompromised && dev.is_held() {
            let left = hold_left.get_or_insert(script.hold_steps);
            if *left == 0 {
                break Termination::Held;
            }
            *left -= 1;
        }
        if let Err(e) = dev.step() {
            diagnostic = Some(e.to_string());
            break Termination::Diagnostic;
        }
    };
    if script.attest_at_end {
        tokens.push(checkpoint(&mut dev, &mut verifier_rng));
    }

    let summary = driver.summary(&dev);
    let secret_leaked = driver.secret().is_some_and(|s| dev.machine.output.contains(&s));
    let first = dev.faults.first().copied();
    let counts = match run_benign(&program, &script.input, script.max_steps)
        .and_then(|p| Ok((p, run_benign(&instrument(&program, InstrumentConfig::FULL)?, &script.input, script.max_steps)?)))
    {
        Ok((p, i)) => InstrCounts { plain: p.executed, instrumented: i.executed },
        Err(_) => InstrCounts { plain: 0, instrumented: 0 },
    };
    let audit = if record_trace {
        AuditReport {
            no_resume: audit_no_resume(&dev.trace, dev.image().hold_stub).err().map(|e| e.to_string()),
            memory: audit_memory(&dev.trace, &dev.machine.memory).err().map(|e: AuditViolation| e.to_string()),
        }
    } else {
        AuditReport { no_resume: None, memory: None }
    };
    let detection_gap = summary.succeeded && !tokens.iter().any(|t| t.flags(expected));
    let report = ScenarioReport {
        name: script.name.clone(),
        seed: script.seed,
        attack: script.attack,
        instrument: script.instrument,
        policy: script.policy,
        runpba: script.runpba,
        secret_leaked,
        fault_raised: first.is_some(),
        fault_kind: first.map(|f| ReportedFault::of(f.kind, f.class)),
        fault_pc: first.map(|f| f.pc),
        lifecycle_final: dev.lifecycle,
        boot_epoch_final: dev.boot_epoch,
        fault_records: list_records(&dev.its).map(|r| r.len()).unwrap_or(0),
        tokens,
        instr_counts: counts,
        detection_gap,
        resumed_normal_flow: summary.injected && termination == Termination::Exit && first.is_none(),
        termination,
        diagnostic,
        ticks: dev.ticks(),
        output: dev.machine.output.clone(),
        attack_result: summary,
        audit,
        trace_digest: format!("{:016x}", dev.trace.digest()),
    };
    Ok((report, dev))
}
