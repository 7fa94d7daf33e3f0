//! Executed-instruction overhead of instrumentation.

use serde::Serialize;

use super::HarnessError;
use crate::assembler::{assemble, instrument, InstrumentConfig, Program};
use crate::device::{Device, DeviceConfig, HaltReason};
use crate::runpba::ItsStore;

/// Outcome of running one image to completion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BenignRun {
    pub executed: u64,
    pub output: Vec<u32>,
    pub faults: usize,
    pub code_size: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverheadReport {
    pub plain_count: u64,
    pub instrumented_count: u64,
    pub ratio: f64,
    pub plain_size: u32,
    pub instrumented_size: u32,
}

/// Runs `program` on `input` until it halts, on a fresh device.
pub fn run_benign(program: &Program, input: &[u32], max_steps: u64) -> Result<BenignRun, HarnessError> {
    let image = assemble(program)?;
    let code_size = image.code_size();
    let config = DeviceConfig { trace: false, ..DeviceConfig::default() };
    let mut dev = Device::provision(image, config, 0, ItsStore::in_memory())?;
    dev.machine.set_input(input.to_vec());
    dev.run(max_steps)?;
    match &dev.halted {
        Some(HaltReason::Exit) => {}
        Some(other) => return Err(HarnessError::AbnormalHalt(format!("{other:?}"))),
        None => return Err(HarnessError::NonTermination(max_steps)),
    }
    Ok(BenignRun { executed: dev.trace.executed(), output: dev.machine.output.clone(), faults: dev.faults.len(), code_size })
}

/// Runs the plain and fully instrumented builds of `program` on the same input.
pub fn overhead_report(program: &Program, input: &[u32], max_steps: u64) -> Result<OverheadReport, HarnessError> {
    let plain = run_benign(program, input, max_steps)?;
    let inst = run_benign(&instrument(program, InstrumentConfig::FULL)?, input, max_steps)?;
    Ok(OverheadReport {
        plain_count: plain.executed,
        instrumented_count: inst.executed,
        ratio: inst.executed as f64 / plain.executed as f64,
        plain_size: plain.code_size,
        instrumented_size: inst.code_size,
    })
}
