use std::path::{Path, PathBuf};

use pacbti_sim::assembler::{assemble, instrument, parse, InstrumentConfig};
use pacbti_sim::device::{Device, DeviceConfig};
use pacbti_sim::harness::corpus::{self, BENIGN, ECHO_INPUT};
use pacbti_sim::harness::suite::{render_matrix, run_one, run_suite};
use pacbti_sim::harness::{
    overhead_report, run_scenario, Attack, AttackDriver, AttackError, ReportedFault, ScenarioScript, Termination,
};
use pacbti_sim::runpba::{ItsStore, LifecycleState};

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/scenarios")
}

fn load(name: &str) -> ScenarioScript {
    ScenarioScript::load(&scenarios().join(format!("{name}.toy"))).unwrap()
}

fn device(src: &str, cfg: InstrumentConfig) -> Device {
    let image = assemble(&instrument(&parse(src).unwrap(), cfg).unwrap()).unwrap();
    Device::provision(image, DeviceConfig::default(), 0, ItsStore::in_memory()).unwrap()
}

#[test]
fn reports_are_byte_identical_across_runs() {
    for name in ["rop_protected", "fop_caught", "pac_reuse"] {
        let script = load(name);
        let a = run_scenario(&script).unwrap().to_json();
        let b = run_scenario(&script).unwrap().to_json();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn rop_target_is_the_saved_return_address_of_echo() {
    // Oracle: in a clean run, echo's PUSH {r4, r5, lr} puts lr directly
    // below the entry stack pointer.
    let mut dev = device(corpus::ECHO_SERVICE, InstrumentConfig::NONE);
    dev.machine.set_input(ECHO_INPUT.to_vec());
    let echo = dev.symbol("echo").unwrap();
    while !(dev.in_ns_thread() && dev.machine.regs.pc == echo) {
        dev.step().unwrap();
    }
    let slot = dev.machine.regs.sp_ns - 1;
    dev.step().unwrap();
    assert_eq!(dev.machine.memory.peek(slot), dev.symbol("echo_return"));

    let report = run_scenario(&load("rop_plain")).unwrap();
    assert_eq!(report.attack_result.target_slot, Some(slot));
    assert!(report.secret_leaked);
    assert!(report.resumed_normal_flow);
}

#[test]
fn protected_rop_faults_at_the_aut_of_echo() {
    let report = run_scenario(&load("rop_protected")).unwrap();
    assert_eq!(report.fault_kind, Some(ReportedFault::PacFault));
    assert_eq!(report.lifecycle_final, LifecycleState::NspeCompromised);
    assert_eq!(report.termination, Termination::Held);
    let dev = device(corpus::ECHO_SERVICE, InstrumentConfig::FULL);
    let echo = dev.symbol("echo").unwrap();
    let next = dev.symbol("stash").unwrap();
    let pc = report.fault_pc.unwrap();
    assert!((echo..next).contains(&pc));
    assert!(report.tokens.iter().filter(|t| t.tick > 200).all(|t| t.claims.unwrap().lifecycle.runtime_failure));
}

#[test]
fn attacks_reject_programs_without_their_shape() {
    let fib = corpus::benign("fib_recursive").unwrap();
    let dev = device(fib.source, InstrumentConfig::FULL);
    for attack in [Attack::RopReturn, Attack::BtiForwardEdge] {
        let err = AttackDriver::new(attack, &dev, 0).err().unwrap();
        assert!(matches!(err, AttackError::GadgetNotFound(_) | AttackError::Mismatch { .. }), "{err}");
    }
    for attack in [Attack::PacReuse, Attack::FopDisablePacbti { window: [1, 2] }, Attack::PacBruteForce { attempts: 1, tag_width: 8 }] {
        assert!(matches!(AttackDriver::new(attack, &dev, 0), Err(AttackError::Mismatch { .. })));
    }
    assert!(AttackDriver::new(Attack::None, &dev, 0).is_ok());
}

#[test]
fn reuse_attack_goes_undetected() {
    let r = run_scenario(&load("pac_reuse")).unwrap();
    assert!(r.attack_result.succeeded);
    assert!(!r.fault_raised);
    assert!(r.detection_gap);
    assert_eq!(r.lifecycle_final, LifecycleState::Secured);
}

#[test]
fn unprivileged_dispatcher_cannot_disable_pacbti() {
    let r = run_scenario(&load("fop_unprivileged")).unwrap();
    assert!(!r.attack_result.succeeded);
    assert_eq!(r.attack_result.error.as_deref(), Some("gadget ran unprivileged: MSR faulted"));
}

#[test]
fn full_width_tags_are_not_forged() {
    let r = run_scenario(&load("brute_force_w32")).unwrap();
    let stats = r.attack_result.brute_force.unwrap();
    assert_eq!(stats.attempts, 2000);
    assert_eq!(stats.successes, 0);
    assert_eq!(r.boot_epoch_final, 2000);
    assert_eq!(r.fault_records, 2000);
}

#[test]
fn overhead_of_an_empty_main() {
    let p = parse(corpus::benign("empty_main").unwrap().source).unwrap();
    let o = overhead_report(&p, &[], 1_000).unwrap();
    // Prelude call and HALT around main's RET; PACBTI and AUT on top.
    assert_eq!((o.plain_count, o.instrumented_count), (5, 7));
    assert_eq!(o.instrumented_size - o.plain_size, 2);
}

#[test]
fn recursion_carries_the_highest_overhead() {
    let ratios: Vec<(&str, f64)> = BENIGN
        .iter()
        .map(|p| (p.name, overhead_report(&parse(p.source).unwrap(), p.input, 1_000_000).unwrap().ratio))
        .collect();
    let top = ratios.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    assert_eq!(top.0, "fib_recursive", "{ratios:?}");
    assert!(ratios.iter().all(|(_, r)| *r >= 1.0));
}

#[test]
fn failed_expectations_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(corpus_path("empty_main.s"), dir.path().join("p.s")).unwrap();
    let path = dir.path().join("wrong.toy");
    std::fs::write(&path, "name = \"wrong\"\nprogram = \"p.s\"\nseed = 1\n[expect]\nfault_raised = true\noutput = [1]\n").unwrap();
    let row = run_one(&path);
    assert!(!row.passed());
    assert_eq!(row.expectation_failures.len(), 2, "{:?}", row.expectation_failures);
    let m = render_matrix(&[row]);
    assert!(m.contains("FAIL") && m.contains("fault_raised"));
}

#[test]
fn missing_program_is_an_error_row() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.toy");
    std::fs::write(&path, "name = \"x\"\nprogram = \"nope.s\"\nseed = 1\n").unwrap();
    let rows = run_suite(dir.path()).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].result.is_err());
    assert!(render_matrix(&rows).contains("error"));
}

#[test]
fn shipped_suite_passes() {
    let rows = run_suite(&scenarios()).unwrap();
    let failing: Vec<String> = rows.iter().filter(|r| !r.passed()).map(|r| format!("{r:?}")).collect();
    assert!(failing.is_empty(), "{failing:#?}");
}

fn corpus_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}
