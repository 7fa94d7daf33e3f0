use std::fmt::Write as _;

use proptest::prelude::*;

use pacbti_sim::assembler::{assemble, instrument, parse, InstrumentConfig, Program};
use pacbti_sim::attestation::{build_token, verify_token, AttestationKey, AttestationToken, Evidence, CLAIMS_LEN};
use pacbti_sim::device::{Device, DeviceConfig, HaltReason, PostPersistPolicy, Tick, TraceEvent};
use pacbti_sim::harness::suite::scenario_files;
use pacbti_sim::harness::{run_scenario_with, ScenarioScript};
use pacbti_sim::machine::cpu::{FaultKind, UsageCause};
use pacbti_sim::machine::isa::Instruction;
use pacbti_sim::machine::memory::World;
use pacbti_sim::machine::pac::{pac_compute, PacbtiControl};
use pacbti_sim::runpba::{FaultClass, ItsStore, LifecycleState, RecoveryDecision, RunPbaStatus};
use pacbti_sim::securezone::Vector;

const STEP_LIMIT: u64 = 200_000;

#[derive(Debug, Clone)]
enum Op {
    Mov(u8, u16),
    Add(u8, u8, u8),
    SubImm(u8, u8, u16),
    Out(u8),
    /// Direct call to a later function.
    Call(usize),
    /// Call through a register to a later function.
    CallVia(usize),
    /// Indirect jump over one instruction to an `!indirect` label.
    Skip(u8),
}

fn op() -> impl Strategy<Value = Op> {
    let r = 0u8..4;
    prop_oneof![
        (r.clone(), 0u16..2000).prop_map(|(d, v)| Op::Mov(d, v)),
        (r.clone(), r.clone(), r.clone()).prop_map(|(d, a, b)| Op::Add(d, a, b)),
        (r.clone(), r.clone(), 0u16..100).prop_map(|(d, a, v)| Op::SubImm(d, a, v)),
        r.clone().prop_map(Op::Out),
        (0usize..8).prop_map(Op::Call),
        (0usize..8).prop_map(Op::CallVia),
        r.prop_map(Op::Skip),
    ]
}

/// Source text for an acyclic call graph: function k only calls k+1.. so
/// every program terminates. r3 carries code addresses, which move under
/// instrumentation, so it is zeroed after each use; main zeroes r0..r2,
/// which boot leaves holding prelude values.
fn render(funcs: &[Vec<Op>]) -> String {
    let n = funcs.len();
    let callee = |k: usize, j: usize| j % (n - k - 1).max(1) + k + 1;
    let calls: Vec<bool> = funcs
        .iter()
        .enumerate()
        .map(|(k, b)| k + 1 < n && b.iter().any(|o| matches!(o, Op::Call(_) | Op::CallVia(_))))
        .collect();
    let mut via = vec![false; n];
    for (k, b) in funcs.iter().enumerate().filter(|(k, _)| calls[*k]) {
        for o in b {
            if let Op::CallVia(j) = *o {
                via[callee(k, j)] = true;
            }
        }
    }
    let mut s = String::from(".text\n");
    let mut labels = 0;
    for (k, body) in funcs.iter().enumerate() {
        let name = if k == 0 { "main".to_string() } else { format!("f{k}") };
        let (calls, via) = (calls[k], via[k]);
        writeln!(s, "fn {name}{}:", if via { "!indirect" } else { "" }).unwrap();
        if calls {
            s += "    PUSH {r4, lr}\n";
        }
        if k == 0 {
            s += "    MOV r0, #0\n    MOV r1, #0\n    MOV r2, #0\n";
        }
        s += "    MOV r3, #0\n";
        for o in body {
            match *o {
                Op::Mov(d, v) => writeln!(s, "    MOV r{d}, #{v}").unwrap(),
                Op::Add(d, a, b) => writeln!(s, "    ADD r{d}, r{a}, r{b}").unwrap(),
                Op::SubImm(d, a, v) => writeln!(s, "    SUB r{d}, r{a}, #{v}").unwrap(),
                Op::Out(r) => writeln!(s, "    OUT r{r}").unwrap(),
                Op::Call(j) if calls => writeln!(s, "    BL f{}", callee(k, j)).unwrap(),
                Op::CallVia(j) if calls => writeln!(s, "    MOV r3, #f{}\n    BLX r3\n    MOV r3, #0", callee(k, j)).unwrap(),
                Op::Call(_) | Op::CallVia(_) => {}
                Op::Skip(r) => {
                    labels += 1;
                    writeln!(s, "    MOV r3, #skip{labels}\n    BX r3\n    OUT r{r}\nskip{labels}!indirect:\n    MOV r3, #0").unwrap();
                }
            }
        }
        if calls {
            s += "    POP {r4, lr}\n";
        }
        s += "    RET\n\n";
    }
    s
}

fn program() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::collection::vec(op(), 0..10), 1..6).prop_map(|f| render(&f))
}

fn run(p: &Program) -> (Option<HaltReason>, Vec<u32>, usize) {
    let image = assemble(p).unwrap();
    let config = DeviceConfig { trace: false, ..DeviceConfig::default() };
    let mut dev = Device::provision(image, config, 1, ItsStore::in_memory()).unwrap();
    dev.run(STEP_LIMIT).unwrap();
    (dev.halted.clone(), dev.machine.output.clone(), dev.faults.len())
}

const CLOBBER: &str = "fn main:\n    PUSH {r4, lr}\n    BL victim\n    POP {r4, lr}\n    RET\n\nfn victim:\n    MOV lr, #LR\n    RET\n";

fn clobber_device(lr: u32, seed: u64, policy: PostPersistPolicy) -> Device {
    let src = CLOBBER.replace("#LR", &format!("#{lr}"));
    let image = assemble(&instrument(&parse(&src).unwrap(), InstrumentConfig::FULL).unwrap()).unwrap();
    let config = DeviceConfig { policy, ..DeviceConfig::default() };
    Device::provision(image, config, seed, ItsStore::in_memory()).unwrap()
}

fn any_policy() -> impl Strategy<Value = PostPersistPolicy> {
    prop_oneof![Just(PostPersistPolicy::HoldInSpe), Just(PostPersistPolicy::ResetAfterPersist)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn instrumentation_preserves_benign_behavior(src in program()) {
        let p = parse(&src).unwrap();
        let plain = run(&p);
        prop_assert_eq!(&plain.0, &Some(HaltReason::Exit), "{}", src);
        prop_assert_eq!(plain.2, 0);
        for cfg in [InstrumentConfig { pac: true, bti: false }, InstrumentConfig { pac: false, bti: true }, InstrumentConfig::FULL] {
            let inst = run(&instrument(&p, cfg).unwrap());
            prop_assert_eq!(&inst, &plain, "{:?}\n{}", cfg, src);
        }
    }

    #[test]
    fn size_delta_matches_the_program_shape(src in program()) {
        let p = parse(&src).unwrap();
        let f = p.functions.len();
        let j = src.lines().filter(|l| l.ends_with("!indirect:") && !l.starts_with("fn ")).count();
        let non_leaf = src.matches("PUSH {r4, lr}").count();
        let plain = assemble(&p).unwrap().code_size();
        let full = assemble(&instrument(&p, InstrumentConfig::FULL).unwrap()).unwrap().code_size();
        prop_assert_eq!((full - plain) as usize, 2 * f + j + 2 * non_leaf);
    }

    #[test]
    fn disabled_features_turn_pacbti_into_nops(src in program()) {
        let p = parse(&src).unwrap();
        let mut off = instrument(&p, InstrumentConfig::FULL).unwrap();
        off.instrumented = Some(InstrumentConfig::NONE);
        let image = assemble(&off).unwrap();
        let config = DeviceConfig { trace: false, ..DeviceConfig::default() };
        let mut dev = Device::provision(image, config, 1, ItsStore::in_memory()).unwrap();
        dev.run(STEP_LIMIT).unwrap();
        prop_assert_eq!(dev.live_control(), PacbtiControl::NONE);
        prop_assert!(!dev.faults.iter().any(|f| f.kind == FaultKind::UsageFault(UsageCause::InvalidState)));
        prop_assert_eq!((dev.halted.clone(), dev.machine.output.clone()), (run(&p).0, run(&p).1));
    }

    #[test]
    fn identical_inputs_give_identical_traces(lr in 0u32..0x1_0000, seed in any::<u64>(), policy in any_policy()) {
        let trace = || {
            let mut d = clobber_device(lr, seed, policy);
            d.run(300).unwrap();
            (d.trace.entries().to_vec(), d.trace.digest())
        };
        prop_assert_eq!(trace(), trace());
    }

    #[test]
    fn aut_faults_replay_to_a_tag_mismatch(lr in 0u32..0x1_0000, seed in any::<u64>()) {
        let mut dev = clobber_device(lr, seed, PostPersistPolicy::HoldInSpe);
        dev.run(300).unwrap();
        let fault = dev.faults.iter().find(|f| f.class == Some(FaultClass::PacFault)).copied();
        let fault = fault.expect("clobbered return address faults");
        let mut replay = clobber_device(lr, seed, PostPersistPolicy::HoldInSpe);
        while replay.ticks() + 1 < fault.tick {
            replay.step().unwrap();
        }
        let m = &replay.machine;
        prop_assert_eq!(m.regs.pc, fault.pc);
        let word = m.memory.peek(fault.pc).unwrap();
        prop_assert!(matches!(Instruction::decode(word), Ok(Instruction::Aut)));
        let expected = pac_compute(m.regs.lr, m.regs.sp_ns, &m.keys);
        prop_assert_ne!(expected, m.regs.general[12] & m.keys.tag_mask());
    }

    #[test]
    fn no_non_secure_instruction_while_secure_work_pends(lr in 0u32..0x1_0000, seed in any::<u64>(), policy in any_policy()) {
        let mut dev = clobber_device(lr, seed, policy);
        for _ in 0..400 {
            let pending = dev.zone.secure_pending();
            let ns = dev.machine.world == World::NonSecure;
            let tick = dev.step().unwrap();
            prop_assert!(!(pending && ns && tick == Tick::Instruction), "tick {}", dev.ticks());
        }
    }

    #[test]
    fn lifecycle_only_takes_legal_transitions(
        ops in prop::collection::vec(0u8..6, 1..25),
        lr in 0u32..0x1_0000,
        seed in any::<u64>(),
        policy in any_policy(),
    ) {
        let mut dev = clobber_device(lr, seed, policy);
        for o in ops {
            let before = dev.lifecycle;
            match o {
                0 | 1 => { dev.run(40).unwrap(); }
                2 => { let _ = dev.recover(RecoveryDecision::Recover); }
                3 if seed % 3 == 0 => { let _ = dev.recover(RecoveryDecision::Decommission); }
                3 => { dev.run(5).unwrap(); }
                4 => dev.reset("prop"),
                _ => { let _ = dev.attest(&[0; 32]); }
            }
            let after = dev.lifecycle;
            prop_assert!(before == after || before.can_transition(after), "{:?} -> {:?}", before, after);
        }
    }

    #[test]
    fn accepted_tokens_are_canonical(
        key in any::<[u8; 32]>(),
        nonce in any::<[u8; 32]>(),
        id in any::<[u8; 16]>(),
        state in prop_oneof![
            Just(LifecycleState::AssemblyAndTest),
            Just(LifecycleState::Provisioning),
            Just(LifecycleState::Secured),
            Just(LifecycleState::NspeCompromised),
            Just(LifecycleState::RecoverableDebug),
        ],
        flags in any::<[bool; 6]>(),
        epoch in any::<u32>(),
        count in any::<u32>(),
    ) {
        let key = AttestationKey(key);
        let control = PacbtiControl { pac_priv: flags[0], pac_unpriv: flags[1], bti_priv: flags[2], bti_unpriv: flags[3] };
        let ev = Evidence {
            lifecycle: state,
            status: RunPbaStatus { runtime_failure: flags[4], malfunction: flags[5], control },
            instance_id: id,
            boot_epoch: epoch,
            fault_count: count,
        };
        let bytes = build_token(&ev, &nonce, Some(&key)).unwrap().to_bytes();
        let claims = verify_token(&bytes, &nonce, &key).unwrap();
        prop_assert_eq!(claims.encode(), <[u8; CLAIMS_LEN]>::try_from(&bytes[..CLAIMS_LEN]).unwrap());
        let again = AttestationToken { claims, authenticator: bytes[CLAIMS_LEN..].try_into().unwrap() };
        prop_assert_eq!(again.to_bytes(), bytes);
        prop_assert_eq!(claims.lifecycle.control(), control);
    }
}

/// Every non-secure UsageFault in the scenario corpus is taken by the
/// secure HardFault handler as the very next event.
#[test]
fn usage_faults_always_escalate_to_secure_hardfault() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/scenarios");
    let mut seen = 0;
    for path in scenario_files(&dir).unwrap() {
        let script = ScenarioScript::load(&path).unwrap();
        if !script.runpba || script.name.starts_with("brute_force") {
            continue;
        }
        let (_, dev) = run_scenario_with(&script, true).unwrap();
        let events = dev.trace.entries();
        for (i, e) in events.iter().enumerate() {
            if let TraceEvent::Fault { kind: FaultKind::UsageFault(_), world: World::NonSecure, .. } = e {
                seen += 1;
                assert!(
                    matches!(
                        events.get(i + 1),
                        Some(TraceEvent::FaultDispatch { vector: Vector::HardFault, world: World::Secure, .. })
                    ),
                    "{}: fault at event {i} followed by {:?}",
                    script.name,
                    events.get(i + 1)
                );
            }
        }
    }
    assert!(seen > 0);
}
