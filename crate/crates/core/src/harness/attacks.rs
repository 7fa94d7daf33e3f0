//! Scripted attacks. The attacker only has the out-of-band read/write
//! primitive of the device: non-secure, privileged, permission-checked,
//! applied between instructions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::{Device, HaltReason};
use crate::machine::cpu::{FaultKind, UsageCause};
use crate::machine::isa::{Instruction, Operand, Reg, RegList};
use crate::machine::memory::AccessViolation;
use crate::machine::pac::control_bits;
use crate::runpba::{LifecycleState, RecoveryDecision};

/// Marker the brute-force fixture prints when a forged return succeeds.
pub const WIN_MARKER: u32 = 0x600D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Attack {
    None,
    RopReturn,
    BtiForwardEdge,
    PacBruteForce { attempts: u32, tag_width: u32 },
    PacReuse,
    FopDisablePacbti { window: [u64; 2] },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttackError {
    #[error("no `{0}` gadget in the image")]
    GadgetNotFound(&'static str),
    #[error("program has no `{symbol}` for this attack")]
    Mismatch { symbol: String },
    #[error("no stack slot holds {0:#06x}")]
    SlotNotFound(u32),
    #[error("gadget ran unprivileged: MSR faulted")]
    NotPrivileged,
    #[error("attacker access denied: {0}")]
    Denied(#[from] AccessViolation),
}

/// Memory edits an attack makes at one point in time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InjectionPlan {
    /// Stack word holding the saved return address that gets replaced, if any.
    pub target_slot: Option<u32>,
    pub writes: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct BruteForceStats {
    pub successes: u32,
    pub attempts: u32,
    pub resets: u32,
}

/// Code addresses the leak chain is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gadgets {
    /// `POP {r0, lr}`: loads a pointer and the next link.
    pub pop_r0_lr: u32,
    /// `LDR r1, [r0]; OUT r1`: prints the word at r0.
    pub load_out: u32,
}

fn symbol(dev: &Device, name: &str) -> Result<u32, AttackError> {
    dev.symbol(name).ok_or_else(|| AttackError::Mismatch { symbol: name.to_string() })
}

fn decoded(dev: &Device, addr: u32) -> Option<Instruction> {
    dev.image().word_at(addr).and_then(|w| Instruction::decode(w).ok())
}

/// Scans the non-secure code for the two gadgets.
pub fn find_gadgets(dev: &Device) -> Result<Gadgets, AttackError> {
    let code = dev.image().region("ns_code").ok_or(AttackError::GadgetNotFound("POP {r0, lr}"))?;
    let pop = RegList::from_regs(&[Reg::R0, Reg::LR]).expect("valid list");
    let addrs = code.base..code.base + code.payload.len() as u32;
    let pop_r0_lr = addrs
        .clone()
        .find(|&a| decoded(dev, a) == Some(Instruction::Pop { regs: pop }))
        .ok_or(AttackError::GadgetNotFound("POP {r0, lr}"))?;
    let load_out = addrs
        .into_iter()
        .find(|&a| {
            decoded(dev, a) == Some(Instruction::Ldr { rt: Reg::R1, base: Reg::R0, offset: 0 })
                && decoded(dev, a + 1) == Some(Instruction::Out { rs: Reg::R1 })
        })
        .ok_or(AttackError::GadgetNotFound("LDR r1, [r0]; OUT r1"))?;
    Ok(Gadgets { pop_r0_lr, load_out })
}

/// PACBTI enables the boot stub programs, read from its first instruction.
fn boot_control(dev: &Device) -> u32 {
    match decoded(dev, dev.image().entry) {
        Some(Instruction::Mov { src: Operand::Imm(v), .. }) => v as u32 & control_bits::PACBTI_MASK,
        _ => 0,
    }
}

fn is_instrumented(dev: &Device, function: &str) -> bool {
    dev.symbol(function).and_then(|a| decoded(dev, a)) == Some(Instruction::Pacbti)
}

/// First stack word at or above sp holding `value`, below the initial sp.
fn find_slot(dev: &mut Device, value: u32) -> Result<u32, AttackError> {
    let sp = dev.machine.regs.sp_ns;
    for addr in sp..dev.image().initial_sp {
        if dev.attacker_read(addr)? == value {
            return Ok(addr);
        }
    }
    Err(AttackError::SlotNotFound(value))
}

/// Moves the live stack words in `[from, initial_sp)` up by `by` words into
/// the headroom, opening a gap for a chain.
fn relocate(dev: &mut Device, from: u32, by: u32, writes: &mut Vec<(u32, u32)>) -> Result<(), AttackError> {
    for addr in (from..dev.image().initial_sp).rev() {
        writes.push((addr + by, dev.attacker_read(addr)?));
    }
    Ok(())
}

/// Return-address overwrite in `echo`: the saved lr becomes a chain that
/// prints the secret and then returns to where `echo` would have.
pub fn plan_rop_return(dev: &mut Device) -> Result<InjectionPlan, AttackError> {
    let g = find_gadgets(dev)?;
    let ret = symbol(dev, "echo_return")?;
    let secret = symbol(dev, "secret")?;
    let slot = find_slot(dev, ret)?;
    let mut writes = Vec::new();
    relocate(dev, slot + 1, 4, &mut writes)?;
    let saved_r4 = dev.attacker_read(slot - 2)?;
    writes.push((slot, g.pop_r0_lr));
    writes.extend([(slot + 1, secret), (slot + 2, g.load_out), (slot + 3, saved_r4), (slot + 4, ret)]);
    Ok(InjectionPlan { target_slot: Some(slot), writes })
}

/// Function-pointer overwrite in `stash`: the handler becomes a gadget with
/// no landing pad, with the same leak chain laid out on the stack.
pub fn plan_bti_forward(dev: &mut Device) -> Result<InjectionPlan, AttackError> {
    let g = find_gadgets(dev)?;
    let handler = symbol(dev, "handler")?;
    let after = symbol(dev, "stash_after")?;
    let secret = symbol(dev, "secret")?;
    let sp = dev.machine.regs.sp_ns;
    let mut writes = Vec::new();
    relocate(dev, sp, 4, &mut writes)?;
    writes.extend([(sp, secret), (sp + 1, g.load_out), (sp + 2, 0), (sp + 3, after), (handler, g.pop_r0_lr)]);
    Ok(InjectionPlan { target_slot: None, writes })
}

pub fn apply(dev: &mut Device, plan: &InjectionPlan) -> Result<(), AttackError> {
    for &(addr, value) in &plan.writes {
        dev.attacker_write(addr, value)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fop {
    Idle,
    Disabling,
    Disabled,
    Enabling,
    Done,
    Aborted,
}

#[derive(Debug, Clone)]
enum State {
    Inert,
    Leak { trigger: u32, forward: bool, fired: bool },
    Reuse { site: u32, ret: u32, next: u32, harvested: Option<(u32, Option<u32>)>, visits: u32, replayed: bool },
    Fop { dispatch: u32, tasks: u32, args: u32, gadget: u32, task: u32, arg: u32, on: u32, window: [u64; 2], phase: Fop, faults_at_call: usize },
    Brute { site: u32, ret: u32, win: u32, spill: bool, mask: u32, attempts: u32, made: u32, pending: Option<u32>, stats: BruteForceStats, rng: Box<ChaCha20Rng> },
}

/// What the attack achieved, for the report.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct AttackSummary {
    pub injected: bool,
    pub succeeded: bool,
    pub target_slot: Option<u32>,
    pub error: Option<String>,
    pub brute_force: Option<BruteForceStats>,
}

/// Drives one attack across a scenario run.
pub struct AttackDriver {
    state: State,
    plan_slot: Option<u32>,
    error: Option<AttackError>,
    secret: Option<u32>,
}

impl AttackDriver {
    /// Checks the program supports the attack and resolves its addresses.
    pub fn new(attack: Attack, dev: &Device, seed: u64) -> Result<AttackDriver, AttackError> {
        let state = match attack {
            Attack::None => State::Inert,
            Attack::RopReturn | Attack::BtiForwardEdge => {
                find_gadgets(dev)?;
                let forward = attack == Attack::BtiForwardEdge;
                let trigger = if forward { "stash_call" } else { "overflow_stack" };
                for s in ["secret", "echo_return", "handler", "stash_after"] {
                    symbol(dev, s)?;
                }
                State::Leak { trigger: symbol(dev, trigger)?, forward, fired: false }
            }
            Attack::PacReuse => State::Reuse {
                site: symbol(dev, "f_ret")?,
                ret: symbol(dev, "site_one")?,
                next: symbol(dev, "site_two")?,
                harvested: None,
                visits: 0,
                replayed: false,
            },
            Attack::FopDisablePacbti { window } => {
                let args = symbol(dev, "args")?;
                State::Fop {
                    dispatch: symbol(dev, "dispatch")?,
                    tasks: symbol(dev, "tasks")?,
                    args,
                    gadget: symbol(dev, "set_control")?,
                    task: symbol(dev, "work")?,
                    arg: dev.image().word_at(args).unwrap_or(0),
                    on: boot_control(dev),
                    window,
                    phase: Fop::Idle,
                    faults_at_call: 0,
                }
            }
            Attack::PacBruteForce { attempts, tag_width } => {
                let mut rng = ChaCha20Rng::seed_from_u64(seed);
                rng.set_stream(0xA77A);
                State::Brute {
                    site: symbol(dev, "forge_site")?,
                    ret: symbol(dev, "victim_return")?,
                    win: symbol(dev, "win")?,
                    spill: is_instrumented(dev, "victim"),
                    mask: if tag_width >= 32 { u32::MAX } else { (1 << tag_width) - 1 },
                    attempts,
                    made: 0,
                    pending: None,
                    stats: BruteForceStats::default(),
                    rng: Box::new(rng),
                }
            }
        };
        Ok(AttackDriver { state, plan_slot: None, error: None, secret: dev.symbol("secret").and_then(|a| dev.image().word_at(a)) })
    }

    /// Value whose appearance in the output means the secret leaked.
    pub fn secret(&self) -> Option<u32> {
        self.secret
    }

    /// Brute force recovers held devices itself to keep attempts flowing.
    pub fn manages_recovery(&self) -> bool {
        matches!(self.state, State::Brute { .. })
    }

    /// No further work; the run can stop.
    pub fn finished(&self) -> bool {
        match &self.state {
            State::Brute { attempts, made, pending, .. } => made == attempts && pending.is_none(),
            _ => false,
        }
    }

    /// Runs before each device tick.
    pub fn before_step(&mut self, dev: &mut Device) {
        if self.error.is_some() {
            return;
        }
        if let Err(e) = self.act(dev) {
            self.error = Some(e);
        }
    }

    fn act(&mut self, dev: &mut Device) -> Result<(), AttackError> {
        let pc = dev.machine.regs.pc;
        let thread = dev.in_ns_thread();
        match &mut self.state {
            State::Inert => {}
            State::Leak { trigger, forward, fired } => {
                if !*fired && thread && pc == *trigger {
                    *fired = true;
                    let plan = if *forward { plan_bti_forward(dev)? } else { plan_rop_return(dev)? };
                    self.plan_slot = plan.target_slot;
                    apply(dev, &plan)?;
                }
            }
            State::Reuse { site, ret, next, harvested, visits, replayed } => {
                if thread && pc == *site {
                    *visits += 1;
                    let spill = is_instrumented(dev, "f");
                    match *visits {
                        1 => {
                            let slot = find_slot(dev, *ret)?;
                            let tag = if spill { Some(dev.attacker_read(slot + 1)?) } else { None };
                            *harvested = Some((slot, tag));
                        }
                        2 => {
                            let slot = find_slot(dev, *next)?;
                            let (_, tag) = harvested.expect("first visit harvests");
                            dev.attacker_write(slot, *ret)?;
                            if let Some(t) = tag {
                                dev.attacker_write(slot + 1, t)?;
                            }
                            self.plan_slot = Some(slot);
                            *replayed = true;
                        }
                        _ => {}
                    }
                }
            }
            State::Fop { dispatch, tasks, args, gadget, task, arg, on, window, phase, faults_at_call } => {
                if matches!(*phase, Fop::Disabling | Fop::Enabling) && dev.faults.len() > *faults_at_call {
                    let f = dev.faults[*faults_at_call];
                    *phase = Fop::Aborted;
                    // The gadget ran and faulted; the device has reset and reloaded memory.
                    return Err(if f.kind == FaultKind::UsageFault(UsageCause::UndefinedInstruction) {
                        AttackError::NotPrivileged
                    } else {
                        AttackError::Mismatch { symbol: "set_control".into() }
                    });
                }
                if !thread || pc != *dispatch {
                    return Ok(());
                }
                let now = dev.ticks();
                match *phase {
                    Fop::Idle if now >= window[0] => {
                        dev.attacker_write(*tasks, *gadget)?;
                        dev.attacker_write(*args, 0)?;
                        *faults_at_call = dev.faults.len();
                        *phase = Fop::Disabling;
                    }
                    Fop::Disabling => {
                        dev.attacker_write(*tasks, *task)?;
                        dev.attacker_write(*args, *arg)?;
                        *phase = Fop::Disabled;
                    }
                    Fop::Disabled if now >= window[1] => {
                        dev.attacker_write(*tasks, *gadget)?;
                        dev.attacker_write(*args, *on)?;
                        *faults_at_call = dev.faults.len();
                        *phase = Fop::Enabling;
                    }
                    Fop::Enabling => {
                        dev.attacker_write(*tasks, *task)?;
                        dev.attacker_write(*args, *arg)?;
                        *phase = Fop::Done;
                    }
                    _ => {}
                }
            }
            State::Brute { site, ret, win, spill, mask, attempts, made, pending, stats, rng } => {
                if let Some(epoch) = *pending {
                    if dev.boot_epoch != epoch {
                        stats.resets += dev.boot_epoch - epoch;
                        *pending = None;
                    }
                }
                if dev.lifecycle == LifecycleState::NspeCompromised && dev.is_held() && dev.zone.pending().is_empty() {
                    dev.recover(RecoveryDecision::Recover).map_err(|_| AttackError::Mismatch { symbol: "recover".into() })?;
                    return Ok(());
                }
                if pending.is_none() && made < attempts && thread && pc == *site {
                    let slot = find_slot(dev, *ret)?;
                    dev.attacker_write(slot, *win)?;
                    if *spill {
                        let tag = rng.gen::<u32>() & *mask;
                        dev.attacker_write(slot + 1, tag)?;
                    }
                    *made += 1;
                    stats.attempts = *made;
                    *pending = Some(dev.boot_epoch);
                }
            }
        }
        Ok(())
    }

    /// Called when the device halts. Returns true if the device should be
    /// restarted and the run continued.
    pub fn on_halt(&mut self, dev: &mut Device) -> bool {
        if let State::Brute { attempts, made, pending, stats, .. } = &mut self.state {
            if pending.is_some() && dev.halted == Some(HaltReason::Exit) && dev.machine.output.last() == Some(&WIN_MARKER) {
                stats.successes += 1;
                *pending = None;
            }
            if made < attempts && dev.halted == Some(HaltReason::Exit) {
                dev.restart_nspe();
                return true;
            }
        }
        false
    }

    pub fn summary(&self, dev: &Device) -> AttackSummary {
        let leaked = self.secret.is_some_and(|s| dev.machine.output.contains(&s));
        let clean_exit = dev.halted == Some(HaltReason::Exit) && dev.faults.is_empty();
        let (injected, succeeded, brute_force) = match &self.state {
            State::Inert => (false, false, None),
            State::Leak { fired, .. } => (*fired, *fired && leaked, None),
            State::Reuse { replayed, .. } => (*replayed, *replayed && clean_exit, None),
            State::Fop { phase, .. } => (*phase != Fop::Idle, *phase == Fop::Done && dev.faults.is_empty(), None),
            State::Brute { made, stats, .. } => (*made > 0, stats.successes > 0, Some(*stats)),
        };
        AttackSummary {
            injected,
            succeeded,
            target_slot: self.plan_slot,
            error: self.error.as_ref().map(|e| e.to_string()),
            brute_force,
        }
    }
}
