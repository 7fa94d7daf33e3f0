//! Scenario scripts: TOML key/value files naming a program, the
//! instrumentation, an attack and the checks the run must satisfy.
//!
//! ```toml
//! name = "rop_protected"
//! program = "../echo_service.s"
//! instrument = "full"            # none | pac | bti | full
//! attack = "rop_return"          # none | rop_return | bti_forward_edge |
//!                                # pac_brute_force | pac_reuse | fop_disable_pacbti
//! policy = "hold_in_spe"         # or reset_after_persist
//! attestations = [400]
//! attest_at_end = true
//! seed = 7
//! input = [2, 11, 22]
//!
//! [expect]
//! secret_leaked = false
//! fault_kind = "PacFault"
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{Attack, HarnessError, ReportedFault, ScenarioReport, Termination};
use crate::assembler::InstrumentConfig;
use crate::device::PostPersistPolicy;
use crate::machine::pac::DEFAULT_TAG_WIDTH;
use crate::runpba::LifecycleState;

pub const DEFAULT_MAX_STEPS: u64 = 10_000_000;
pub const DEFAULT_HOLD_STEPS: u64 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
enum InstrumentName {
    None,
    Pac,
    Bti,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
enum AttackName {
    None,
    RopReturn,
    BtiForwardEdge,
    PacBruteForce,
    PacReuse,
    FopDisablePacbti,
}

/// Checks on the report. Absent keys are not checked.
#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectations {
    pub secret_leaked: Option<bool>,
    pub fault_raised: Option<bool>,
    pub fault_kind: Option<ReportedFault>,
    pub lifecycle_final: Option<LifecycleState>,
    pub detection_gap: Option<bool>,
    pub resumed_normal_flow: Option<bool>,
    pub termination: Option<Termination>,
    pub attack_succeeded: Option<bool>,
    pub attack_error: Option<String>,
    /// runtime_failure bit of the last token.
    pub last_token_runtime_failure: Option<bool>,
    /// Whether any token shows feature bits different from the provisioned set.
    pub token_shows_disabled: Option<bool>,
    pub output: Option<Vec<u32>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: String,
    program: PathBuf,
    #[serde(default = "default_instrument")]
    instrument: InstrumentName,
    #[serde(default = "default_attack")]
    attack: AttackName,
    #[serde(default)]
    policy: PostPersistPolicy,
    #[serde(default)]
    attestations: Vec<u64>,
    #[serde(default)]
    attest_at_end: bool,
    seed: u64,
    #[serde(default = "default_runpba")]
    runpba: bool,
    max_steps: Option<u64>,
    hold_steps: Option<u64>,
    window: Option<[u64; 2]>,
    attempts: Option<u32>,
    tag_width: Option<u32>,
    #[serde(default)]
    input: Vec<u32>,
    #[serde(default)]
    expect: Expectations,
}

fn default_instrument() -> InstrumentName {
    InstrumentName::None
}
fn default_attack() -> AttackName {
    AttackName::None
}
fn default_runpba() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioScript {
    pub name: String,
    pub program: PathBuf,
    /// Program text, read from `program`.
    pub source: String,
    pub instrument: InstrumentConfig,
    pub attack: Attack,
    pub policy: PostPersistPolicy,
    /// Device ticks at which a challenge-response runs.
    pub attestations: Vec<u64>,
    pub attest_at_end: bool,
    pub seed: u64,
    /// Install the RunPBA fault configuration at boot.
    pub runpba: bool,
    pub max_steps: u64,
    /// Ticks to keep running after the device parks the non-secure side.
    pub hold_steps: u64,
    pub tag_width: u32,
    pub input: Vec<u32>,
    pub expect: Expectations,
}

impl ScenarioScript {
    /// Parses a script; `program` is resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<ScenarioScript, HarnessError> {
        let f: ScenarioFile = toml::from_str(text).map_err(|e| HarnessError::Script(e.to_string()))?;
        let instrument = match f.instrument {
            InstrumentName::None => InstrumentConfig::NONE,
            InstrumentName::Pac => InstrumentConfig { pac: true, bti: false },
            InstrumentName::Bti => InstrumentConfig { pac: false, bti: true },
            InstrumentName::Full => InstrumentConfig::FULL,
        };
        let missing = |k: &str| HarnessError::Script(format!("attack `{:?}` needs `{k}`", f.attack));
        let attack = match f.attack {
            AttackName::None => Attack::None,
            AttackName::RopReturn => Attack::RopReturn,
            AttackName::BtiForwardEdge => Attack::BtiForwardEdge,
            AttackName::PacReuse => Attack::PacReuse,
            AttackName::PacBruteForce => Attack::PacBruteForce {
                attempts: f.attempts.ok_or_else(|| missing("attempts"))?,
                tag_width: f.tag_width.ok_or_else(|| missing("tag_width"))?,
            },
            AttackName::FopDisablePacbti => {
                let window = f.window.ok_or_else(|| missing("window"))?;
                if window[0] > window[1] {
                    return Err(HarnessError::Script("window must be [disable_step, enable_step]".into()));
                }
                Attack::FopDisablePacbti { window }
            }
        };
        if let Some(w) = f.tag_width {
            if !(1..=32).contains(&w) {
                return Err(HarnessError::Script(format!("tag_width {w} outside 1..=32")));
            }
        }
        let program = base_dir.join(&f.program);
        let source = std::fs::read_to_string(&program)
            .map_err(|source| HarnessError::Io { path: program.clone(), source })?;
        Ok(ScenarioScript {
            name: f.name,
            program,
            source,
            instrument,
            attack,
            policy: f.policy,
            attestations: f.attestations,
            attest_at_end: f.attest_at_end,
            seed: f.seed,
            runpba: f.runpba,
            max_steps: f.max_steps.unwrap_or(DEFAULT_MAX_STEPS),
            hold_steps: f.hold_steps.unwrap_or(DEFAULT_HOLD_STEPS),
            tag_width: f.tag_width.unwrap_or(DEFAULT_TAG_WIDTH),
            input: f.input,
            expect: f.expect,
        })
    }

    pub fn load(path: &Path) -> Result<ScenarioScript, HarnessError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })?;
        ScenarioScript::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }
}

impl Expectations {
    /// Lists every expectation the report does not meet.
    pub fn check(&self, r: &ScenarioReport) -> Vec<String> {
        let mut bad = Vec::new();
        let mut cmp = |what: &str, want: Option<String>, got: String| {
            if let Some(w) = want {
                if w != got {
                    bad.push(format!("{what}: expected {w}, got {got}"));
                }
            }
        };
        let s = |v: &dyn std::fmt::Debug| format!("{v:?}");
        cmp("secret_leaked", self.secret_leaked.map(|v| s(&v)), s(&r.secret_leaked));
        cmp("fault_raised", self.fault_raised.map(|v| s(&v)), s(&r.fault_raised));
        cmp("fault_kind", self.fault_kind.map(|v| s(&Some(v))), s(&r.fault_kind));
        cmp("lifecycle_final", self.lifecycle_final.map(|v| s(&v)), s(&r.lifecycle_final));
        cmp("detection_gap", self.detection_gap.map(|v| s(&v)), s(&r.detection_gap));
        cmp("resumed_normal_flow", self.resumed_normal_flow.map(|v| s(&v)), s(&r.resumed_normal_flow));
        cmp("termination", self.termination.map(|v| s(&v)), s(&r.termination));
        cmp("attack_succeeded", self.attack_succeeded.map(|v| s(&v)), s(&r.attack_result.succeeded));
        cmp("attack_error", self.attack_error.clone().map(|v| s(&Some(v))), s(&r.attack_result.error));
        let last_rf = r.tokens.last().and_then(|t| t.claims).map(|c| c.lifecycle.runtime_failure);
        cmp("last_token_runtime_failure", self.last_token_runtime_failure.map(|v| s(&Some(v))), s(&last_rf));
        let expected = crate::machine::pac::PacbtiControl::with_features(r.instrument.pac, r.instrument.bti);
        let disabled = r.tokens.iter().filter_map(|t| t.claims).any(|c| c.lifecycle.control() != expected);
        cmp("token_shows_disabled", self.token_shows_disabled.map(|v| s(&v)), s(&disabled));
        cmp("output", self.output.as_ref().map(|v| s(v)), s(&r.output));
        bad
    }
}
