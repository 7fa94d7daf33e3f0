//! Shipped fixture programs.

/// A benign program and the input it runs on.
#[derive(Debug, Clone, Copy)]
pub struct CorpusProgram {
    pub name: &'static str,
    pub source: &'static str,
    pub input: &'static [u32],
}

pub const ECHO_SERVICE: &str = include_str!("../../fixtures/echo_service.s");
pub const FOP_DISPATCHER: &str = include_str!("../../fixtures/fop_dispatcher.s");
pub const FOP_DISPATCHER_UNPRIV: &str = include_str!("../../fixtures/fop_dispatcher_unpriv.s");
pub const BRUTE_FORCE: &str = include_str!("../../fixtures/brute_force.s");
pub const REUSE_DEMO: &str = include_str!("../../fixtures/reuse_demo.s");

/// Echo two words, echo one word, then stash one word.
pub const ECHO_INPUT: &[u32] = &[2, 11, 22, 1, 33, 0, 1, 44];

/// Programs expected to run fault-free with or without instrumentation.
pub const BENIGN: &[CorpusProgram] = &[
    CorpusProgram { name: "echo_service", source: ECHO_SERVICE, input: ECHO_INPUT },
    CorpusProgram { name: "empty_main", source: include_str!("../../fixtures/empty_main.s"), input: &[] },
    CorpusProgram { name: "sum_loop", source: include_str!("../../fixtures/sum_loop.s"), input: &[] },
    CorpusProgram { name: "isqrt", source: include_str!("../../fixtures/isqrt.s"), input: &[] },
    CorpusProgram { name: "jump_table", source: include_str!("../../fixtures/jump_table.s"), input: &[] },
    CorpusProgram { name: "fib_recursive", source: include_str!("../../fixtures/fib_recursive.s"), input: &[] },
];

pub fn benign(name: &str) -> Option<&'static CorpusProgram> {
    BENIGN.iter().find(|p| p.name == name)
}
