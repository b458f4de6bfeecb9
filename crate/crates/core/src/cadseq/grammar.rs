use std::fmt;

use serde::Serialize;

use super::{CadSequence, CommandKind, MAX_COMMANDS, MAX_PARAMS};

/// Grammar rules checked by [`validate`].
///
/// A legal model is `((SOL curve+)+ Extrude)+ EOS`: one or more sketches, each
/// made of closed loops that all hold at least one curve, every sketch
/// consumed by an extrusion, and a single terminator at the very end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    EmptyLoop,
    CurveOutsideLoop,
    ExtrudeWithoutSketch,
    SketchNeverExtruded,
    MissingEos,
    ContentAfterEos,
    EmptyModel,
    BooleanOutOfDomain,
    TooLong,
    TooManyParams,
}

impl Rule {
    pub fn id(self) -> &'static str {
        match self {
            Rule::EmptyLoop => "empty_loop",
            Rule::CurveOutsideLoop => "curve_outside_loop",
            Rule::ExtrudeWithoutSketch => "extrude_without_sketch",
            Rule::SketchNeverExtruded => "sketch_never_extruded",
            Rule::MissingEos => "missing_eos",
            Rule::ContentAfterEos => "content_after_eos",
            Rule::EmptyModel => "empty_model",
            Rule::BooleanOutOfDomain => "boolean_out_of_domain",
            Rule::TooLong => "too_long",
            Rule::TooManyParams => "too_many_params",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub rule: Rule,
    /// Command index the violation is attached to; `len()` for end-of-input.
    pub position: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidityReport {
    pub valid: bool,
    pub violations: Vec<Violation>,
}

impl ValidityReport {
    pub fn has(&self, rule: Rule) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }
}

struct Checker {
    violations: Vec<Violation>,
}

impl Checker {
    fn push(&mut self, rule: Rule, position: usize, message: impl Into<String>) {
        self.violations.push(Violation {
            rule,
            position,
            message: message.into(),
        });
    }
}

pub fn validate(seq: &CadSequence) -> ValidityReport {
    let mut ck = Checker {
        violations: Vec::new(),
    };
    let n = seq.len();

    if n > MAX_COMMANDS {
        ck.push(
            Rule::TooLong,
            MAX_COMMANDS,
            format!("{n} commands, limit {MAX_COMMANDS}"),
        );
    }
    let params = seq.param_count();
    if params > MAX_PARAMS {
        ck.push(
            Rule::TooManyParams,
            0,
            format!("{params} parameters, limit {MAX_PARAMS}"),
        );
    }

    // Start index and curve count of the loop currently open, if any.
    let mut open_loop: Option<(usize, usize)> = None;
    let mut sketch_loops = 0usize;
    let mut extrudes = 0usize;
    let mut eos_at: Option<usize> = None;

    for (i, cmd) in seq.commands().iter().enumerate() {
        let kind = cmd.kind();
        if let Some(e) = eos_at {
            ck.push(
                Rule::ContentAfterEos,
                i,
                format!("{kind} after terminator at {e}"),
            );
            continue;
        }
        for slot in cmd.slots() {
            if let Some(domain) = slot.name.categorical_domain() {
                if slot.value >= domain {
                    ck.push(
                        Rule::BooleanOutOfDomain,
                        i,
                        format!("{} = {} (expected < {domain})", slot.name, slot.value),
                    );
                }
            }
        }
        match kind {
            CommandKind::Sol => {
                if let Some((start, 0)) = open_loop {
                    ck.push(Rule::EmptyLoop, start, "loop has no curves");
                }
                open_loop = Some((i, 0));
                sketch_loops += 1;
            }
            k if k.is_curve() => match open_loop.as_mut() {
                Some((_, curves)) => *curves += 1,
                None => ck.push(Rule::CurveOutsideLoop, i, format!("{k} before any SOL")),
            },
            CommandKind::Extrude => {
                if let Some((start, 0)) = open_loop {
                    ck.push(Rule::EmptyLoop, start, "loop has no curves");
                }
                if sketch_loops == 0 {
                    ck.push(Rule::ExtrudeWithoutSketch, i, "no sketch to extrude");
                }
                open_loop = None;
                sketch_loops = 0;
                extrudes += 1;
            }
            CommandKind::Eos => {
                if let Some((start, 0)) = open_loop {
                    ck.push(Rule::EmptyLoop, start, "loop has no curves");
                }
                if sketch_loops > 0 {
                    ck.push(
                        Rule::SketchNeverExtruded,
                        i,
                        "sketch is not followed by an extrusion",
                    );
                }
                eos_at = Some(i);
            }
            _ => unreachable!(),
        }
    }

    if eos_at.is_none() {
        if let Some((start, 0)) = open_loop {
            ck.push(Rule::EmptyLoop, start, "loop has no curves");
        }
        if sketch_loops > 0 {
            ck.push(
                Rule::SketchNeverExtruded,
                n,
                "sketch is not followed by an extrusion",
            );
        }
        ck.push(Rule::MissingEos, n, "sequence is not terminated by EOS");
    }
    if extrudes == 0 && ck.violations.is_empty() {
        ck.push(Rule::EmptyModel, 0, "model has no extrusion");
    }

    ValidityReport {
        valid: ck.violations.is_empty(),
        violations: ck.violations,
    }
}
