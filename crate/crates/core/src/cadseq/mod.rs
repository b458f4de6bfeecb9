//! Sketch-and-extrude CAD sequences: commands, typed quantized parameter
//! slots, grammar validation, flattening for the parameter stage, and file
//! import/export.
//!
//! Command ids are fixed: `SOL=0, Line=1, Arc=2, Circle=3, Extrude=4, EOS=5`.
//! Every effective parameter is an 8-bit token. `SOL` and `EOS` carry no
//! effective parameters; in the flattened form such positions do not exist
//! and the tail of the sequence is filled with [`PAD_TOKEN`].

mod flat;
mod grammar;
mod io;
pub mod synth;

pub use flat::{flatten, flatten_padded, regroup, FlatParamSeq, SlotTag, PAD_OWNER};
pub use grammar::{validate, Rule, ValidityReport, Violation};
pub use io::{
    from_json, from_json_many, parse_row_text, parse_rows, to_json, to_json_many, to_rows,
    ROW_CELLS,
};

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum number of commands in a sequence, terminator included.
pub const MAX_COMMANDS: usize = 60;
/// Maximum number of effective parameter slots over a whole sequence.
pub const MAX_PARAMS: usize = 280;
/// Number of quantization levels for every effective parameter.
pub const NUM_LEVELS: usize = 256;
/// Flattened-form filler for positions that own no effective slot.
pub const PAD_TOKEN: u16 = 256;
/// Number of command kinds.
pub const NUM_COMMANDS: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CadSeqError {
    #[error("unknown command id {0} (expected 0..=5)")]
    UnknownCommandId(i64),
    #[error("row {row}: effective slot `{slot}` is -1")]
    MissingParameter { row: usize, slot: SlotName },
    #[error("row {row}: slot `{slot}` value {value} outside 0..=255")]
    OutOfRange {
        row: usize,
        slot: SlotName,
        value: i64,
    },
    #[error("sequence has {0} commands, limit is {MAX_COMMANDS}")]
    TooLong(usize),
    #[error("sequence has {0} effective parameters, limit is {MAX_PARAMS}")]
    TooManyParams(usize),
    #[error("value {0} outside the quantization domain [0, 1]")]
    OutOfDomain(f64),
    #[error("row {row}: expected {ROW_CELLS} integer cells, found {found}")]
    MalformedRow { row: usize, found: usize },
    #[error("{kind:?} expects {expected} parameters, got {got}")]
    Arity {
        kind: CommandKind,
        expected: usize,
        got: usize,
    },
    #[error("malformed json: {0}")]
    MalformedJson(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
}

/// One of the six command kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CommandKind {
    Sol,
    Line,
    Arc,
    Circle,
    Extrude,
    Eos,
}

impl CommandKind {
    pub const ALL: [CommandKind; NUM_COMMANDS] = [
        CommandKind::Sol,
        CommandKind::Line,
        CommandKind::Arc,
        CommandKind::Circle,
        CommandKind::Extrude,
        CommandKind::Eos,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            CommandKind::Sol => "SOL",
            CommandKind::Line => "Line",
            CommandKind::Arc => "Arc",
            CommandKind::Circle => "Circle",
            CommandKind::Extrude => "Extrude",
            CommandKind::Eos => "EOS",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }

    pub fn is_curve(self) -> bool {
        matches!(
            self,
            CommandKind::Line | CommandKind::Arc | CommandKind::Circle
        )
    }

    /// Effective slots of this command, in storage order.
    pub fn layout(self) -> &'static [SlotName] {
        use SlotName::*;
        match self {
            CommandKind::Sol | CommandKind::Eos => &[],
            CommandKind::Line => &[X, Y],
            CommandKind::Arc => &[X, Y, Alpha, F],
            CommandKind::Circle => &[X, Y, R],
            CommandKind::Extrude => &[Theta, Phi, Gamma, Px, Py, Pz, S, E1, E2, B, U],
        }
    }

    pub fn arity(self) -> usize {
        self.layout().len()
    }
}

impl fmt::Display for CommandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Semantic type of a parameter slot; selects the forward corruption kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    Coordinate,
    Dimensional,
    Boolean,
}

/// Named parameter slot. The discriminant is the slot's cell index in the
/// 16-cell row format (minus one).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SlotName {
    X,
    Y,
    Alpha,
    F,
    R,
    Theta,
    Phi,
    Gamma,
    Px,
    Py,
    Pz,
    S,
    E1,
    E2,
    B,
    U,
}

impl SlotName {
    pub const ALL: [SlotName; 16] = [
        SlotName::X,
        SlotName::Y,
        SlotName::Alpha,
        SlotName::F,
        SlotName::R,
        SlotName::Theta,
        SlotName::Phi,
        SlotName::Gamma,
        SlotName::Px,
        SlotName::Py,
        SlotName::Pz,
        SlotName::S,
        SlotName::E1,
        SlotName::E2,
        SlotName::B,
        SlotName::U,
    ];

    pub fn kind(self) -> ParamKind {
        use SlotName::*;
        match self {
            X | Y | Theta | Phi | Gamma | Px | Py | Pz => ParamKind::Coordinate,
            Alpha | R | S | E1 | E2 => ParamKind::Dimensional,
            F | B | U => ParamKind::Boolean,
        }
    }

    /// Column of this slot in the row format (cell 0 is the command id).
    pub fn cell(self) -> usize {
        self as usize + 1
    }

    pub fn label(self) -> &'static str {
        use SlotName::*;
        match self {
            X => "x",
            Y => "y",
            Alpha => "alpha",
            F => "f",
            R => "r",
            Theta => "theta",
            Phi => "phi",
            Gamma => "gamma",
            Px => "px",
            Py => "py",
            Pz => "pz",
            S => "s",
            E1 => "e1",
            E2 => "e2",
            B => "b",
            U => "u",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|s| s.label() == label)
    }

    /// Legal token values for categorical slots: `f` is a direction flag,
    /// `b` one of four body operations, `u` one of three extent types.
    /// `None` for slots that accept the full 0..=255 range.
    pub fn categorical_domain(self) -> Option<u8> {
        match self {
            SlotName::F => Some(2),
            SlotName::B => Some(4),
            SlotName::U => Some(3),
            _ => None,
        }
    }
}

impl fmt::Display for SlotName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A single effective parameter with its schema labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSlot {
    pub value: u8,
    pub kind: ParamKind,
    pub name: SlotName,
}

/// One command and its effective parameter tokens, in layout order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Command {
    kind: CommandKind,
    params: Vec<u8>,
}

impl Command {
    pub fn new(kind: CommandKind, params: Vec<u8>) -> Result<Self, CadSeqError> {
        if params.len() != kind.arity() {
            return Err(CadSeqError::Arity {
                kind,
                expected: kind.arity(),
                got: params.len(),
            });
        }
        Ok(Self { kind, params })
    }

    pub fn sol() -> Self {
        Self {
            kind: CommandKind::Sol,
            params: Vec::new(),
        }
    }

    pub fn eos() -> Self {
        Self {
            kind: CommandKind::Eos,
            params: Vec::new(),
        }
    }

    pub fn line(x: u8, y: u8) -> Self {
        Self {
            kind: CommandKind::Line,
            params: vec![x, y],
        }
    }

    pub fn arc(x: u8, y: u8, alpha: u8, flag: u8) -> Self {
        Self {
            kind: CommandKind::Arc,
            params: vec![x, y, alpha, flag],
        }
    }

    pub fn circle(x: u8, y: u8, r: u8) -> Self {
        Self {
            kind: CommandKind::Circle,
            params: vec![x, y, r],
        }
    }

    /// `[theta, phi, gamma, px, py, pz, s, e1, e2, b, u]`.
    pub fn extrude(params: [u8; 11]) -> Self {
        Self {
            kind: CommandKind::Extrude,
            params: params.to_vec(),
        }
    }

    pub fn kind(&self) -> CommandKind {
        self.kind
    }

    pub fn params(&self) -> &[u8] {
        &self.params
    }

    pub fn get(&self, slot: SlotName) -> Option<u8> {
        self.kind
            .layout()
            .iter()
            .position(|&s| s == slot)
            .map(|i| self.params[i])
    }

    pub fn slots(&self) -> impl Iterator<Item = ParamSlot> + '_ {
        self.kind
            .layout()
            .iter()
            .zip(&self.params)
            .map(|(&name, &value)| ParamSlot {
                value,
                kind: name.kind(),
                name,
            })
    }
}

/// An ordered list of commands. Grammar is not enforced on construction;
/// use [`validate`] for that.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct CadSequence {
    commands: Vec<Command>,
}

impl CadSequence {
    pub fn new(commands: Vec<Command>) -> Self {
        Self { commands }
    }

    /// Builds a sequence and enforces the length and parameter-count limits.
    pub fn bounded(commands: Vec<Command>) -> Result<Self, CadSeqError> {
        let seq = Self { commands };
        seq.check_bounds()?;
        Ok(seq)
    }

    pub fn check_bounds(&self) -> Result<(), CadSeqError> {
        if self.commands.len() > MAX_COMMANDS {
            return Err(CadSeqError::TooLong(self.commands.len()));
        }
        let n = self.param_count();
        if n > MAX_PARAMS {
            return Err(CadSeqError::TooManyParams(n));
        }
        Ok(())
    }

    pub fn commands(&self) -> &[Command] {
        &self.commands
    }

    pub fn kinds(&self) -> impl Iterator<Item = CommandKind> + '_ {
        self.commands.iter().map(Command::kind)
    }

    pub fn len(&self) -> usize {
        self.commands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.commands.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.commands.iter().map(|c| c.params.len()).sum()
    }

    /// Command ids followed by all parameter tokens; equality on this key is
    /// the notion of "same model" used for uniqueness and novelty.
    pub fn token_key(&self) -> Vec<u16> {
        let mut key = Vec::with_capacity(self.len() + self.param_count());
        for c in &self.commands {
            key.push(c.kind.id() as u16);
            key.extend(c.params.iter().map(|&p| p as u16));
        }
        key
    }
}

/// Maps a real value in `[0, 1]` to the nearest of 256 levels (ties round up).
pub fn quantize(value: f64) -> Result<u8, CadSeqError> {
    if !(0.0..=1.0).contains(&value) {
        return Err(CadSeqError::OutOfDomain(value));
    }
    Ok((value * 255.0 + 0.5).floor().min(255.0) as u8)
}

pub fn dequantize(token: u8) -> f64 {
    token as f64 / 255.0
}
