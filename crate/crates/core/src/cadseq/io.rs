//! Native JSON and DeepCAD-style fixed-width row formats.
//!
//! JSON: `{"commands":[{"cmd":"Line","params":{"x":128,"y":64}}, ...]}`, one
//! key per effective slot, slot names as in [`SlotName::label`]. A file may
//! hold a single object or an array of them.
//!
//! Rows: 17 space-separated integers per line, the command id followed by the
//! 16 parameter cells `x y alpha f r theta phi gamma px py pz s e1 e2 b u`
//! with `-1` in unused cells. Blank lines separate sequences.

use serde::ser::{SerializeMap, SerializeSeq};
use serde::{Serialize, Serializer};
use serde_json::Value;

use super::{CadSeqError, CadSequence, Command, CommandKind, SlotName, MAX_COMMANDS};

pub const ROW_CELLS: usize = 17;

/// Builds a sequence from fixed-width rows. A run of `EOS` rows after the
/// first `EOS` is treated as padding and dropped.
pub fn parse_rows(rows: &[Vec<i64>]) -> Result<CadSequence, CadSeqError> {
    let mut end = rows.len();
    if let Some(first_eos) = rows
        .iter()
        .position(|r| r.first() == Some(&(CommandKind::Eos.id() as i64)))
    {
        if rows[first_eos..]
            .iter()
            .all(|r| r.first() == Some(&(CommandKind::Eos.id() as i64)))
        {
            end = first_eos + 1;
        }
    }
    let rows = &rows[..end];
    if rows.len() > MAX_COMMANDS {
        return Err(CadSeqError::TooLong(rows.len()));
    }
    let mut commands = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        if row.len() != ROW_CELLS {
            return Err(CadSeqError::MalformedRow {
                row: i,
                found: row.len(),
            });
        }
        let kind = usize::try_from(row[0])
            .ok()
            .and_then(CommandKind::from_id)
            .ok_or(CadSeqError::UnknownCommandId(row[0]))?;
        let mut params = Vec::with_capacity(kind.arity());
        for &slot in kind.layout() {
            let v = row[slot.cell()];
            if v == -1 {
                return Err(CadSeqError::MissingParameter { row: i, slot });
            }
            if !(0..=255).contains(&v) {
                return Err(CadSeqError::OutOfRange {
                    row: i,
                    slot,
                    value: v,
                });
            }
            params.push(v as u8);
        }
        commands.push(Command::new(kind, params)?);
    }
    CadSequence::bounded(commands)
}

/// Parses a row-format text file into sequences (blank-line separated).
pub fn parse_row_text(text: &str) -> Result<Vec<CadSequence>, CadSeqError> {
    let mut out = Vec::new();
    let mut block: Vec<Vec<i64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            if !block.is_empty() {
                out.push(parse_rows(&block)?);
                block.clear();
            }
            continue;
        }
        let cells: Result<Vec<i64>, _> = line.split_whitespace().map(str::parse).collect();
        let cells = cells.map_err(|_| CadSeqError::MalformedRow {
            row: lineno,
            found: line.split_whitespace().count(),
        })?;
        block.push(cells);
    }
    if !block.is_empty() {
        out.push(parse_rows(&block)?);
    }
    Ok(out)
}

pub fn to_rows(seq: &CadSequence) -> String {
    let mut out = String::new();
    for cmd in seq.commands() {
        let mut cells = [-1i64; ROW_CELLS];
        cells[0] = cmd.kind().id() as i64;
        for slot in cmd.slots() {
            cells[slot.name.cell()] = slot.value as i64;
        }
        let line: Vec<String> = cells.iter().map(i64::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

struct JsonCommand<'a>(&'a Command);

impl Serialize for JsonCommand<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        struct Params<'a>(&'a Command);
        impl Serialize for Params<'_> {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                let mut m = s.serialize_map(Some(self.0.params().len()))?;
                for slot in self.0.slots() {
                    m.serialize_entry(slot.name.label(), &slot.value)?;
                }
                m.end()
            }
        }
        let mut m = s.serialize_map(Some(2))?;
        m.serialize_entry("cmd", self.0.kind().name())?;
        m.serialize_entry("params", &Params(self.0))?;
        m.end()
    }
}

impl Serialize for CadSequence {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        struct Cmds<'a>(&'a [Command]);
        impl Serialize for Cmds<'_> {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                let mut seq = s.serialize_seq(Some(self.0.len()))?;
                for c in self.0 {
                    seq.serialize_element(&JsonCommand(c))?;
                }
                seq.end()
            }
        }
        let mut m = s.serialize_map(Some(1))?;
        m.serialize_entry("commands", &Cmds(self.commands()))?;
        m.end()
    }
}

pub fn to_json(seq: &CadSequence) -> String {
    serde_json::to_string(seq).expect("sequence serialization is infallible")
}

/// One sequence per line inside a top-level array.
pub fn to_json_many(seqs: &[CadSequence]) -> String {
    if seqs.is_empty() {
        return "[]\n".to_string();
    }
    let body: Vec<String> = seqs.iter().map(|s| format!("  {}", to_json(s))).collect();
    format!("[\n{}\n]\n", body.join(",\n"))
}

pub fn from_json(text: &str) -> Result<CadSequence, CadSeqError> {
    let v: Value =
        serde_json::from_str(text).map_err(|e| CadSeqError::MalformedJson(e.to_string()))?;
    sequence_from_value(&v)
}

/// Accepts either a single sequence object or an array of them.
pub fn from_json_many(text: &str) -> Result<Vec<CadSequence>, CadSeqError> {
    let v: Value =
        serde_json::from_str(text).map_err(|e| CadSeqError::MalformedJson(e.to_string()))?;
    match &v {
        Value::Array(items) => items.iter().map(sequence_from_value).collect(),
        Value::Object(_) => Ok(vec![sequence_from_value(&v)?]),
        _ => Err(schema("top level must be an object or an array")),
    }
}

fn schema(msg: impl Into<String>) -> CadSeqError {
    CadSeqError::SchemaViolation(msg.into())
}

fn sequence_from_value(v: &Value) -> Result<CadSequence, CadSeqError> {
    let obj = v.as_object().ok_or_else(|| schema("sequence must be an object"))?;
    if let Some(extra) = obj.keys().find(|k| *k != "commands") {
        return Err(schema(format!("unexpected key `{extra}`")));
    }
    let cmds = obj
        .get("commands")
        .and_then(Value::as_array)
        .ok_or_else(|| schema("missing `commands` array"))?;
    let mut out = Vec::with_capacity(cmds.len());
    for (i, c) in cmds.iter().enumerate() {
        let c = c
            .as_object()
            .ok_or_else(|| schema(format!("command {i} must be an object")))?;
        let name = c
            .get("cmd")
            .and_then(Value::as_str)
            .ok_or_else(|| schema(format!("command {i}: missing `cmd` string")))?;
        let kind = CommandKind::from_name(name)
            .ok_or_else(|| schema(format!("command {i}: unknown command `{name}`")))?;
        let empty = serde_json::Map::new();
        let params = match c.get("params") {
            None => &empty,
            Some(p) => p
                .as_object()
                .ok_or_else(|| schema(format!("command {i}: `params` must be an object")))?,
        };
        for key in params.keys() {
            let ok = SlotName::from_label(key).is_some_and(|s| kind.layout().contains(&s));
            if !ok {
                return Err(schema(format!("command {i}: `{key}` is not a {kind} slot")));
            }
        }
        let mut values = Vec::with_capacity(kind.arity());
        for &slot in kind.layout() {
            let raw = params
                .get(slot.label())
                .ok_or_else(|| schema(format!("command {i}: missing slot `{slot}`")))?;
            let n = raw
                .as_u64()
                .filter(|&n| n <= 255)
                .ok_or_else(|| schema(format!("command {i}: `{slot}` must be an integer 0..=255")))?;
            values.push(n as u8);
        }
        out.push(Command::new(kind, values)?);
    }
    CadSequence::bounded(out).map_err(|e| schema(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cadseq::synth;
    use rand::SeedableRng;

    fn row(id: i64, cells: &[(SlotName, i64)]) -> Vec<i64> {
        let mut r = vec![-1; ROW_CELLS];
        r[0] = id;
        for &(s, v) in cells {
            r[s.cell()] = v;
        }
        r
    }

    #[test]
    fn eos_row() {
        let s = parse_rows(&[row(5, &[])]).unwrap();
        assert_eq!(s, CadSequence::new(vec![Command::eos()]));
    }

    #[test]
    fn line_row() {
        let s = parse_rows(&[row(1, &[(SlotName::X, 128), (SlotName::Y, 64)])]).unwrap();
        assert_eq!(s.commands()[0], Command::line(128, 64));
    }

    #[test]
    fn row_errors() {
        assert_eq!(
            parse_rows(&[row(7, &[])]),
            Err(CadSeqError::UnknownCommandId(7))
        );
        assert_eq!(
            parse_rows(&[row(1, &[(SlotName::X, 5)])]),
            Err(CadSeqError::MissingParameter {
                row: 0,
                slot: SlotName::Y
            })
        );
        assert!(matches!(
            parse_rows(&[row(1, &[(SlotName::X, 5), (SlotName::Y, 300)])]),
            Err(CadSeqError::OutOfRange { value: 300, .. })
        ));
        let too_long: Vec<Vec<i64>> = (0..61).map(|_| row(0, &[])).collect();
        assert_eq!(parse_rows(&too_long), Err(CadSeqError::TooLong(61)));
        assert!(matches!(
            parse_rows(&[vec![1, 2, 3]]),
            Err(CadSeqError::MalformedRow { found: 3, .. })
        ));
    }

    #[test]
    fn trailing_eos_padding_is_dropped() {
        let mut rows = vec![row(0, &[]), row(3, &[(SlotName::X, 1), (SlotName::Y, 2), (SlotName::R, 3)])];
        rows.push(row(4, &[]).iter().map(|&c| if c == -1 { 0 } else { c }).collect());
        rows.extend((0..5).map(|_| row(5, &[])));
        let s = parse_rows(&rows).unwrap();
        assert_eq!(s.len(), 4);
    }

    #[test]
    fn json_shape() {
        let s = CadSequence::new(vec![
            Command::sol(),
            Command::line(128, 64),
            Command::eos(),
        ]);
        assert_eq!(
            to_json(&s),
            r#"{"commands":[{"cmd":"SOL","params":{}},{"cmd":"Line","params":{"x":128,"y":64}},{"cmd":"EOS","params":{}}]}"#
        );
    }

    #[test]
    fn json_errors() {
        assert!(matches!(
            from_json("{not json"),
            Err(CadSeqError::MalformedJson(_))
        ));
        assert!(matches!(
            from_json(r#"{"commands":[{"cmd":"Spline","params":{}}]}"#),
            Err(CadSeqError::SchemaViolation(_))
        ));
        assert!(matches!(
            from_json(r#"{"commands":[{"cmd":"Line","params":{"x":1}}]}"#),
            Err(CadSeqError::SchemaViolation(_))
        ));
        assert!(matches!(
            from_json(r#"{"commands":[{"cmd":"Line","params":{"x":1,"y":2,"r":3}}]}"#),
            Err(CadSeqError::SchemaViolation(_))
        ));
        assert!(matches!(
            from_json(r#"{"commands":[{"cmd":"Line","params":{"x":1,"y":256}}]}"#),
            Err(CadSeqError::SchemaViolation(_))
        ));
    }

    #[test]
    fn corpus_round_trips_through_json_and_rows() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let corpus: Vec<CadSequence> = (0..50)
            .map(|_| synth::random_sequence(&mut rng, &synth::SynthConfig::default()))
            .collect();
        for s in &corpus {
            assert_eq!(&from_json(&to_json(s)).unwrap(), s);
        }
        assert_eq!(from_json_many(&to_json_many(&corpus)).unwrap(), corpus);
        let text: Vec<String> = corpus.iter().map(to_rows).collect();
        assert_eq!(parse_row_text(&text.join("\n")).unwrap(), corpus);
    }
}
