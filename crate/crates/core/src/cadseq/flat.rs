use super::{CadSeqError, CadSequence, CommandKind, ParamKind, MAX_PARAMS, PAD_TOKEN};

/// Owner index carried by padding positions.
pub const PAD_OWNER: usize = usize::MAX;

/// Per-position type tag of a flattened parameter sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SlotTag {
    Param(ParamKind),
    Pad,
}

/// All effective parameters of a sequence laid out one after another, with
/// the owning command repeated at every slot it owns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlatParamSeq {
    /// Token per position: 0..=255, or [`PAD_TOKEN`].
    pub tokens: Vec<u16>,
    pub kinds: Vec<SlotTag>,
    /// Command instance index (not kind) owning each position.
    pub owners: Vec<usize>,
    pub repeated_cmds: Vec<Option<CommandKind>>,
}

impl FlatParamSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of non-padding positions; they always form a prefix.
    pub fn effective_len(&self) -> usize {
        self.kinds.iter().take_while(|k| **k != SlotTag::Pad).count()
    }

    /// Index of each position within its owning command's layout (0 for PAD).
    pub fn slot_offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        let mut prev = PAD_OWNER;
        let mut offset = 0;
        for &owner in &self.owners {
            if owner == PAD_OWNER {
                out.push(0);
                continue;
            }
            if owner == prev {
                offset += 1;
            } else {
                offset = 0;
                prev = owner;
            }
            out.push(offset);
        }
        out
    }
}

/// Flattens to the fixed length [`MAX_PARAMS`].
pub fn flatten(seq: &CadSequence) -> Result<FlatParamSeq, CadSeqError> {
    flatten_padded(seq, MAX_PARAMS)
}

/// Flattens and pads to `len` positions.
pub fn flatten_padded(seq: &CadSequence, len: usize) -> Result<FlatParamSeq, CadSeqError> {
    let n = seq.param_count();
    if n > len {
        return Err(CadSeqError::TooManyParams(n));
    }
    let mut flat = FlatParamSeq {
        tokens: Vec::with_capacity(len),
        kinds: Vec::with_capacity(len),
        owners: Vec::with_capacity(len),
        repeated_cmds: Vec::with_capacity(len),
    };
    for (owner, cmd) in seq.commands().iter().enumerate() {
        for slot in cmd.slots() {
            flat.tokens.push(slot.value as u16);
            flat.kinds.push(SlotTag::Param(slot.kind));
            flat.owners.push(owner);
            flat.repeated_cmds.push(Some(cmd.kind()));
        }
    }
    flat.tokens.resize(len, PAD_TOKEN);
    flat.kinds.resize(len, SlotTag::Pad);
    flat.owners.resize(len, PAD_OWNER);
    flat.repeated_cmds.resize(len, None);
    Ok(flat)
}

/// Splits a flattened sequence back into the per-command parameter lists of a
/// sequence with `n_commands` commands.
pub fn regroup(flat: &FlatParamSeq, n_commands: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new(); n_commands];
    for (&tok, &owner) in flat.tokens.iter().zip(&flat.owners) {
        if owner != PAD_OWNER && owner < n_commands {
            out[owner].push(tok as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cadseq::{synth, Command};
    use rand::SeedableRng;

    #[test]
    fn circle_line_line_example() {
        let seq = CadSequence::new(vec![
            Command::circle(4, 3, 5),
            Command::line(2, 3),
            Command::line(2, 6),
        ]);
        let flat = flatten(&seq).unwrap();
        assert_eq!(flat.len(), MAX_PARAMS);
        assert_eq!(&flat.tokens[..7], &[4, 3, 5, 2, 3, 2, 6]);
        assert!(flat.tokens[7..].iter().all(|&t| t == PAD_TOKEN));
        use CommandKind::*;
        assert_eq!(
            &flat.repeated_cmds[..7],
            &[
                Some(Circle),
                Some(Circle),
                Some(Circle),
                Some(Line),
                Some(Line),
                Some(Line),
                Some(Line)
            ]
        );
        assert_eq!(&flat.owners[..7], &[0, 0, 0, 1, 1, 2, 2]);
        assert_eq!(flat.owners[7], PAD_OWNER);
        assert_eq!(&flat.slot_offsets()[..7], &[0, 1, 2, 0, 1, 0, 1]);
        assert_eq!(flat.effective_len(), 7);
    }

    #[test]
    fn sol_eos_is_all_pad() {
        let seq = CadSequence::new(vec![Command::sol(), Command::eos()]);
        let flat = flatten(&seq).unwrap();
        assert!(flat.tokens.iter().all(|&t| t == PAD_TOKEN));
        assert!(flat.kinds.iter().all(|&k| k == SlotTag::Pad));
    }

    #[test]
    fn owners_index_instances() {
        let seq = CadSequence::new(vec![
            Command::sol(),
            Command::line(1, 1),
            Command::line(2, 2),
            Command::extrude([7; 11]),
            Command::eos(),
        ]);
        let flat = flatten_padded(&seq, 20).unwrap();
        assert_eq!(&flat.owners[..4], &[1, 1, 2, 2]);
        assert!(flat.owners[4..15].iter().all(|&o| o == 3));
        assert!(flat_params_err(&seq, 10));
    }

    fn flat_params_err(seq: &CadSequence, len: usize) -> bool {
        matches!(flatten_padded(seq, len), Err(CadSeqError::TooManyParams(15)))
    }

    #[test]
    fn flatten_regroup_round_trips_on_random_corpus() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let seq = synth::random_sequence(&mut rng, &synth::SynthConfig::default());
            let flat = flatten(&seq).unwrap();
            let groups = regroup(&flat, seq.len());
            let kinds: Vec<CommandKind> = seq.kinds().collect();
            let rebuilt = CadSequence::new(
                kinds
                    .iter()
                    .zip(groups)
                    .map(|(&k, p)| Command::new(k, p).unwrap())
                    .collect(),
            );
            assert_eq!(rebuilt, seq);
            let w = flat.owners[..flat.effective_len()].windows(2);
            assert!(w.clone().all(|p| p[0] <= p[1]));
            assert_eq!(seq.param_count(), flat.effective_len());
        }
    }
}
