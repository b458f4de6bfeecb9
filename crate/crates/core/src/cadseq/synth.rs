//! Random grammatical sequences for smoke corpora and property tests.

use rand::Rng;

use super::{CadSequence, Command};

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    /// Shortest sequence, terminator included (at least 4).
    pub min_commands: usize,
    /// Longest sequence, terminator included.
    pub max_commands: usize,
    pub max_sketches: usize,
    pub max_loops: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            min_commands: 4,
            max_commands: 12,
            max_sketches: 2,
            max_loops: 2,
        }
    }
}

pub fn random_sequence<R: Rng + ?Sized>(rng: &mut R, cfg: &SynthConfig) -> CadSequence {
    let lo = cfg.min_commands.max(4);
    let hi = cfg.max_commands.max(lo);
    let n = rng.random_range(lo..=hi);
    random_sequence_with_len(rng, n, cfg.max_sketches, cfg.max_loops)
}

/// A valid sequence with exactly `n` commands (`n >= 4`).
pub fn random_sequence_with_len<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    max_sketches: usize,
    max_loops: usize,
) -> CadSequence {
    assert!(n >= 4, "a legal model needs at least 4 commands");
    let budget = n - 1;
    let max_k = (budget / 3).min(max_sketches.max(1));
    let k = rng.random_range(1..=max_k);
    let sizes = split(rng, budget, k, 3);
    let mut cmds = Vec::with_capacity(n);
    for (i, &size) in sizes.iter().enumerate() {
        // size = extrude + loops, each loop >= 2 commands
        let loop_budget = size - 1;
        let max_l = (loop_budget / 2).min(max_loops.max(1));
        let l = rng.random_range(1..=max_l);
        for loop_len in split(rng, loop_budget, l, 2) {
            cmds.push(Command::sol());
            push_loop(rng, &mut cmds, loop_len - 1);
        }
        cmds.push(random_extrude(rng, i == 0));
    }
    cmds.push(Command::eos());
    debug_assert_eq!(cmds.len(), n);
    CadSequence::new(cmds)
}

/// Splits `total` into `parts` pieces of at least `min` each.
fn split<R: Rng + ?Sized>(rng: &mut R, total: usize, parts: usize, min: usize) -> Vec<usize> {
    let mut sizes = vec![min; parts];
    for _ in 0..(total - min * parts) {
        let i = rng.random_range(0..parts);
        sizes[i] += 1;
    }
    sizes
}

fn push_loop<R: Rng + ?Sized>(rng: &mut R, cmds: &mut Vec<Command>, curves: usize) {
    let cx = rng.random_range(80..=176) as f64;
    let cy = rng.random_range(80..=176) as f64;
    if curves == 1 {
        let r = rng.random_range(12..=72);
        cmds.push(Command::circle(cx as u8, cy as u8, r));
        return;
    }
    let radius = rng.random_range(24..=72) as f64;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    for j in 0..curves {
        let a = phase + std::f64::consts::TAU * (j + 1) as f64 / curves as f64;
        let x = (cx + radius * a.cos()).round().clamp(0.0, 255.0) as u8;
        let y = (cy + radius * a.sin()).round().clamp(0.0, 255.0) as u8;
        if rng.random_bool(0.25) {
            let sweep = rng.random_range(24..=96);
            cmds.push(Command::arc(x, y, sweep, rng.random_range(0..2)));
        } else {
            cmds.push(Command::line(x, y));
        }
    }
}

fn random_extrude<R: Rng + ?Sized>(rng: &mut R, first: bool) -> Command {
    // a handful of canonical sketch planes, as in real part corpora
    const PLANES: [(u8, u8, u8); 3] = [(0, 0, 0), (128, 0, 0), (128, 64, 0)];
    let (theta, phi, gamma) = PLANES[rng.random_range(0..PLANES.len())];
    let b = if first { 0 } else { rng.random_range(0..4) };
    Command::extrude([
        theta,
        phi,
        gamma,
        rng.random_range(64..=192),
        rng.random_range(64..=192),
        rng.random_range(64..=192),
        rng.random_range(96..=224),
        rng.random_range(16..=128),
        0,
        b,
        0,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cadseq::validate;
    use rand::SeedableRng;

    #[test]
    fn random_sequences_are_valid_and_bounded() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let cfg = SynthConfig::default();
        for _ in 0..500 {
            let s = random_sequence(&mut rng, &cfg);
            let r = validate(&s);
            assert!(r.valid, "{s:?} {r:?}");
            assert!(s.len() >= 4 && s.len() <= cfg.max_commands);
        }
    }

    #[test]
    fn exact_lengths() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for n in 4..=40 {
            let s = random_sequence_with_len(&mut rng, n, 3, 3);
            assert_eq!(s.len(), n);
            assert!(validate(&s).valid);
        }
    }
}
