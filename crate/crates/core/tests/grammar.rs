use cadiff::cadseq::{validate, CadSequence, Command, CommandKind};
use regex::Regex;

const LETTERS: [(char, CommandKind); 6] = [
    ('S', CommandKind::Sol),
    ('L', CommandKind::Line),
    ('A', CommandKind::Arc),
    ('C', CommandKind::Circle),
    ('E', CommandKind::Extrude),
    ('O', CommandKind::Eos),
];

fn command(kind: CommandKind) -> Command {
    match kind {
        CommandKind::Sol => Command::sol(),
        CommandKind::Line => Command::line(10, 20),
        CommandKind::Arc => Command::arc(30, 40, 64, 1),
        CommandKind::Circle => Command::circle(128, 128, 30),
        CommandKind::Extrude => Command::extrude([0, 0, 0, 128, 128, 128, 200, 50, 0, 0, 0]),
        CommandKind::Eos => Command::eos(),
    }
}

#[test]
fn validator_agrees_with_the_regular_language() {
    let lang = Regex::new(r"^((S[LAC]+)+E)+O$").unwrap();
    let mut words = vec![String::new()];
    let mut checked = 0;
    for _ in 0..6 {
        let mut next = Vec::new();
        for w in &words {
            for (c, _) in LETTERS {
                next.push(format!("{w}{c}"));
            }
        }
        for w in &next {
            let seq = CadSequence::new(
                w.chars()
                    .map(|c| command(LETTERS.iter().find(|(l, _)| *l == c).unwrap().1))
                    .collect(),
            );
            assert_eq!(validate(&seq).valid, lang.is_match(w), "{w}");
            checked += 1;
        }
        words = next;
    }
    assert_eq!(checked, (1..=6).map(|k| 6usize.pow(k)).sum::<usize>());
}
