use std::sync::Arc;

use cadiff::cadseq::synth::random_sequence_with_len;
use cadiff::cadseq::{CadSequence, Command, CommandKind};
use cadiff::denoiser::DenoiserConfig;
use cadiff::engine::{
    chain_forward_sample, chain_kl_grad, chain_posterior, chain_reverse_dist, decode_commands,
    forward_sample, kl_loss_grad, reverse_dist, sample, Cascade, Checkpoint, EngineError,
    PosKind, SampleConfig, TokenSeq, TrainConfig, Trainer,
};
use cadiff::kernels::{
    command_chain, make_schedule, param_chain, Chain, EmpiricalPrior, KernelChoice,
    ScheduleConfig,
};
use cadiff::par::Exec;
use cadiff::rng::substream;
use ndarray::Array2;
use rand::Rng;

fn toy_chains(steps: usize) -> Vec<(String, Chain)> {
    let cfg = ScheduleConfig::default().with_steps(steps);
    let prior = EmpiricalPrior::new(vec![0, 2, 3], vec![0.5, 0.3, 0.2]).unwrap();
    let mut out = vec![("command".to_string(), command_chain(&cfg, 5).unwrap().0)];
    for choice in [KernelChoice::Gaussian, KernelChoice::Scale, KernelChoice::Uniform] {
        out.push((format!("{choice:?}"), param_chain(&cfg, choice, 5, None).unwrap()));
    }
    out.push(("prior".into(), param_chain(&cfg, KernelChoice::Prior, 5, Some(&prior)).unwrap()));
    out
}

/// Joint of `(x_{t-1}, x_t)` per `t` from `x0`, by enumerating every path.
fn path_joint(c: &Chain, x0: usize) -> Vec<Array2<f64>> {
    let n = c.states();
    let mut joint = vec![Array2::zeros((n, n)); c.steps() + 1];
    fn walk(c: &Chain, t: usize, x: usize, p: f64, joint: &mut [Array2<f64>]) {
        if t > c.steps() || p == 0.0 {
            return;
        }
        for y in 0..c.states() {
            let q = p * c.step_entry(t, y, x);
            joint[t][[x, y]] += q;
            walk(c, t + 1, y, q, joint);
        }
    }
    walk(c, 1, x0, 1.0, &mut joint);
    joint
}

#[test]
fn posterior_matches_enumerated_joint() {
    for steps in [1, 3, 6] {
        for (name, c) in toy_chains(steps) {
            for x0 in 0..c.valid_states() {
                let joint = path_joint(&c, x0);
                for t in 1..=steps {
                    for xt in 0..c.states() {
                        let col = joint[t].column(xt);
                        let z = col.sum();
                        match chain_posterior(&c, xt, x0, t) {
                            Ok(post) => {
                                assert!(z > 0.0, "{name}: mass where the joint has none");
                                for j in 0..c.states() {
                                    let err = (post[j] - col[j] / z).abs();
                                    assert!(err < 1e-12, "{name} t={t} xt={xt} x0={x0}: {err}");
                                }
                            }
                            Err(EngineError::ZeroMass { .. }) => {
                                assert!(z < 1e-300, "{name}: joint mass {z} rejected")
                            }
                            Err(e) => panic!("{e}"),
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn forward_frequencies_match_marginals() {
    let cfg = ScheduleConfig::default().with_steps(10);
    let c = param_chain(&cfg, KernelChoice::Gaussian, 4, None).unwrap();
    let mut rng = substream(7, &[0]);
    let draws = 40_000;
    for (x0, t) in [(0, 3), (2, 7)] {
        let mut counts = vec![0usize; c.states()];
        for _ in 0..draws {
            counts[chain_forward_sample(&c, x0, t, &mut rng)] += 1;
        }
        let col = c.cumulative_col(t, x0);
        for (j, &k) in counts.iter().enumerate() {
            let p = col[j];
            let sd = (draws as f64 * p * (1.0 - p)).sqrt();
            let dev = (k as f64 - draws as f64 * p).abs();
            assert!(dev <= 4.0 * sd + 1e-9, "state {j}: {k} vs {}", draws as f64 * p);
        }
    }
}

fn literal_reverse(c: &Chain, t: usize, xt: usize, logits: &[f64]) -> Vec<f64> {
    let cand: Vec<usize> = (0..c.valid_states())
        .filter(|&k| c.cumulative_entry(t, xt, k) > 0.0)
        .collect();
    let m = cand.iter().map(|&k| logits[k]).fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = cand.iter().map(|&k| (logits[k] - m).exp()).sum();
    let mut p = vec![0.0; c.states()];
    for &k in &cand {
        let w = (logits[k] - m).exp() / s;
        for (pj, q) in p.iter_mut().zip(chain_posterior(c, xt, k, t).unwrap()) {
            *pj += w * q;
        }
    }
    p
}

#[test]
fn reverse_mixture_and_kl_match_direct_sums() {
    let mut rng = substream(3, &[1]);
    for (name, c) in toy_chains(6) {
        let kv = c.valid_states();
        for t in 1..=6 {
            let x0: Vec<usize> = (0..8).map(|_| rng.random_range(0..kv)).collect();
            let xt: Vec<usize> = x0.iter().map(|&x| chain_forward_sample(&c, x, t, &mut rng)).collect();
            let logits = Array2::from_shape_fn((8, kv), |_| rng.random_range(-2.0..2.0));
            let p = chain_reverse_dist(&c, t, &xt, logits.view()).unwrap();
            let loss = chain_kl_grad(&c, t, &x0, &xt, logits.view(), 0.0).unwrap();
            for i in 0..8 {
                let lit = literal_reverse(&c, t, xt[i], logits.row(i).as_slice().unwrap());
                let q = chain_posterior(&c, xt[i], x0[i], t).unwrap();
                let mut kl = 0.0;
                for j in 0..c.states() {
                    assert!((p[[i, j]] - lit[j]).abs() < 1e-12, "{name} t={t}");
                    if q[j] > 0.0 {
                        kl += q[j] * (q[j].ln() - lit[j].max(1e-12).ln());
                    }
                }
                assert!((loss.kl[i] - kl).abs() < 1e-10, "{name} t={t}: {} vs {kl}", loss.kl[i]);
            }
        }
    }
}

#[test]
fn one_hot_prediction_recovers_posterior() {
    for (_, c) in toy_chains(5) {
        for t in 2..=5 {
            for x0 in 0..c.valid_states() {
                let xt = c.absorbing();
                let mut logits = Array2::from_elem((1, c.valid_states()), -1e4);
                logits[[0, x0]] = 0.0;
                let p = chain_reverse_dist(&c, t, &[xt], logits.view()).unwrap();
                let q = chain_posterior(&c, xt, x0, t).unwrap();
                for j in 0..c.states() {
                    assert!((p[[0, j]] - q[j]).abs() < 1e-12);
                }
                let l = chain_kl_grad(&c, t, &[x0], &[xt], logits.view(), 0.0).unwrap();
                assert!(l.kl[0].abs() < 1e-12);
            }
        }
    }
}

#[test]
fn kl_gradient_matches_finite_differences() {
    let mut rng = substream(5, &[2]);
    for aux in [0.0, 0.3] {
        for (name, c) in toy_chains(6) {
            let kv = c.valid_states();
            for t in [2, 4, 6] {
                let x0: Vec<usize> = (0..4).map(|_| rng.random_range(0..kv)).collect();
                let xt: Vec<usize> =
                    x0.iter().map(|&x| chain_forward_sample(&c, x, t, &mut rng)).collect();
                let logits = Array2::from_shape_fn((4, kv), |_| rng.random_range(-1.5..1.5));
                let f = |l: &Array2<f64>| {
                    let r = chain_kl_grad(&c, t, &x0, &xt, l.view(), aux).unwrap();
                    r.kl.iter().sum::<f64>() + aux * r.ce.iter().sum::<f64>()
                };
                let g = chain_kl_grad(&c, t, &x0, &xt, logits.view(), aux).unwrap().dlogits;
                let h = 1e-6;
                for i in 0..4 {
                    for k in 0..kv {
                        let mut a = logits.clone();
                        a[[i, k]] += h;
                        let mut b = logits.clone();
                        b[[i, k]] -= h;
                        let fd = (f(&a) - f(&b)) / (2.0 * h);
                        assert!(
                            (fd - g[[i, k]]).abs() < 1e-6 * (1.0 + fd.abs()),
                            "{name} t={t} ({i},{k}): fd {fd} vs {}",
                            g[[i, k]]
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn clamped_positions_are_untouched() {
    let prior = EmpiricalPrior::uniform(vec![0, 1, 2, 3]).unwrap();
    let s = make_schedule(&ScheduleConfig::default().with_steps(10), &prior).unwrap();
    let x0 = TokenSeq::new(
        vec![3, 200, 12, 1],
        vec![PosKind::Command, PosKind::Clamped, PosKind::Coordinate, PosKind::Boolean],
    )
    .unwrap();
    let mut rng = substream(1, &[]);
    let xt = forward_sample(&x0, 10, &s, &mut rng).unwrap();
    assert_eq!(xt.states[1], 200);
    assert_eq!(xt.states[0], 6);
    let logits = Array2::zeros((4, 256));
    assert!(matches!(
        reverse_dist(&xt, logits.view(), 10, &s),
        Err(EngineError::Shape(_))
    ));
    let cmd = TokenSeq::commands(vec![0, 6, 5]);
    let d = reverse_dist(&cmd, Array2::zeros((3, 6)).view(), 3, &s).unwrap();
    assert_eq!(d.probs[0].len(), 7);
    let clean = TokenSeq::commands(vec![0, 1, 5]);
    let lg = kl_loss_grad(&clean, 3, &cmd, Array2::zeros((3, 6)).view(), &s, 0.0).unwrap();
    assert_eq!(lg.positions, 3);
    assert!(forward_sample(&cmd, 11, &s, &mut rng).is_err());
}

#[test]
fn decoding_collapses_trailing_terminators() {
    let ids = |v: &[CommandKind]| v.iter().map(|k| k.id()).collect::<Vec<_>>();
    use CommandKind::*;
    let d = decode_commands(&ids(&[Sol, Line, Line, Extrude, Eos, Eos, Eos])).unwrap();
    assert_eq!(d, vec![Sol, Line, Line, Extrude, Eos]);
    let d = decode_commands(&ids(&[Sol, Eos, Line, Eos])).unwrap();
    assert_eq!(d, vec![Sol, Eos, Line, Eos]);
    let d = decode_commands(&ids(&[Sol, Line])).unwrap();
    assert_eq!(d, vec![Sol, Line]);
    assert!(matches!(decode_commands(&[0, 6, 5]), Err(EngineError::DecodeFailure(_))));
}

fn corpus(n: usize, seed: u64) -> Vec<CadSequence> {
    let mut rng = substream(seed, &[99]);
    (0..n)
        .map(|_| {
            let len = rng.random_range(4..=6);
            random_sequence_with_len(&mut rng, len, 1, 1)
        })
        .collect()
}

fn tiny_net() -> DenoiserConfig {
    DenoiserConfig {
        d_model: 16,
        n_blocks_cmd: 1,
        n_blocks_param: 1,
        n_heads: 2,
        ffn_mult: 2,
        max_cmd_len: 6,
        max_param_len: 40,
        ..DenoiserConfig::default()
    }
}

fn trainer(seed: u64, lr: f64) -> Trainer {
    let data = corpus(6, 1);
    let cascade = Cascade::for_corpus(
        &ScheduleConfig::default().with_steps(12),
        &tiny_net(),
        &data,
        seed,
    )
    .unwrap();
    let mut cfg = TrainConfig::new(seed);
    cfg.lr = lr;
    cfg.batch_size = 5;
    cfg.grad_chunk = 2;
    Trainer::new(cascade, &data, cfg).unwrap()
}

#[test]
fn zero_learning_rate_leaves_weights() {
    let mut tr = trainer(4, 0.0);
    let before = tr.cascade.cmd.params.clone();
    let rec = tr.step().unwrap();
    assert_eq!(tr.cascade.cmd.params, before);
    assert!(rec.loss_cmd.is_finite() && rec.loss_param.is_finite());
    assert_eq!(tr.iteration, 1);
}

#[test]
fn training_is_deterministic_across_backends() {
    let mut a = trainer(11, 1e-3);
    let mut b = trainer(11, 1e-3).with_exec(Exec::Sequential);
    let la = a.run_until(3, |_, _| Ok(())).unwrap();
    let lb = b.run_until(3, |_, _| Ok(())).unwrap();
    for (x, y) in la.iter().zip(&lb) {
        assert_eq!((x.loss_cmd, x.loss_param, x.t_mean), (y.loss_cmd, y.loss_param, y.t_mean));
    }
    assert_eq!(a.cascade.param.params, b.cascade.param.params);
    let mut c = trainer(12, 1e-3);
    c.run_until(3, |_, _| Ok(())).unwrap();
    assert_ne!(a.cascade.cmd.params, c.cascade.cmd.params);
}

#[test]
fn resuming_from_checkpoint_matches_uninterrupted_run() {
    let data = corpus(6, 1);
    let mut full = trainer(21, 1e-3);
    full.run_until(4, |_, _| Ok(())).unwrap();

    let mut half = trainer(21, 1e-3);
    half.run_until(2, |_, _| Ok(())).unwrap();
    let text = Checkpoint::from_trainer(&half).to_json();
    let ck = Checkpoint::from_json(&text).unwrap();
    assert_eq!(ck, Checkpoint::from_trainer(&half));
    let mut resumed = ck.trainer(&data, None).unwrap();
    resumed.run_until(4, |_, _| Ok(())).unwrap();
    assert_eq!(
        Checkpoint::from_trainer(&resumed).to_json(),
        Checkpoint::from_trainer(&full).to_json()
    );
}

#[test]
fn checkpoint_rejects_foreign_documents() {
    let tr = trainer(2, 1e-3);
    let mut ck = Checkpoint::from_trainer(&tr);
    ck.version = 99;
    assert!(Checkpoint::from_json(&ck.to_json()).is_err());
    assert!(Checkpoint::from_json("{}").is_err());
    let ck = Checkpoint::from_trainer(&tr);
    let other = make_schedule(&ScheduleConfig::default().with_steps(5), &ck.prior).unwrap();
    assert!(ck.cascade_with(Arc::new(other)).is_err());
    assert!(ck.trainer(&corpus(3, 1), Some(TrainConfig::new(3))).is_err());
}

#[test]
fn sampling_is_reproducible_and_independent_of_backend() {
    let tr = trainer(8, 1e-3);
    let cfg = SampleConfig {
        n: 4,
        seed: 17,
        condition: None,
    };
    let a = sample(&tr.cascade, &cfg, Exec::Parallel).unwrap();
    let b = sample(&tr.cascade, &cfg, Exec::Sequential).unwrap();
    assert_eq!(a.len(), 4);
    let fmt = |v: &[Result<CadSequence, EngineError>]| {
        v.iter().map(|r| format!("{r:?}")).collect::<Vec<_>>()
    };
    assert_eq!(fmt(&a), fmt(&b));
    for s in a.iter().flatten() {
        assert!(s.len() <= 6);
    }
    let cond = SampleConfig {
        condition: Some(4),
        ..cfg
    };
    assert!(sample(&tr.cascade, &cond, Exec::Sequential).is_err());
}

#[test]
fn oversized_examples_are_rejected() {
    let data = vec![CadSequence::new(
        std::iter::once(Command::sol())
            .chain((0..8).map(|i| Command::line(i, i)))
            .chain([Command::extrude([0; 11]), Command::eos()])
            .collect(),
    )];
    let cascade =
        Cascade::for_corpus(&ScheduleConfig::default().with_steps(4), &tiny_net(), &data, 0)
            .unwrap();
    assert!(Trainer::new(cascade, &data, TrainConfig::new(0)).is_err());
}
