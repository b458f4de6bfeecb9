use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use log::{info, warn};

use cadiff::cadseq::{
    from_json_many, parse_row_text, to_json_many, validate, CadSequence, CommandKind,
};
use cadiff::denoiser::DenoiserError;
use cadiff::engine::{
    self, forward_sample, Cascade, Checkpoint, EngineError, PosKind, SampleConfig, TokenSeq,
    Trainer,
};
use cadiff::evalgeo::{self, EvalError, MetricsConfig};
use cadiff::kernels::{make_schedule, ChainId, EmpiricalPrior, Schedule, ScheduleConfig, BOOLEAN_STATES};
use cadiff::par::Exec;

use crate::config::RunConfig;
use crate::{CorruptArgs, EvalArgs, ExportSvgArgs, SampleArgs, TrainArgs, ValidateArgs};

/// Failure caused by the data rather than by the invocation: exit code 1.
#[derive(Debug)]
pub struct DataError(pub String);

impl std::fmt::Display for DataError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DataError {}

fn data(msg: impl Into<String>) -> anyhow::Error {
    DataError(msg.into()).into()
}

/// Reads sequences in native JSON or, when the text does not start like
/// JSON, in row format.
pub fn load_sequences(path: &Path) -> Result<Vec<CadSequence>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let trimmed = text.trim_start();
    if trimmed.is_empty() {
        bail!("{} is empty", path.display());
    }
    let seqs = if trimmed.starts_with('[') || trimmed.starts_with('{') {
        from_json_many(&text)
    } else {
        parse_row_text(&text)
    }
    .with_context(|| format!("cannot parse {}", path.display()))?;
    Ok(seqs)
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn write_checkpoint(path: &Path, tr: &Trainer) -> Result<()> {
    let text = Checkpoint::from_trainer(tr).to_json();
    fs::write(path, text).with_context(|| format!("cannot write checkpoint {}", path.display()))
}

fn periodic_path(path: &Path, iter: u64) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("json");
    path.with_file_name(format!("{stem}-{iter:06}.{ext}"))
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read checkpoint {}", path.display()))?;
    Checkpoint::from_json(&text).with_context(|| format!("cannot load {}", path.display()))
}

fn engine_error(e: EngineError) -> anyhow::Error {
    match e {
        EngineError::NonFiniteLoss { .. } | EngineError::AbsorbingInData { .. } => {
            data(e.to_string())
        }
        e => e.into(),
    }
}

pub fn train(args: &TrainArgs, exec: Exec) -> Result<ExitCode> {
    let cfg = RunConfig::load(&args.config)?;
    let mut tb = cfg.train.clone().context("config has no train block")?;
    if let Some(n) = args.iterations {
        tb.config.iterations = n;
    }
    if let Some(s) = args.seed {
        tb.config.seed = s;
    }
    let ck_path = args.checkpoint.clone().unwrap_or(cfg.paths.checkpoint.clone());
    let log_path = args.log.clone().unwrap_or(cfg.paths.log.clone());

    let corpus = load_sequences(&tb.corpus)?;
    if corpus.is_empty() {
        bail!("corpus {} holds no sequences", tb.corpus.display());
    }
    for (i, s) in corpus.iter().enumerate() {
        let report = validate(s);
        if !report.valid {
            let rules: Vec<&str> = report.violations.iter().map(|v| v.rule.id()).collect();
            return Err(data(format!("corpus sequence {i} is invalid: {}", rules.join(", "))));
        }
    }

    let (mut trainer, log_file) = match &args.resume {
        Some(p) => {
            let ck = read_checkpoint(p)?;
            if ck.schedule != cfg.schedule || ck.net != cfg.net {
                bail!("schedule or net block differs from checkpoint {}", p.display());
            }
            let tr = ck.trainer(&corpus, Some(tb.config.clone())).map_err(engine_error)?;
            let f = OpenOptions::new().create(true).append(true).open(&log_path);
            (tr, f)
        }
        None => {
            let cascade = Cascade::for_corpus(&cfg.schedule, &cfg.net, &corpus, tb.config.seed)
                .map_err(engine_error)?;
            let tr = Trainer::new(cascade, &corpus, tb.config.clone()).map_err(engine_error)?;
            (tr, File::create(&log_path))
        }
    };
    let mut log =
        BufWriter::new(log_file.with_context(|| format!("cannot open log {}", log_path.display()))?);
    trainer = trainer.with_exec(exec);
    info!(
        "training {} sequences from iteration {} to {}",
        corpus.len(),
        trainer.iteration,
        tb.config.iterations
    );
    let interval = tb.config.checkpoint_interval;
    while trainer.iteration < tb.config.iterations {
        let rec = trainer.step().map_err(engine_error)?;
        writeln!(log, "{}", serde_json::to_string(&rec)?)?;
        if interval > 0 && rec.iter % interval == 0 {
            log.flush()?;
            if rec.iter < tb.config.iterations {
                write_checkpoint(&periodic_path(&ck_path, rec.iter), &trainer)?;
            }
            info!(
                "iter {} loss_cmd {:.5} loss_param {:.5}",
                rec.iter, rec.loss_cmd, rec.loss_param
            );
        }
    }
    log.flush()?;
    write_checkpoint(&ck_path, &trainer)?;
    info!("wrote {}", ck_path.display());
    Ok(ExitCode::SUCCESS)
}

pub fn sample(args: &SampleArgs, exec: Exec) -> Result<ExitCode> {
    let ck = read_checkpoint(&args.checkpoint)?;
    let block = match &args.config {
        Some(p) => {
            let cfg = RunConfig::load(p)?;
            if cfg.schedule != ck.schedule {
                bail!("schedule block of {} differs from the checkpoint's", p.display());
            }
            if cfg.net != ck.net {
                bail!("net block of {} differs from the checkpoint's", p.display());
            }
            cfg.sample
        }
        None => None,
    };
    let n = args.n.or(block.as_ref().map(|b| b.n)).unwrap_or(0);
    let seed = args
        .seed
        .or(block.as_ref().map(|b| b.seed))
        .context("a sample seed is required (--seed or the sample block)")?;
    let condition = args.length.or(block.and_then(|b| b.condition));
    let cascade = ck.cascade()?;
    let config = SampleConfig { n, seed, condition };
    let results = match engine::sample(&cascade, &config, exec) {
        Err(EngineError::Denoiser(DenoiserError::ConditionMismatch)) => {
            if condition.is_some() {
                bail!("--length needs a checkpoint trained with length conditioning")
            }
            bail!("this checkpoint is length-conditioned; pass --length")
        }
        r => r?,
    };
    let mut decoded = Vec::with_capacity(n);
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => decoded.push(s),
            Err(e) => warn!("sample {i} failed: {e}"),
        }
    }
    let valid = decoded.iter().filter(|s| validate(s).valid).count();
    write_output(args.out.as_deref(), &to_json_many(&decoded))?;
    if let Some(dir) = &args.svg_dir {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        for (i, s) in decoded.iter().enumerate().filter(|(_, s)| validate(s).valid) {
            for k in 0..evalgeo::sketches(s).len() {
                let p = dir.join(format!("sample_{i:04}_sketch_{k}.svg"));
                fs::write(&p, evalgeo::export_svg(s, k)?)
                    .with_context(|| format!("cannot write {}", p.display()))?;
            }
        }
    }
    eprintln!("{n} requested, {} decoded, {valid} valid", decoded.len());
    Ok(ExitCode::SUCCESS)
}

fn corrupt_schedule(args: &CorruptArgs) -> Result<Arc<Schedule>> {
    let uniform = || EmpiricalPrior::uniform((0..BOOLEAN_STATES).collect());
    if let Some(p) = &args.checkpoint {
        return Ok(read_checkpoint(p)?.build_schedule()?);
    }
    let (sched, prior) = match &args.config {
        Some(p) => {
            let cfg = RunConfig::load(p)?;
            let prior = match &cfg.train {
                Some(tb) => EmpiricalPrior::boolean_from_corpus(&load_sequences(&tb.corpus)?),
                None => uniform()?,
            };
            (cfg.schedule, prior)
        }
        None => (ScheduleConfig::default(), uniform()?),
    };
    Ok(Arc::new(make_schedule(&sched, &prior)?))
}

const ABSORBED: &str = "#";

pub fn corrupt(args: &CorruptArgs) -> Result<ExitCode> {
    let seqs = load_sequences(&args.input)?;
    let seq = seqs
        .get(args.index)
        .with_context(|| format!("{} holds {} sequences", args.input.display(), seqs.len()))?;
    if !validate(seq).valid {
        return Err(data(format!("sequence {} is invalid", args.index)));
    }
    let schedule = corrupt_schedule(args)?;
    if args.t > schedule.steps() {
        bail!("--t {} outside 0..={}", args.t, schedule.steps());
    }
    let cmds = TokenSeq::commands(seq.kinds().map(CommandKind::id).collect());
    let mut states = Vec::new();
    let mut kinds = Vec::new();
    for c in seq.commands() {
        for s in c.slots() {
            states.push(s.value as usize);
            kinds.push(PosKind::for_param(s.kind));
        }
    }
    let params = TokenSeq::new(states, kinds)?;
    let mut rng = cadiff::rng::substream(args.seed, &[args.t as u64]);
    let zeta = forward_sample(&cmds, args.t, &schedule, &mut rng)?;
    let theta = forward_sample(&params, args.t, &schedule, &mut rng)?;

    let cmd_abs = schedule.chain(ChainId::Command).absorbing();
    let name = |s: usize| {
        if s == cmd_abs {
            ABSORBED.to_string()
        } else {
            CommandKind::from_id(s).map_or("?", CommandKind::name).to_string()
        }
    };
    let mut out = format!("t = {} of {}\n", args.t, schedule.steps());
    let names: Vec<String> = zeta.states.iter().map(|&s| name(s)).collect();
    out.push_str(&format!("commands: {}\n", names.join(" ")));
    out.push_str("parameters:\n");
    let mut vals = theta.states.iter().zip(&theta.kinds);
    for (i, c) in seq.commands().iter().enumerate() {
        let cells: Vec<String> = c
            .kind()
            .layout()
            .iter()
            .zip(vals.by_ref())
            .map(|(slot, (&v, &k))| {
                let abs = k.chain().map(|id| schedule.chain(id).absorbing());
                if Some(v) == abs {
                    format!("{}={ABSORBED}", slot.label())
                } else {
                    format!("{}={v}", slot.label())
                }
            })
            .collect();
        out.push_str(format!("{i:>3} {:<8} {}\n", c.kind().name(), cells.join(" ")).trim_end());
        out.push('\n');
    }
    print!("{out}");
    Ok(ExitCode::SUCCESS)
}

pub fn validate_cmd(args: &ValidateArgs) -> Result<ExitCode> {
    let seqs = load_sequences(&args.input)?;
    if seqs.is_empty() {
        bail!("{} holds no sequences", args.input.display());
    }
    let mut invalid = 0;
    for (i, s) in seqs.iter().enumerate() {
        let report = validate(s);
        if report.valid {
            println!("{i}: valid");
        } else {
            invalid += 1;
            let rules: Vec<String> = report
                .violations
                .iter()
                .map(|v| format!("{}@{}", v.rule.id(), v.position))
                .collect();
            println!("{i}: invalid {}", rules.join(" "));
        }
    }
    println!("{} of {} valid", seqs.len() - invalid, seqs.len());
    Ok(if invalid == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

pub fn eval(args: &EvalArgs, exec: Exec) -> Result<ExitCode> {
    let generated = load_sequences(&args.generated)?;
    let reference = load_sequences(&args.reference)?;
    let train = match &args.train {
        Some(p) => load_sequences(p)?,
        None => Vec::new(),
    };
    let cfg = MetricsConfig {
        points_per_model: args.points,
        jsd_resolution: args.jsd_resolution,
        exec,
    };
    let report = match evalgeo::metrics(&generated, &reference, &train, &cfg) {
        Err(EvalError::NoGeometry) => return Err(data("no valid model yields points")),
        r => r?,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(ExitCode::SUCCESS)
}

pub fn export_svg(args: &ExportSvgArgs) -> Result<ExitCode> {
    let seqs = load_sequences(&args.input)?;
    let seq = seqs
        .get(args.index)
        .with_context(|| format!("{} holds {} sequences", args.input.display(), seqs.len()))?;
    write_output(args.out.as_deref(), &evalgeo::export_svg(seq, args.sketch)?)?;
    Ok(ExitCode::SUCCESS)
}
