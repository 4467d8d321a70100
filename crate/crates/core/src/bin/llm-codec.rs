use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use llm_codec::audio::{generate_corpus, write_corpus};
use llm_codec::backbone::{train_token_lm, TokenLm};
use llm_codec::bridge::temperature;
use llm_codec::config::{Objectives, RunConfig};
use llm_codec::eval::{coherence_accuracy, format_table, perplexity, write_report, MetricRecord};
use llm_codec::experiment::{
    comparison_records, comparison_rows, recon_metrics, run_experiment, split_corpus, EvalSet, Split, Variant,
    TABLE_HEADERS,
};
use llm_codec::rng::{derive_seed, tag};
use llm_codec::schedule::schedule_at;
use llm_codec::trainer::{TrainData, Trainer};
use llm_codec::{Error, Result};

#[derive(Parser)]
#[command(name = "llm-codec", version, about = "Train and evaluate an LLM-facing neural audio codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus to WAV files plus a manifest.
    SynthData(Common),
    /// Train a codec and write checkpoints and a step log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Stop after this many steps; 0 writes the initial checkpoint only.
        #[arg(long)]
        steps: Option<u64>,
        /// Reconstruction-only control: no bridge, FTP or alignment.
        #[arg(long)]
        baseline: bool,
        /// Continue from a trainer checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train a token LM on a token corpus (JSON lines of token arrays) or on
    /// the tokens a checkpointed codec assigns to the training split.
    TrainSlm {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        tokens: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Mel and STFT distances of a checkpointed codec on held-out audio.
    EvalRecon {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Held-out perplexity of a token LM over a checkpointed codec's tokens.
    EvalLm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Token LM checkpoint; trained on the training split when omitted.
        #[arg(long)]
        lm: Option<PathBuf>,
    },
    /// Coherent versus switched-nuisance pair accuracy.
    EvalCoherence {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        lm: Option<PathBuf>,
    },
    /// Print the phase and loss-weight table of a configuration.
    InspectSchedule {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Row spacing in steps; defaults to a twentieth of the run.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Warm start, fork into the control and every objective variant, and
    /// compare them across seeds.
    Experiment {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
}

fn load_config(path: Option<&Path>, fallback: fn() -> RunConfig) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(fallback()),
    }
}

fn prepare(common: &Common, fallback: fn() -> RunConfig) -> Result<RunConfig> {
    let cfg = load_config(common.config.as_deref(), fallback)?;
    fs::create_dir_all(&common.out)?;
    fs::write(common.out.join("config.toml"), cfg.to_toml()?)?;
    Ok(cfg)
}

fn corpus_split(cfg: &RunConfig, seed: u64) -> Result<Split> {
    split_corpus(generate_corpus(&cfg.corpus, seed)?, cfg.train.heldout_fraction)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn record(run_id: &str, hash: &str, metric: &str, value: f64, n: usize) -> MetricRecord {
    MetricRecord {
        run_id: run_id.into(),
        config_hash: hash.into(),
        metric: metric.into(),
        value,
        n,
    }
}

fn print_records(records: &[MetricRecord]) {
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| vec![r.run_id.clone(), r.metric.clone(), format!("{:.4}", r.value), r.n.to_string()])
        .collect();
    print!("{}", format_table(&["run", "metric", "value", "n"], &rows));
}

fn synth_data(c: &Common) -> Result<()> {
    let cfg = prepare(c, RunConfig::default)?;
    let utts = generate_corpus(&cfg.corpus, c.seed)?;
    write_corpus(&c.out, &utts)?;
    write_json(
        &c.out.join("corpus.json"),
        &json!({ "config_hash": cfg.hash(), "seed": c.seed, "utterances": utts.len() }),
    )?;
    println!("wrote {} utterances to {}", utts.len(), c.out.display());
    Ok(())
}

fn train(c: &Common, steps: Option<u64>, baseline: bool, resume: Option<&Path>) -> Result<()> {
    let mut cfg = prepare(c, RunConfig::default)?;
    if baseline {
        cfg.train.objectives = Objectives::baseline();
    }
    let split = corpus_split(&cfg, c.seed)?;
    let data = TrainData::new(&split.train, &cfg)?;
    let mut tr = match resume {
        Some(p) => {
            let mut tr = Trainer::load(p, &data)?;
            if baseline {
                tr.set_objectives(Objectives::baseline());
            }
            tr
        }
        None => Trainer::new(cfg.clone(), c.seed, &data)?,
    };
    let total = tr.cfg.schedule.boundaries().total;
    let until = steps.map_or(total, |s| (tr.step + s).min(total));
    if resume.is_none() && until > 0 && tr.cfg.train.codec_pretrain_steps > 0 {
        let curve = tr.pretrain_codec(&data)?;
        log::info!("codec warm start finished at loss {:.4}", curve.last().copied().unwrap_or(f64::NAN));
    }
    let mut log = BufWriter::new(fs::File::create(c.out.join("train.jsonl"))?);
    writeln!(log, "{}", json!({ "config_hash": tr.config_hash(), "seed": tr.seed, "start": tr.step }))?;
    tr.run_until(&data, until, Some(&mut log))?;
    log.flush()?;
    let path = c.out.join(format!("trainer_{:06}.ckpt", tr.step));
    tr.save(&path)?;
    println!("step {} checkpoint {} (config {})", tr.step, path.display(), tr.config_hash());
    Ok(())
}

fn read_tokens(path: &Path) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Loads a trainer checkpoint along with the split its corpus implies.
fn load_trainer(path: &Path) -> Result<(Trainer, Split)> {
    let c = llm_codec::checkpoint::Container::load(path)?;
    let field = |k: &str| {
        c.metadata
            .get(k)
            .cloned()
            .ok_or_else(|| Error::Format {
                field: k.into(),
                detail: "missing from checkpoint metadata".into(),
            })
    };
    let cfg: RunConfig = serde_json::from_value(field("config")?)?;
    let seed: u64 = serde_json::from_value(field("seed")?)?;
    let split = corpus_split(&cfg, seed)?;
    let data = TrainData::new(&split.train, &cfg)?;
    Ok((Trainer::load(path, &data)?, split))
}

fn token_lm_for(tr: &Trainer, split: &Split, lm: Option<&Path>) -> Result<TokenLm> {
    match lm {
        Some(p) => TokenLm::load(p),
        None => {
            let codec = &tr.models.codec;
            let tokens = split.train.iter().map(|u| codec.tokenize(&u.audio)).collect::<Result<Vec<_>>>()?;
            let cfg = &tr.cfg.token_lm;
            Ok(train_token_lm(&tokens, cfg, cfg.epochs, derive_seed(tr.seed, &[tag::LM]))?.0)
        }
    }
}

fn train_slm(c: &Common, tokens: Option<&Path>, checkpoint: Option<&Path>) -> Result<()> {
    fs::create_dir_all(&c.out)?;
    let (corpus, cfg, hash) = match (tokens, checkpoint) {
        (Some(p), _) => {
            let cfg = load_config(c.config.as_deref(), RunConfig::default)?;
            let hash = cfg.hash();
            (read_tokens(p)?, cfg.token_lm, hash)
        }
        (None, Some(p)) => {
            let (tr, split) = load_trainer(p)?;
            let codec = &tr.models.codec;
            let corpus = split.train.iter().map(|u| codec.tokenize(&u.audio)).collect::<Result<Vec<_>>>()?;
            let mut w = BufWriter::new(fs::File::create(c.out.join("tokens.jsonl"))?);
            for t in &corpus {
                writeln!(w, "{}", serde_json::to_string(t)?)?;
            }
            w.flush()?;
            (corpus, tr.cfg.token_lm.clone(), tr.config_hash())
        }
        (None, None) => return Err(Error::Config("train-slm needs --tokens or --checkpoint".into())),
    };
    let (lm, curve) = train_token_lm(&corpus, &cfg, cfg.epochs, derive_seed(c.seed, &[tag::LM]))?;
    lm.save(&c.out.join("token_lm.ckpt"), &hash)?;
    write_json(&c.out.join("token_lm_curve.json"), &json!({ "config_hash": hash, "loss": curve.0 }))?;
    println!("token LM loss {:?}", curve.0);
    Ok(())
}

fn eval_recon(c: &Common, checkpoint: &Path) -> Result<()> {
    fs::create_dir_all(&c.out)?;
    let (tr, split) = load_trainer(checkpoint)?;
    let n = tr.cfg.eval.recon_utterances.min(split.heldout.len());
    let audio: Vec<_> = split.heldout[..n].iter().map(|u| u.audio.clone()).collect();
    let (mel, stft) = recon_metrics(&tr.models.codec, &audio)?;
    let id = format!("step{}", tr.step);
    let hash = tr.config_hash();
    let recs = vec![record(&id, &hash, "mel_distance", mel, n), record(&id, &hash, "stft_distance", stft, n)];
    write_report(&recs, &c.out.join("recon.jsonl"))?;
    print_records(&recs);
    Ok(())
}

fn eval_lm(c: &Common, checkpoint: &Path, lm: Option<&Path>) -> Result<()> {
    fs::create_dir_all(&c.out)?;
    let (tr, split) = load_trainer(checkpoint)?;
    let scorer = token_lm_for(&tr, &split, lm)?;
    let held = split
        .heldout
        .iter()
        .map(|u| tr.models.codec.tokenize(&u.audio))
        .collect::<Result<Vec<_>>>()?;
    let (loss, ppl) = perplexity(&scorer, &held)?;
    let id = format!("step{}", tr.step);
    let hash = tr.config_hash();
    let recs = vec![
        record(&id, &hash, "lm_loss", loss, held.len()),
        record(&id, &hash, "ppl", ppl, held.len()),
    ];
    write_report(&recs, &c.out.join("lm.jsonl"))?;
    print_records(&recs);
    Ok(())
}

fn eval_coherence(c: &Common, checkpoint: &Path, lm: Option<&Path>) -> Result<()> {
    fs::create_dir_all(&c.out)?;
    let (tr, split) = load_trainer(checkpoint)?;
    let scorer = token_lm_for(&tr, &split, lm)?;
    let set = EvalSet::new(&tr.cfg, &split, tr.seed)?;
    let res = coherence_accuracy(&scorer, &tr.models.codec, &set.pairs)?;
    let id = format!("step{}", tr.step);
    let hash = tr.config_hash();
    let recs = vec![
        record(&id, &hash, "coherence_accuracy", res.accuracy, res.scored),
        record(&id, &hash, "coherence_excluded", res.excluded as f64, res.excluded),
    ];
    write_report(&recs, &c.out.join("coherence.jsonl"))?;
    print_records(&recs);
    Ok(())
}

fn inspect_schedule(config: Option<&Path>, every: Option<u64>) -> Result<()> {
    let cfg = load_config(config, RunConfig::default)?;
    let s = &cfg.schedule;
    let b = s.boundaries();
    let every = every.unwrap_or((b.total / 20).max(1)).max(1);
    let mut steps: Vec<u64> = (0..=b.total).step_by(every as usize).collect();
    for edge in [b.d_only_until, b.ftp_delay, b.ftp_delay + b.ftp_warmup, b.sa_delay, b.sa_delay + b.sa_warmup, b.total] {
        steps.push(edge.min(b.total));
        steps.push(edge.saturating_sub(1));
    }
    steps.sort_unstable();
    steps.dedup();
    let mut rows = Vec::new();
    for step in steps {
        let st = schedule_at(step, s)?;
        let full_scale = (step as f64 / s.scale).round() as u64;
        rows.push(vec![
            step.to_string(),
            st.phase.to_string(),
            if st.codec_opt_active { "on" } else { "off" }.to_string(),
            format!("{:.4}", st.lambdas.bridge),
            format!("{:.4}", st.lambdas.ftp),
            format!("{:.4}", st.lambdas.cos),
            format!("{:.4}", st.lambdas.ctr),
            format!("{:.4}", temperature(full_scale, &cfg.bridge)),
        ]);
    }
    println!("config {}", cfg.hash());
    print!(
        "{}",
        format_table(&["step", "phase", "codec", "bridge", "ftp", "cos", "ctr", "tau"], &rows)
    );
    Ok(())
}

fn experiment(c: &Common, seeds: u64) -> Result<()> {
    if seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let cfg = prepare(c, RunConfig::desk)?;
    let seed_list: Vec<u64> = (0..seeds).map(|i| c.seed + i).collect();
    let results = run_experiment(&cfg, &seed_list, &Variant::ALL)?;
    let metrics: Vec<MetricRecord> = results.iter().flat_map(|s| s.variants.iter().flat_map(|v| v.records())).collect();
    write_report(&metrics, &c.out.join("metrics.jsonl"))?;
    let mut w = BufWriter::new(fs::File::create(c.out.join("comparison.jsonl"))?);
    for r in comparison_records(&cfg.hash(), &results) {
        writeln!(w, "{}", serde_json::to_string(&r)?)?;
    }
    w.flush()?;
    print!("{}", format_table(&TABLE_HEADERS, &comparison_rows(&results)));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData(c) => synth_data(&c),
        Command::Train {
            common,
            steps,
            baseline,
            resume,
        } => train(&common, steps, baseline, resume.as_deref()),
        Command::TrainSlm {
            common,
            tokens,
            checkpoint,
        } => train_slm(&common, tokens.as_deref(), checkpoint.as_deref()),
        Command::EvalRecon { common, checkpoint } => eval_recon(&common, &checkpoint),
        Command::EvalLm { common, checkpoint, lm } => eval_lm(&common, &checkpoint, lm.as_deref()),
        Command::EvalCoherence { common, checkpoint, lm } => eval_coherence(&common, &checkpoint, lm.as_deref()),
        Command::InspectSchedule { config, steps } => inspect_schedule(config.as_deref(), steps),
        Command::Experiment { common, seeds } => experiment(&common, seeds),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Format { .. } | Error::Contract(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
