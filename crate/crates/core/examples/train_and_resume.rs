//! A short end-to-end training run on a tiny corpus, with a checkpoint in
//! the middle and a resumed run that must land on the same parameters.

use llm_codec::audio::generate_corpus;
use llm_codec::config::RunConfig;
use llm_codec::trainer::{TrainData, Trainer};

fn main() -> llm_codec::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cfg = RunConfig::smoke();
    let b = cfg.schedule.boundaries();
    let utts = generate_corpus(&cfg.corpus, 1)?;
    let data = TrainData::new(&utts, &cfg)?;
    let mut tr = Trainer::new(cfg, 1, &data)?;
    let curve = tr.pretrain_codec(&data)?;
    println!("codec warm start {:.3?}", curve);

    let mid = b.sa_delay + 2;
    let mut log = std::io::stdout();
    tr.run_until(&data, mid, Some(&mut log as &mut dyn std::io::Write))?;
    let path = std::env::temp_dir().join("llm-codec-mid.ckpt");
    tr.save(&path)?;
    tr.run_until(&data, mid + 10, None)?;

    let mut resumed = Trainer::load(&path, &data)?;
    resumed.run_until(&data, mid + 10, None)?;
    println!("uninterrupted {}", tr.trainable_hash());
    println!("resumed       {}", resumed.trainable_hash());
    Ok(())
}
