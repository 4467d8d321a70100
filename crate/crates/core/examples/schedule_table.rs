//! Phases and ramped loss weights over the staggered schedule, at full
//! scale and at the desk scale used by the experiment.

use llm_codec::bridge::temperature;
use llm_codec::config::RunConfig;
use llm_codec::eval::format_table;
use llm_codec::schedule::schedule_at;

fn table(cfg: &RunConfig) -> llm_codec::Result<String> {
    let b = cfg.schedule.boundaries();
    let mut rows = Vec::new();
    for i in 0..=10 {
        let step = b.total * i / 10;
        let s = schedule_at(step, &cfg.schedule)?;
        let full_scale = (step as f64 / cfg.schedule.scale).round() as u64;
        rows.push(vec![
            step.to_string(),
            s.phase.to_string(),
            s.codec_opt_active.to_string(),
            format!("{:.3}", s.lambdas.ftp),
            format!("{:.3}", s.lambdas.cos),
            format!("{:.3}", s.lambdas.ctr),
            format!("{:.3}", temperature(full_scale, &cfg.bridge)),
        ]);
    }
    Ok(format_table(&["step", "phase", "codec", "ftp", "cos", "ctr", "tau"], &rows))
}

fn main() -> llm_codec::Result<()> {
    println!("{}", table(&RunConfig::default())?);
    println!("{}", table(&RunConfig::desk())?);
    Ok(())
}
