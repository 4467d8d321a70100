//! The baseline-versus-full comparison on a toy configuration. The real
//! comparison (`llm-codec experiment`) uses the desk configuration and
//! takes tens of minutes; this one finishes in about a minute and only
//! shows the shape of the report.

use llm_codec::config::RunConfig;
use llm_codec::eval::format_table;
use llm_codec::experiment::{comparison_rows, run_experiment, Variant, TABLE_HEADERS};

fn main() -> llm_codec::Result<()> {
    let mut cfg = RunConfig::smoke();
    cfg.corpus.n_utterances = 20;
    let seeds = run_experiment(&cfg, &[1], &[Variant::Baseline, Variant::Full])?;
    for r in &seeds[0].variants {
        println!(
            "{:<8} ppl {:.2} coherence {:.2} mel {:.3} ({:.0}s train)",
            r.variant.name(),
            r.ppl,
            r.coherence,
            r.mel,
            r.train_secs
        );
    }
    println!("{}", format_table(&TABLE_HEADERS, &comparison_rows(&seeds)));
    Ok(())
}
