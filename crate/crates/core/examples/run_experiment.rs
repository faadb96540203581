//! Run a declarative experiment config end to end and summarise the report.
//! Rerunning resumes from the manifest and recomputes nothing.
//!
//! cargo run --release --example run_experiment -- configs/smoke.json /tmp/smoke-run

use std::path::PathBuf;

use icl_lab::experiments::{run_in, ExperimentConfig, Metric, Report};

fn main() -> icl_lab::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut args = std::env::args().skip(1);
    let config_path = PathBuf::from(args.next().unwrap_or_else(|| "configs/smoke.json".into()));
    let config = ExperimentConfig::load(&config_path)?;
    let dir = args.next().map(PathBuf::from).unwrap_or_else(|| config.resolve_output_dir());
    run_in(&config, &dir)?;

    let report = Report::load(&dir)?;
    for exp in &report.experiments {
        println!("{} (eval set {})", exp.kind, exp.eval_set.slug());
        for regime in &exp.regimes {
            let curve: Vec<String> = report
                .shots
                .iter()
                .map(|&k| format!("{k}:{:.2}", exp.value(regime, None, k, Metric::ClassMatch).unwrap_or(f64::NAN)))
                .collect();
            println!("  {regime:<22} {}", curve.join(" "));
        }
        if let Some(audit) = &exp.vocabulary_audit {
            println!("  shared surface words with training corpus: {}", audit.shared.len());
        }
    }
    println!("artifacts in {}", dir.display());
    Ok(())
}
