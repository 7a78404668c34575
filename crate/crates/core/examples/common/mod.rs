//! Shared setup: open (and if needed, quickly train) a run directory.

use std::path::PathBuf;

use savekit::config::RunConfig;
use savekit::run::Run;

/// Run directory from the first argument, `runs/example` otherwise.
pub fn run_dir() -> PathBuf {
    std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs/example"))
}

/// Open the run, reusing its `config.toml` when present. A run without a
/// stage-2 checkpoint is trained with shortened schedules first.
pub fn trained_run() -> savekit::Result<Run> {
    let dir = run_dir();
    let saved = dir.join("config.toml");
    let config = if saved.exists() {
        // paths in a saved config are relative to its own directory
        let mut c = RunConfig::load(&saved)?;
        c.run_dir = ".".into();
        c
    } else {
        RunConfig {
            run_dir: dir.display().to_string(),
            stage1_steps: 60,
            stage2_steps: 80,
            warmup_steps: 20,
            probes: 4,
            ..RunConfig::default()
        }
    };
    let run = Run::new(config)?;
    if !run.path("stage2.ckpt").exists() {
        eprintln!("no stage-2 checkpoint in {}; training a short run", dir.display());
        run.train_stage1(false, |_| {})?;
        run.train_stage2(false, |_| {})?;
    }
    Ok(run)
}
