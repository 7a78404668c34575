//! Interrupting a stage and resuming it reproduces the uninterrupted run.

use std::path::Path;

use savekit::config::RunConfig;
use savekit::run::Run;

fn run_in(dir: &Path, stage1: usize, stage2: usize) -> Run {
    Run::new(RunConfig {
        run_dir: dir.display().to_string(),
        stage1_steps: stage1,
        stage2_steps: stage2,
        warmup_steps: 4,
        probes: 2,
        ..RunConfig::default()
    })
    .unwrap()
}

#[test]
fn resume_is_bitwise_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let whole = run_in(a.path(), 12, 12);
    whole.train_stage1(false, |_| {}).unwrap();
    whole.train_stage2(false, |_| {}).unwrap();

    run_in(b.path(), 5, 12).train_stage1(false, |_| {}).unwrap();
    run_in(b.path(), 12, 12).train_stage1(true, |_| {}).unwrap();
    run_in(b.path(), 12, 5).train_stage2(false, |_| {}).unwrap();
    let resumed = run_in(b.path(), 12, 12);
    resumed.train_stage2(true, |_| {}).unwrap();

    for f in ["stage1.ckpt", "stage2.ckpt", "words.bin", "log.jsonl"] {
        let (x, y) = (std::fs::read(whole.path(f)).unwrap(), std::fs::read(resumed.path(f)).unwrap());
        assert!(x == y, "{f} differs after resuming");
    }
}
