//! Both training stages with the default schedules (250 + 250 steps):
//! stage 1 registers ⟨pro⟩ on frames as images, stage 2 learns ⟨mot⟩ on
//! the inflated video model with the mask-guided attention term.
//!
//! cargo run --release --example train [run_dir]

use std::time::Instant;

use savekit::config::RunConfig;
use savekit::run::Run;

fn main() -> savekit::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "runs/moving-square".into());
    let run = Run::new(RunConfig { run_dir: dir, ..RunConfig::default() })?;

    let t = Instant::now();
    let s1 = run.train_stage1(false, |l| {
        if l.step % 50 == 0 {
            println!("stage 1 step {:>3}  ldm {:.5}", l.step, l.report.ldm);
        }
    })?;
    println!(
        "stage 1: probe loss {:.5} -> {:.5} in {:.1}s",
        s1.probe_initial,
        s1.probe_final,
        t.elapsed().as_secs_f64()
    );

    let t = Instant::now();
    let s2 = run.train_stage2(false, |l| {
        if l.step % 50 == 0 {
            println!(
                "stage 2 step {:>3}  ldm {:.5}  attn {:.5}  total {:.5}",
                l.step, l.report.ldm, l.report.attn, l.report.total
            );
        }
    })?;
    println!(
        "stage 2: probe total {:.5} -> {:.5}, attn {:.5} -> {:.5} in {:.1}s",
        s2.probe_initial.total,
        s2.probe_final.total,
        s2.probe_initial.attn,
        s2.probe_final.attn,
        t.elapsed().as_secs_f64()
    );
    println!("checkpoints in {}", run.dir.display());
    Ok(())
}
