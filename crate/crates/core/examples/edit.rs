//! Swap the protagonist while keeping the learned motion. Prompts after the
//! run directory replace the configured ones.
//!
//! cargo run --release --example edit [run_dir] ["a photo of a blue circle <mot>" ...]

mod common;

fn main() -> savekit::Result<()> {
    let run = common::trained_run()?;
    let prompts: Vec<String> = std::env::args().skip(2).collect();
    for (dir, video) in run.edit(&prompts)? {
        println!("{} frames -> {}", video.frames(), dir.display());
    }
    Ok(())
}
