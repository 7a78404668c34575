//! Where the trained model's cross-attention goes on the source video, and
//! heatmaps of the motion word per frame.
//!
//! cargo run --release --example inspect_attention [run_dir]

mod common;

fn main() -> savekit::Result<()> {
    let run = common::trained_run()?;
    for (token, share) in run.inspect_attn()? {
        println!("{token:>10}  {share:.4}  {}", "*".repeat((share * 100.0).round() as usize));
    }
    println!("heatmaps in {}", run.path("attention").display());
    Ok(())
}
