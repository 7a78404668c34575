//! Invert the source video and sample it back under the training prompt.
//!
//! cargo run --release --example reconstruct [run_dir]

mod common;

use savekit::sampler::seeded_noise;
use savekit::video::psnr;

fn main() -> savekit::Result<()> {
    let run = common::trained_run()?;
    let source = run.source_video()?;
    let rec = run.reconstruct()?;
    let random = seeded_noise(source.data.shape(), 9).map(|x| (x * 0.25 + 0.5).clamp(0.0, 1.0));
    println!("reconstruction PSNR {:.2} dB", psnr(&rec.data, &source.data)?);
    println!("random video PSNR   {:.2} dB", psnr(&random, &source.data)?);
    println!("frames in {}", run.path("reconstruct").display());
    Ok(())
}
