//! Load the toy text-to-image model (bundled, cached or freshly pretrained)
//! and sample a few captions frame by frame.
//!
//! cargo run --release --example pretrained_model [out_dir]

use std::path::PathBuf;

use savekit::config::RunConfig;
use savekit::motion_embedding::build_frame_conditionings;
use savekit::run::Run;
use savekit::sampler::{sample, seeded_noise, SamplerConfig};
use savekit::video::{latent_to_frames, write_frames};

fn main() -> savekit::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs/pretrained"));
    let config = RunConfig { run_dir: out.display().to_string(), ..RunConfig::default() };
    let (h, w) = (config.latent_height, config.latent_width);
    let (fh, fw) = (config.frame_height, config.frame_width);
    let run = Run::new(config)?;
    let model = run.image_model(|step, loss| {
        if step % 500 == 0 {
            eprintln!("pretrain step {step:>5}  loss {loss:.5}");
        }
    })?;
    println!("image model: {} parameters", model.params.iter().map(|(_, t)| t.len()).sum::<usize>());

    let encoder = &run.encoder;
    let empty = build_frame_conditionings(&encoder.vocab.tokenize("")?, None, None, encoder, 1)?;
    let sc = SamplerConfig::default();
    for caption in ["a photo of a red square", "a photo of a blue circle", "a photo of a green diamond"] {
        let cond = build_frame_conditionings(&encoder.vocab.tokenize(caption)?, None, None, encoder, 1)?;
        let z = sample(&model, &run.schedule, &seeded_noise(&[1, 3, h, w], 0), &cond, &empty, &sc, None)?;
        let dir = out.join(caption.replace(' ', "-"));
        write_frames(&dir, &latent_to_frames(&z, fh, fw)?.clamp())?;
        println!("{caption:<28} -> {}", dir.display());
    }
    Ok(())
}
