//! DDIM inversion and sampling with classifier-free guidance, on the
//! pretrained image model applied to each frame of the source video.
//!
//! cargo run --release --example ddim

use savekit::config::RunConfig;
use savekit::motion_embedding::build_frame_conditionings;
use savekit::run::Run;
use savekit::sampler::{combine_guidance, ddim_invert, sample, SamplerConfig};
use savekit::backbone::Denoiser;

fn main() -> savekit::Result<()> {
    let run = Run::new(RunConfig { run_dir: "runs/ddim".into(), ..RunConfig::default() })?;
    let model = run.image_model(|_, _| {})?;
    let source = run.source_video()?;
    let z0 = run.latent(&source)?.data;
    let n = z0.shape()[0];
    let caption = run.encoder.vocab.tokenize("a photo of a red square")?;
    let cond = build_frame_conditionings(&caption, None, None, &run.encoder, n)?;
    let empty = build_frame_conditionings(&run.encoder.vocab.tokenize("")?, None, None, &run.encoder, n)?;

    for steps in [10, 25, 50] {
        let inv = ddim_invert(&model, &run.schedule, &z0, &cond, steps)?;
        let sc = SamplerConfig { ddim_steps: steps, guidance_scale: 1.0, ..SamplerConfig::default() };
        let back = sample(&model, &run.schedule, &inv.z_t, &cond, &empty, &sc, None)?;
        let mae = back.zip_map(&z0, |a, b| (a - b).abs())?.data().iter().sum::<f64>() / z0.len() as f64;
        println!("eta = 0 round trip with {steps:>2} steps: latent MAE {mae:.4}");
    }

    // guidance moves the prediction along the conditional-minus-unconditional line
    let t = 500;
    let zt = run.schedule.add_noise(&z0, &savekit::sampler::seeded_noise(z0.shape(), 1), t)?;
    let (u, _) = model.denoise(&zt, t, &empty, false)?;
    let (c, _) = model.denoise(&zt, t, &cond, false)?;
    for s in [0.0, 1.0, 7.5] {
        let g = combine_guidance(&u, &c, s)?;
        println!("scale {s:>3}: |guided - uncond| = {:.4}, |guided - cond| = {:.4}", g.max_abs_diff(&u), g.max_abs_diff(&c));
    }
    Ok(())
}
