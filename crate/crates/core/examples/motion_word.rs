//! The motion word: one base embedding expanded into a per-frame sequence
//! through a frame-position code. The parameter count does not depend on
//! the number of frames.
//!
//! cargo run --release --example motion_word

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use savekit::motion_embedding::{expand_motion_embedding, GammaConfig, MotionWordParams};
use savekit::tensor::Tensor;
use savekit::text::{TextEncoder, TextEncoderConfig, Vocab};

fn main() -> savekit::Result<()> {
    let encoder = TextEncoder::new(Vocab::default(), TextEncoderConfig::default());
    let mut motion = MotionWordParams::init(encoder.word_embedding("sliding")?, GammaConfig::default(), false, 0)?;
    println!("parameters: {} (any number of frames)", motion.param_count());

    let spread = |m: &MotionWordParams| {
        let first = expand_motion_embedding(m, 0);
        (1..8).map(|i| expand_motion_embedding(m, i).max_abs_diff(&first)).fold(0.0, f64::max)
    };
    println!("at init, frames differ by at most {:.3e}", spread(&motion));

    // what training does: give the frame code some weight
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    motion.w_gamma = Tensor::randn(motion.w_gamma.shape(), 0.05, &mut rng);
    println!("with a trained-like w_gamma: {:.3e}", spread(&motion));
    for i in [0, 1, 7, 31] {
        let v = expand_motion_embedding(&motion, i);
        let norm = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        println!("  frame {:>2}: |v_mot| = {norm:.4}", i + 1);
    }
    Ok(())
}
