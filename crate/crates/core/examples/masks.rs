//! Motion masks from a trained run's own attention, cached under masks/.
//! A second call is a cache hit.
//!
//! cargo run --release --example masks [run_dir]

mod common;

fn main() -> savekit::Result<()> {
    let run = common::trained_run()?;
    let (masks, status) = run.extract_masks()?;
    println!("cache: {status:?}");
    let (_, again) = run.extract_masks()?;
    println!("second call: {again:?}");
    let (h, w) = masks.grid();
    for i in 1..=masks.frames() {
        let m = masks.frame(i);
        let density = m.iter().filter(|&&x| x > 0.5).count() as f64 / m.len() as f64;
        println!("frame {}: {:.1}% moving", i + 1, 100.0 * density);
    }
    let last = masks.frame(masks.frames());
    for r in 0..h {
        println!("  {}", (0..w).map(|c| if last[r * w + c] > 0.5 { '#' } else { '.' }).collect::<String>());
    }
    println!("PNGs in {}", run.path("masks").display());
    Ok(())
}
