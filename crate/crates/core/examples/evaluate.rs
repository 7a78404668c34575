//! Score every edit of a run against its source: pseudo-flow similarity,
//! frame consistency and per-token attention shares.
//!
//! cargo run --release --example evaluate [run_dir]

mod common;

fn main() -> savekit::Result<()> {
    let run = common::trained_run()?;
    if !run.path("edits").exists() {
        run.edit(&[])?;
    }
    for (pair, r) in run.eval(None)? {
        println!("{pair}");
        println!("  flow similarity   {:.4}", r.flow_similarity);
        println!("  frame consistency {:.4}", r.frame_consistency);
        for (token, share) in &r.attention_shares {
            println!("  share {token:<10} {share:.4}");
        }
    }
    println!("table in {}", run.path("eval.csv").display());
    Ok(())
}
