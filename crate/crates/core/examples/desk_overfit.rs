//! Overfit 16 synthetic 32×32 samples with the full model (about 2 min on
//! one core), then reload the checkpoint and score it again.
//!
//! cargo run --release --example desk_overfit

use anyhow::Result;
use transception::config::RunConfig;
use transception::harness::{cmd_eval, cmd_train};

fn main() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let cfg = RunConfig {
        out: dir.path().to_path_buf(),
        ..RunConfig::default()
    };
    let outcome = cmd_train(&cfg, |r| {
        if r.step % 50 == 0 {
            println!("step {:>4}  lr {:.4}  loss {:.4}", r.step, r.lr, r.loss);
        }
    })?;
    print!("{}", outcome.report.summary());
    let again = cmd_eval(&outcome.checkpoint(), &outcome.eval_corpus(), None, false)?;
    println!("reloaded checkpoint reproduces the report: {}", again == outcome.report);
    Ok(())
}
