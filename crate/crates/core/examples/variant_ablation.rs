//! Train the baseline, the inception-encoder variant and the full model with
//! the same protocol and compare held-out Dice (about 3.5 min on one core).
//!
//! cargo run --release --example variant_ablation

use anyhow::Result;
use transception::config::RunConfig;
use transception::harness::cmd_train;
use transception::model::Variant;

fn main() -> Result<()> {
    let dir = tempfile::tempdir()?;
    for v in [Variant::EffFormer, Variant::Rmi, Variant::Full] {
        let mut cfg = RunConfig::default();
        cfg.model.set_variant(v);
        cfg.out = dir.path().join(v.to_string());
        cfg.samples = 200;
        cfg.holdout = 40;
        cfg.steps = 400;
        cfg.optimizer = "adam".into();
        cfg.schedule = "poly".parse()?;
        cfg.lr = 1e-3;
        cfg.augment = true;
        let o = cmd_train(&cfg, |_| {})?;
        println!("{v:>9}: held-out mean Dice {:.4} ({:.0}s)", o.report.mean_dice, o.seconds);
    }
    Ok(())
}
