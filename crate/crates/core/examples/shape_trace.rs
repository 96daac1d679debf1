//! Trace tensor shapes through one forward pass of each variant at desk
//! scale, then the full preset at 224×224 (needs about 4 GB of memory).
//!
//! cargo run --release --example shape_trace [-- full]

use anyhow::Result;
use transception::harness::cmd_shapes;
use transception::model::{ModelConfig, Scale, Variant};

fn main() -> Result<()> {
    for v in Variant::ALL {
        let r = cmd_shapes(&ModelConfig::desk(v), 32, 0)?;
        println!("{v}: {} tensors, {}", r.rows.len(), if r.passed() { "all match" } else { "MISMATCH" });
    }
    if std::env::args().any(|a| a == "full") {
        print!("{}", cmd_shapes(&ModelConfig::preset(Scale::Full, Variant::Full), 224, 0)?.render());
    }
    Ok(())
}
