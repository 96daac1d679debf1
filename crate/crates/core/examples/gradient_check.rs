//! Finite-difference gradient check of every variant on the real loss.
//!
//! cargo run --release --example gradient_check

use anyhow::Result;
use transception::harness::{cmd_gradcheck, render_gradcheck};
use transception::model::Variant;

fn main() -> Result<()> {
    let runs = cmd_gradcheck(&Variant::ALL, 0, 1e-4)?;
    print!("{}", render_gradcheck(&runs));
    Ok(())
}
