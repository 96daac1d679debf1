//! Counted flops of the three attention kernels as the token count grows,
//! with the fitted log-log slopes.
//!
//! cargo run --release --example attention_scaling

use anyhow::Result;
use transception::attention::AttentionKind;
use transception::harness::{cmd_bench, BENCH_DIM, BENCH_TOKENS};

fn main() -> Result<()> {
    let kinds = [AttentionKind::Factorized, AttentionKind::ChannelAware, AttentionKind::TokenAware];
    print!("{}", cmd_bench(&kinds, &BENCH_TOKENS, BENCH_DIM, 0)?.render());
    Ok(())
}
