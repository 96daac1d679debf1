//! Dice, HD95 and pixel rates on a hand-made prediction.
//!
//! cargo run --example segmentation_metrics

use anyhow::Result;
use transception::metrics::MetricsReport;

fn square(h: usize, w: usize, y0: usize, x0: usize, size: usize) -> Vec<u8> {
    (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            u8::from((y0..y0 + size).contains(&y) && (x0..x0 + size).contains(&x))
        })
        .collect()
}

fn main() -> Result<()> {
    let (h, w) = (24, 24);
    let truth = square(h, w, 6, 6, 10);
    let shifted = square(h, w, 8, 7, 10);
    let empty = vec![0u8; h * w];
    let pairs: [(&[u8], &[u8]); 3] = [(&truth, &truth), (&shifted, &truth), (&empty, &truth)];
    let report = MetricsReport::compute(&pairs, h, w, 2)?;
    print!("{}", report.to_csv());
    print!("{}", report.summary());
    Ok(())
}
