//! Linear warmup followed by cosine decay to 1% of the peak.

/// Learning rate at a (0-based) global step. Warmup rises linearly from 0 to
/// `lr_max` at `warmup` steps, then a cosine takes it to 0.01·lr_max at
/// `total` steps. Continuous at the warmup boundary.
pub fn lr_at(step: u64, total: u64, warmup: u64, lr_max: f64) -> f64 {
    assert!(total > 0 && warmup < total);
    let lr_min = 0.01 * lr_max;
    if step < warmup {
        return lr_max * step as f64 / warmup as f64;
    }
    let s = (step.min(total) - warmup) as f64 / (total - warmup) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * s).cos())
}
