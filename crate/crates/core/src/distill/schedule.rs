use std::f64::consts::PI;

/// `end + (start - end) * (1 + cos(pi * step / total)) / 2`, with `step`
/// clamped to `total`. A zero-length schedule sits at `end`.
pub fn cosine_schedule(start: f64, end: f64, step: u64, total: u64) -> f64 {
    if total == 0 || step >= total {
        return end;
    }
    if step == 0 {
        return start;
    }
    let frac = step as f64 / total as f64;
    end + (start - end) * (1.0 + (PI * frac).cos()) / 2.0
}

/// Linear warmup from `base / warmup` up to `base` over the first `warmup`
/// steps, then cosine decay from `base` to `floor` over the rest.
pub fn warmup_cosine(base: f64, floor: f64, warmup: u64, step: u64, total: u64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    cosine_schedule(base, floor, step - warmup, total.saturating_sub(warmup))
}
