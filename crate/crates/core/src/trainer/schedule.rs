/// Half-cosine interpolation from `start` at `t = 0` to `end` at `t = total`.
/// Steps past `total` are clamped.
pub fn cosine_schedule(t: usize, total: usize, start: f64, end: f64) -> f64 {
    if total == 0 {
        return end;
    }
    if t > total {
        log::warn!("schedule step {t} past total {total}; clamping");
    }
    let frac = t.min(total) as f64 / total as f64;
    end + (start - end) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Linear warmup from 0 to `base` over `warmup` steps, then cosine decay to
/// `final_value` at `total`.
pub fn warmup_cosine(t: usize, total: usize, warmup: usize, base: f64, final_value: f64) -> f64 {
    if t < warmup {
        return base * t as f64 / warmup as f64;
    }
    cosine_schedule(t - warmup, total.saturating_sub(warmup), base, final_value)
}
