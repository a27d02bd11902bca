//! Piecewise-constant learning-rate schedule.

/// Learning rate at `step` of a `total_steps` run. The base rate is divided
/// by {2, 8, 64, 256} after fractions {0.30, 0.60, 0.80, 0.95} of the run,
/// so scaled-down runs keep the same schedule shape.
pub fn lr_schedule(step: u64, total_steps: u64, base_lr: f64) -> f64 {
    debug_assert!(step <= total_steps);
    let frac = if total_steps == 0 {
        0.0
    } else {
        step as f64 / total_steps as f64
    };
    let divisor = if frac < 0.30 {
        1.0
    } else if frac < 0.60 {
        2.0
    } else if frac < 0.80 {
        8.0
    } else if frac < 0.95 {
        64.0
    } else {
        256.0
    };
    base_lr / divisor
}
