//! Cosine annealing with warm restarts.

/// Learning rate at `step`: cycle `i` lasts `t0 * t_mult^i` steps and
/// anneals from `lr_max` towards `lr_min` along a half cosine.
pub fn lr_schedule(step: usize, t0: usize, t_mult: usize, lr_max: f64, lr_min: f64) -> f64 {
    assert!(t0 >= 1 && t_mult >= 1, "t0 and t_mult must be positive");
    let (mut t_cur, mut t_i) = (step, t0);
    if t_mult == 1 {
        t_cur %= t0;
    } else {
        while t_cur >= t_i {
            t_cur -= t_i;
            t_i *= t_mult;
        }
    }
    let phase = std::f64::consts::PI * t_cur as f64 / t_i as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos())
}
