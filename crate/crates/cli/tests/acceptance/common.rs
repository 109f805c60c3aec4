use rand::Rng;
use semadjust_core::colorspace::LabImage;

/// Fails the enclosing criterion with a formatted reason.
macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}
pub(crate) use ensure;

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Smooth, non-constant Lab image.
pub fn textured(h: usize, w: usize, phase: f64) -> LabImage {
    LabImage::from_fn(h, w, |r, c| {
        let (r, c) = (r as f64, c as f64);
        [
            50.0 + 30.0 * (0.4 * r + phase).sin() * (0.3 * c).cos(),
            25.0 * (0.25 * c + 0.5 * r + phase).sin(),
            -20.0 * (0.35 * r - 0.2 * c).cos(),
        ]
    })
}

/// Random point on the probability simplex with strictly positive entries.
pub fn simplex(rng: &mut impl Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|v| v / sum).collect()
}
