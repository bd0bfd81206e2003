//! Closed-form training utilities: cosine learning-rate decay, label
//! smoothing, swish, mixup and nearest-neighbour upscaling.
//!
//! Everything here is pure; the only randomness is the seeded
//! [`BetaSampler`] for drawing mixup coefficients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TrainMathError {
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineScheduleParams {
    pub eta_min: f64,
    pub eta_max: f64,
    pub t_max: f64,
}

impl CosineScheduleParams {
    pub fn new(eta_min: f64, eta_max: f64, t_max: f64) -> Result<Self, TrainMathError> {
        if eta_min.is_nan() || eta_max.is_nan() || eta_min > eta_max {
            return Err(TrainMathError::Param(format!(
                "eta_min {eta_min} exceeds eta_max {eta_max}"
            )));
        }
        if t_max.is_nan() || t_max < 1.0 {
            return Err(TrainMathError::Param(format!("t_max {t_max} must be at least 1")));
        }
        Ok(CosineScheduleParams {
            eta_min,
            eta_max,
            t_max,
        })
    }
}

/// Cosine decay from `eta_max` at epoch 0 to `eta_min` at `t_max`, no restarts.
/// `t_cur` is clamped to `[0, t_max]`.
pub fn cosine_lr(t_cur: f64, p: &CosineScheduleParams) -> f64 {
    let t = t_cur.clamp(0.0, p.t_max);
    p.eta_min + 0.5 * (p.eta_max - p.eta_min) * (1.0 + (t / p.t_max * std::f64::consts::PI).cos())
}

/// Neumaier-compensated sum.
pub fn compensated_sum(xs: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for &x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// `1 - eps` on `true_class` and `eps / (k - 1)` elsewhere.
///
/// The true-class entry absorbs the rounding of the others, so the vector's
/// compensated sum is exactly 1.
pub fn label_smooth(true_class: usize, k: usize, eps: f64) -> Result<Vec<f64>, TrainMathError> {
    if k < 2 {
        return Err(TrainMathError::Param(format!("need at least 2 classes, got {k}")));
    }
    if true_class >= k {
        return Err(TrainMathError::Param(format!(
            "class {true_class} out of range for {k} classes"
        )));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(TrainMathError::Param(format!("eps {eps} is outside [0, 1)")));
    }
    let other = eps / (k - 1) as f64;
    let mut y = vec![other; k];
    y[true_class] = 0.0;
    y[true_class] = 1.0 - compensated_sum(&y);
    // the subtraction can leave the total one ulp off; nudge until exact
    for _ in 0..8 {
        let s = compensated_sum(&y);
        if s == 1.0 {
            break;
        }
        y[true_class] = if s > 1.0 {
            y[true_class].next_down()
        } else {
            y[true_class].next_up()
        };
    }
    Ok(y)
}

/// `x * sigmoid(beta * x)`.
pub fn swish(x: f64, beta: f64) -> f64 {
    x / (1.0 + (-beta * x).exp())
}

/// Convex combination `lambda * a + (1 - lambda) * b` of inputs and targets.
pub fn mixup(
    x1: &[f64],
    y1: &[f64],
    x2: &[f64],
    y2: &[f64],
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), TrainMathError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(TrainMathError::Param(format!("lambda {lambda} is outside [0, 1]")));
    }
    if x1.len() != x2.len() {
        return Err(TrainMathError::Shape(format!(
            "inputs hold {} and {} values",
            x1.len(),
            x2.len()
        )));
    }
    if y1.len() != y2.len() {
        return Err(TrainMathError::Shape(format!(
            "targets hold {} and {} classes",
            y1.len(),
            y2.len()
        )));
    }
    let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter()
            .zip(b)
            .map(|(&u, &v)| lambda * u + (1.0 - lambda) * v)
            .collect()
    };
    Ok((mix(x1, x2), mix(y1, y2)))
}

/// Seeded Beta(a, b) sampler for mixup coefficients.
pub struct BetaSampler {
    dist: Beta<f64>,
    rng: ChaCha8Rng,
}

impl BetaSampler {
    pub fn new(a: f64, b: f64, seed: u64) -> Result<Self, TrainMathError> {
        let dist = Beta::new(a, b).map_err(|e| TrainMathError::Param(format!("beta({a}, {b}): {e}")))?;
        Ok(BetaSampler {
            dist,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn sample(&mut self) -> f64 {
        self.dist.sample(&mut self.rng)
    }
}

/// Row-major H x W x C image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Image, TrainMathError> {
        if data.len() != h * w * c {
            return Err(TrainMathError::Shape(format!(
                "{h}x{w}x{c} image cannot hold {} values",
                data.len()
            )));
        }
        Ok(Image { h, w, c, data })
    }

    pub fn at(&self, r: usize, col: usize, ch: usize) -> f32 {
        self.data[(r * self.w + col) * self.c + ch]
    }
}

/// Nearest-neighbour upscaling by an integer factor.
pub fn nn_upscale(img: &Image, factor: usize) -> Result<Image, TrainMathError> {
    if factor == 0 {
        return Err(TrainMathError::Param("factor must be at least 1".into()));
    }
    let (h, w) = (img.h * factor, img.w * factor);
    let mut data = Vec::with_capacity(h * w * img.c);
    for r in 0..h {
        for col in 0..w {
            let base = ((r / factor) * img.w + col / factor) * img.c;
            data.extend_from_slice(&img.data[base..base + img.c]);
        }
    }
    Ok(Image { h, w, c: img.c, data })
}
