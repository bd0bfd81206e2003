use super::ModelSpec;
use serde::{Deserialize, Serialize};

pub const DEFAULT_CHANNEL_DIVISOR: usize = 8;

/// Compound scaling: depth by `alpha^phi`, width by `beta^phi`, input
/// resolution by `gamma^phi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingCoefficients {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub phi: f64,
}

impl ScalingCoefficients {
    pub fn new(alpha: f64, beta: f64, gamma: f64, phi: f64) -> Self {
        debug_assert!(alpha > 0.0 && beta > 0.0 && gamma > 0.0);
        ScalingCoefficients {
            alpha,
            beta,
            gamma,
            phi,
        }
    }

    pub fn depth_multiplier(&self) -> f64 {
        self.alpha.powf(self.phi)
    }

    pub fn width_multiplier(&self) -> f64 {
        self.beta.powf(self.phi)
    }

    pub fn resolution_multiplier(&self) -> f64 {
        self.gamma.powf(self.phi)
    }
}

/// `alpha * beta^2 * gamma^2 - 2`; zero when the FLOPs-doubling constraint holds.
pub fn constraint_residual(c: &ScalingCoefficients) -> f64 {
    c.alpha * c.beta * c.beta * c.gamma * c.gamma - 2.0
}

/// Scales a channel count and rounds it to the nearest multiple of
/// `divisor` (never below `divisor`), adding one step when rounding lost
/// more than 10% of the scaled width. A multiplier of exactly 1 leaves the
/// count untouched.
pub fn round_channels(channels: usize, multiplier: f64, divisor: usize) -> usize {
    if multiplier == 1.0 {
        return channels;
    }
    let scaled = channels as f64 * multiplier;
    let d = divisor as f64;
    let mut rounded = (((scaled + d / 2.0) / d).floor() * d).max(d);
    if rounded < 0.9 * scaled {
        rounded += d;
    }
    rounded as usize
}

fn scale_repeats(r: usize, multiplier: f64) -> usize {
    if multiplier == 1.0 {
        return r;
    }
    // tolerate pow() noise so that e.g. 2 * 1.5 stays 3
    ((r as f64 * multiplier) - 1e-9).ceil().max(1.0) as usize
}

fn scale_resolution(len: usize, multiplier: f64) -> usize {
    if multiplier == 1.0 {
        return len;
    }
    (len as f64 * multiplier + 0.5).floor().max(1.0) as usize
}

pub fn apply_compound_scaling(spec: &ModelSpec, c: &ScalingCoefficients) -> ModelSpec {
    apply_compound_scaling_with_divisor(spec, c, DEFAULT_CHANNEL_DIVISOR)
}

pub fn apply_compound_scaling_with_divisor(spec: &ModelSpec, c: &ScalingCoefficients, divisor: usize) -> ModelSpec {
    let depth = c.depth_multiplier();
    let width = c.width_multiplier();
    let res = c.resolution_multiplier();
    let ch = |n: usize| round_channels(n, width, divisor);

    let mut out = spec.clone();
    out.input[0] = scale_resolution(spec.input[0], res);
    out.input[1] = scale_resolution(spec.input[1], res);
    out.stem.out_channels = ch(spec.stem.out_channels);
    for b in &mut out.blocks {
        b.o = ch(b.o);
        b.r = scale_repeats(b.r, depth);
    }
    if let Some(head) = &mut out.head {
        head.out_channels = ch(head.out_channels);
    }
    for exit in &mut out.exits {
        for b in &mut exit.module_blocks {
            b.o = ch(b.o);
        }
    }
    out.rechain();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{micronet_baseline, wrn28_10};

    #[test]
    fn residual_examples() {
        assert_eq!(constraint_residual(&ScalingCoefficients::new(2.0, 1.0, 1.0, 1.0)), 0.0);
        let r = constraint_residual(&ScalingCoefficients::new(1.0, 1.0, 2f64.sqrt(), 1.0));
        assert!(r.abs() < 1e-12);
        let r = constraint_residual(&ScalingCoefficients::new(1.0, 0.9, 1.4, 1.0));
        assert!((r - (-0.4124)).abs() < 1e-12, "{r}");
    }

    #[test]
    fn channel_rounding() {
        assert_eq!(round_channels(16, 0.9, 8), 16);
        assert_eq!(round_channels(32, 0.9, 8), 32); // 28.8 -> 32
        assert_eq!(round_channels(24, 0.9, 8), 24); // 21.6 -> 24
        assert_eq!(round_channels(40, 0.9, 8), 40); // 36 -> 40 (round half up)
        assert_eq!(round_channels(80, 0.9, 8), 72);
        assert_eq!(round_channels(4, 0.5, 8), 8); // floor at divisor
        assert_eq!(round_channels(20, 1.0, 8), 20);
        assert_eq!(round_channels(100, 1.2, 8), 120);
    }

    #[test]
    fn phi_zero_is_identity() {
        let spec = micronet_baseline();
        let out = apply_compound_scaling(&spec, &ScalingCoefficients::new(1.3, 0.7, 1.9, 0.0));
        assert_eq!(out, spec);
    }

    #[test]
    fn unit_coefficients_are_identity() {
        let spec = wrn28_10();
        let out = apply_compound_scaling(&spec, &ScalingCoefficients::new(1.0, 1.0, 1.0, 3.7));
        assert_eq!(out, spec);
    }

    #[test]
    fn found_coefficients_on_32px() {
        let spec = micronet_baseline();
        let out = apply_compound_scaling(&spec, &ScalingCoefficients::new(1.0, 0.9, 1.4, 1.0));
        assert_eq!(out.input, [45, 45, 3]);
        for (a, b) in spec.blocks.iter().zip(&out.blocks) {
            assert_eq!(a.r, b.r);
            assert_eq!(b.o, round_channels(a.o, 0.9, 8));
        }
        out.validate().unwrap();
    }

    #[test]
    fn depth_scaling_uses_ceiling() {
        let spec = micronet_baseline();
        let out = apply_compound_scaling(&spec, &ScalingCoefficients::new(1.2, 1.0, 1.0, 1.0));
        for (a, b) in spec.blocks.iter().zip(&out.blocks) {
            assert_eq!(b.r, (a.r as f64 * 1.2).ceil() as usize);
        }
    }
}
