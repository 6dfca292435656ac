//! Deterministic parameter initialization.
//!
//! All randomness flows from a caller-provided ChaCha8 stream so that a
//! (seed, architecture) pair always produces bit-identical weights. Draw
//! order is therefore part of the model's construction contract.

use crate::nn::tape::Arr;
use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One standard-normal draw via Box–Muller (two uniforms in, one normal out;
/// the second output is discarded to keep the draw count predictable).
pub fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Arr {
    Arr::from_shape_simple_fn(IxDyn(shape), || std_normal(rng) * std)
}

/// He initialization for a conv weight `[Cout, Cin, kh, kw]`.
pub fn kaiming_conv(rng: &mut ChaCha8Rng, cout: usize, cin: usize, kh: usize, kw: usize) -> Arr {
    let fan_in = (cin * kh * kw) as f64;
    normal(rng, &[cout, cin, kh, kw], (2.0 / fan_in).sqrt())
}

/// Glorot initialization for a linear weight `[Din, Dout]`.
pub fn xavier_linear(rng: &mut ChaCha8Rng, din: usize, dout: usize) -> Arr {
    normal(rng, &[din, dout], (2.0 / (din + dout) as f64).sqrt())
}
