//! Shared oracles for integration tests. Everything here is written as
//! directly as possible (O(N^2) summations, scalar arithmetic) and must stay
//! independent of the implementation paths it checks.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use freqscreen::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Complex value as a (re, im) pair.
pub type C = (f64, f64);

fn c_add(a: C, b: C) -> C {
    (a.0 + b.0, a.1 + b.1)
}

fn c_mul(a: C, b: C) -> C {
    (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0)
}

fn expi(theta: f64) -> C {
    (theta.cos(), theta.sin())
}

/// Direct O(N^2) centered DFT of one channel, row-major `[H, W]`.
/// Returns (amplitude, phase) with the zero-frequency bin at
/// (H/2, W/2) (floor).
pub fn dft2_centered_oracle(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut amp = vec![0.0; h * w];
    let mut pha = vec![0.0; h * w];
    let (ch, cw) = (h / 2, w / 2);
    for u in 0..h {
        for v in 0..w {
            let mut acc: C = (0.0, 0.0);
            for m in 0..h {
                for n in 0..w {
                    let theta = -2.0 * std::f64::consts::PI
                        * (u as f64 * m as f64 / h as f64 + v as f64 * n as f64 / w as f64);
                    acc = c_add(acc, c_mul((x[m * w + n], 0.0), expi(theta)));
                }
            }
            let si = (u + ch) % h;
            let sj = (v + cw) % w;
            amp[si * w + sj] = (acc.0 * acc.0 + acc.1 * acc.1).sqrt();
            pha[si * w + sj] = acc.1.atan2(acc.0);
        }
    }
    (amp, pha)
}

/// Direct O(N^2) inverse of a centered amplitude/phase spectrum; real part
/// of (1/(H*W)) * sum A e^{i phi} e^{+2 pi i (...)}.
pub fn idft2_centered_oracle(amp: &[f64], pha: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (ch, cw) = (h / 2, w / 2);
    let mut out = vec![0.0; h * w];
    for m in 0..h {
        for n in 0..w {
            let mut acc: C = (0.0, 0.0);
            for u in 0..h {
                for v in 0..w {
                    let si = (u + ch) % h;
                    let sj = (v + cw) % w;
                    let z = c_mul((amp[si * w + sj], 0.0), expi(pha[si * w + sj]));
                    let theta = 2.0 * std::f64::consts::PI
                        * (u as f64 * m as f64 / h as f64 + v as f64 * n as f64 / w as f64);
                    acc = c_add(acc, c_mul(z, expi(theta)));
                }
            }
            out[m * w + n] = acc.0 / (h * w) as f64;
        }
    }
    out
}

/// Phase difference folded into (-pi, pi].
pub fn wrap_angle(d: f64) -> f64 {
    let mut d = d % (2.0 * std::f64::consts::PI);
    if d > std::f64::consts::PI {
        d -= 2.0 * std::f64::consts::PI;
    }
    if d <= -std::f64::consts::PI {
        d += 2.0 * std::f64::consts::PI;
    }
    d
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
