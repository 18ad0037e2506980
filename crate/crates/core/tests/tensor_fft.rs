mod common;

use common::*;
use rand::Rng;

use freqscreen::tensor::{
    check_gradients, fft2_centered, ifft2_centered, Spectrum, Tape, Tensor,
};

#[test]
fn fft_matches_brute_force_dft_oracle() {
    let mut r = rng(11);
    let x = random_tensor(&[1, 8, 8], &mut r);
    let s = fft2_centered(&x).unwrap();
    let (amp_o, pha_o) = dft2_centered_oracle(x.data(), 8, 8);
    assert!(max_abs_diff(s.amplitude.data(), &amp_o) < 1e-6);
    for k in 0..64 {
        if amp_o[k] > 1e-9 {
            let d = wrap_angle(s.phase.data()[k] - pha_o[k]).abs();
            assert!(d < 1e-6, "phase bin {k}: {d}");
        }
    }
}

#[test]
fn fft_multi_channel_matches_oracle_per_channel() {
    let mut r = rng(12);
    let (c, h, w) = (3, 5, 6);
    let x = random_tensor(&[c, h, w], &mut r);
    let s = fft2_centered(&x).unwrap();
    for ci in 0..c {
        let (amp_o, _) = dft2_centered_oracle(&x.data()[ci * h * w..(ci + 1) * h * w], h, w);
        assert!(max_abs_diff(&s.amplitude.data()[ci * h * w..(ci + 1) * h * w], &amp_o) < 1e-6);
    }
}

#[test]
fn inverse_matches_brute_force_inverse_oracle() {
    // Build a valid 4x4 spectrum by transforming a known real map, then
    // invert it both ways.
    let mut r = rng(13);
    let x = random_tensor(&[1, 4, 4], &mut r);
    let s = fft2_centered(&x).unwrap();
    let y = ifft2_centered(&s).unwrap();
    let y_o = idft2_centered_oracle(s.amplitude.data(), s.phase.data(), 4, 4);
    assert!(max_abs_diff(y.data(), &y_o) < 1e-6);
    assert!(max_abs_diff(y.data(), x.data()) < 1e-6);
}

#[test]
fn roundtrip_small_shapes() {
    let mut r = rng(14);
    for _ in 0..20 {
        let c = r.gen_range(1..=4);
        let h = r.gen_range(1..=8);
        let w = r.gen_range(1..=8);
        let x = random_tensor(&[c, h, w], &mut r);
        let y = ifft2_centered(&fft2_centered(&x).unwrap()).unwrap();
        assert!(
            max_abs_diff(x.data(), y.data()) < 1e-5,
            "roundtrip failed at [{c},{h},{w}]"
        );
    }
}

#[test]
fn parseval_identity() {
    let mut r = rng(15);
    for _ in 0..10 {
        let h = r.gen_range(2..=8);
        let w = r.gen_range(2..=8);
        let x = random_tensor(&[2, h, w], &mut r);
        let s = fft2_centered(&x).unwrap();
        let space: f64 = x.data().iter().map(|v| v * v).sum();
        let freq: f64 =
            s.amplitude.data().iter().map(|a| a * a).sum::<f64>() / (h * w) as f64;
        assert!(
            (space - freq).abs() / space.abs().max(1e-12) < 1e-4,
            "parseval: {space} vs {freq}"
        );
    }
}

#[test]
fn amplitude_gradient_via_fft() {
    // f(x) = sum(w * A(x)^2); smooth everywhere including zero bins.
    let mut r = rng(16);
    let x = random_tensor(&[2, 4, 4], &mut r);
    let wgt = random_tensor(&[2, 4, 4], &mut r);
    let rep = check_gradients(
        move |tape, ids| {
            let z = tape.fft2_complex(ids[0]);
            let a = tape.complex_abs(z);
            let a2 = tape.square(a);
            let w = tape.constant(&wgt);
            let prod = tape.mul(a2, w);
            tape.sum_all(prod)
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-6, "rel err {}", rep.max_rel_err);
}

#[test]
fn spectral_roundtrip_gradient() {
    // f(x) = sum(w * ifft(polar(scale * A(x), P(x)))): the shape of both
    // augmentations; exercises abs, arg, polar and the inverse together.
    let mut r = rng(17);
    let x = random_tensor(&[1, 4, 6], &mut r);
    let wgt = random_tensor(&[1, 4, 6], &mut r);
    let scale = random_tensor(&[1, 4, 6], &mut r);
    let rep = check_gradients(
        move |tape, ids| {
            let z = tape.fft2_complex(ids[0]);
            let a = tape.complex_abs(z);
            let p = tape.complex_arg(z);
            let sc = tape.constant(&scale);
            let a2 = tape.mul(a, sc);
            let z2 = tape.polar_to_complex(a2, p);
            let y = tape.ifft2_real(z2);
            let w = tape.constant(&wgt);
            let prod = tape.mul(y, w);
            tape.sum_all(prod)
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "rel err {}", rep.max_rel_err);
}

#[test]
fn inverse_gradient_wrt_amplitude_and_phase() {
    // Check d(ifft)/d(amp, phase) at a spectrum with no tiny bins so the
    // phase direction is well conditioned.
    let mut r = rng(18);
    let amp = {
        let mut t = random_tensor(&[1, 4, 4], &mut r);
        for v in t.data_mut() {
            *v = 1.0 + v.abs();
        }
        t
    };
    let pha = random_tensor(&[1, 4, 4], &mut r);
    let wgt = random_tensor(&[1, 4, 4], &mut r);
    let rep = check_gradients(
        move |tape, ids| {
            let z = tape.polar_to_complex(ids[0], ids[1]);
            let y = tape.ifft2_real(z);
            let w = tape.constant(&wgt);
            let prod = tape.mul(y, w);
            tape.sum_all(prod)
        },
        &[amp, pha],
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-6, "rel err {}", rep.max_rel_err);
}

#[test]
fn phase_gradient_where_amplitude_is_large() {
    // Pure arg() path, on an input whose spectrum stays far from zero.
    let mut base = Tensor::zeros(&[1, 4, 4]);
    base.data_mut()[0] = 4.0; // impulse: flat spectrum, |z| = 4 everywhere
    let mut r = rng(19);
    let bump = random_tensor(&[1, 4, 4], &mut r);
    let x = Tensor::new(
        vec![1, 4, 4],
        base.data()
            .iter()
            .zip(bump.data())
            .map(|(a, b)| a + 0.1 * b)
            .collect(),
    )
    .unwrap();
    let s = fft2_centered(&x).unwrap();
    let min_amp = s.amplitude.data().iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(min_amp > 0.5, "test precondition: spectrum bounded away from 0");

    let wgt = random_tensor(&[1, 4, 4], &mut r);
    let rep = check_gradients(
        move |tape, ids| {
            let z = tape.fft2_complex(ids[0]);
            let p = tape.complex_arg(z);
            let w = tape.constant(&wgt);
            let prod = tape.mul(p, w);
            tape.sum_all(prod)
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-5, "rel err {}", rep.max_rel_err);
}

#[test]
fn rescale_amp_equals_polar_route() {
    // Same value and same input gradient as rebuilding from
    // (new amplitude, arg(z)).
    let mut r = rng(22);
    let x = random_tensor(&[1, 4, 4], &mut r);
    let scale = random_tensor(&[1, 4, 4], &mut r);
    let wgt = random_tensor(&[1, 4, 4], &mut r);

    let run = |use_rescale: bool| {
        let mut tape = Tape::new();
        let id = tape.leaf(&x);
        let z = tape.fft2_complex(id);
        let a = tape.complex_abs(z);
        let sc = tape.constant(&scale);
        let a2 = tape.mul(a, sc);
        let z2 = if use_rescale {
            tape.rescale_amp(z, a2)
        } else {
            let p = tape.complex_arg(z);
            tape.polar_to_complex(a2, p)
        };
        let y = tape.ifft2_real(z2);
        let w = tape.constant(&wgt);
        let prod = tape.mul(y, w);
        let loss = tape.sum_all(prod);
        let out = tape.data(y).to_vec();
        tape.backward(loss).unwrap();
        (out, tape.item(loss), tape.grad(id).unwrap().to_vec())
    };
    let (ya, la, ga) = run(true);
    let (yb, lb, gb) = run(false);
    assert!(max_abs_diff(&ya, &yb) < 1e-12);
    assert!((la - lb).abs() < 1e-12);
    assert!(max_abs_diff(&ga, &gb) < 1e-10);
}

#[test]
fn backward_is_bitwise_deterministic() {
    let mut r = rng(20);
    let x = random_tensor(&[2, 4, 4], &mut r);
    let run = || {
        let mut tape = Tape::new();
        let id = tape.leaf(&x);
        let z = tape.fft2_complex(id);
        let a = tape.complex_abs(z);
        let sq = tape.square(a);
        let s = tape.sum_all(sq);
        tape.backward(s).unwrap();
        tape.grad(id).unwrap().to_vec()
    };
    let g1 = run();
    let g2 = run();
    assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn amplitude_is_nonnegative_everywhere() {
    let mut r = rng(21);
    for _ in 0..5 {
        let x = random_tensor(&[2, 6, 3], &mut r);
        let s = fft2_centered(&x).unwrap();
        assert!(s.amplitude.data().iter().all(|&a| a >= 0.0));
        assert!(s.shifted);
    }
}

#[test]
fn hand_built_valid_spectrum_roundtrips() {
    // DC plus a conjugate-symmetric pair is the spectrum of a real cosine.
    let (h, w) = (4, 4);
    let mut amp = Tensor::zeros(&[1, h, w]);
    let mut pha = Tensor::zeros(&[1, h, w]);
    let center = (h / 2) * w + (w / 2);
    amp.data_mut()[center] = 8.0;
    // pair at (center_row, center_col +/- 1)
    amp.data_mut()[center + 1] = 3.0;
    amp.data_mut()[center - 1] = 3.0;
    pha.data_mut()[center + 1] = 0.9;
    pha.data_mut()[center - 1] = -0.9;
    let s = Spectrum {
        amplitude: amp,
        phase: pha,
        shifted: true,
    };
    let x = ifft2_centered(&s).unwrap();
    let oracle = idft2_centered_oracle(s.amplitude.data(), s.phase.data(), h, w);
    assert!(max_abs_diff(x.data(), &oracle) < 1e-6);
    // And forward again recovers the spectrum.
    let s2 = fft2_centered(&x).unwrap();
    assert!(max_abs_diff(s2.amplitude.data(), s.amplitude.data()) < 1e-5);
}
