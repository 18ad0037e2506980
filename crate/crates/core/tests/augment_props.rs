//! Oracle and property tests for the low-frequency augmentations.

mod common;

use common::*;

use freqscreen::augment::{
    lf_dropout, lf_dropout_masked, lf_uncert, lf_uncert_traced, lowfreq_stats, DropMask,
    LowFreqRegion, NoiseScales, SIGMA_FLOOR,
};
use freqscreen::tensor::{check_gradients, fft2_centered, Tape, Tensor};

#[test]
fn dropout_p0_is_identity() {
    let mut r = rng(60);
    let x = random_tensor(&[2, 8, 8], &mut r);
    let mut tape = Tape::new();
    let xid = tape.constant(&x);
    let (out, _) = lf_dropout(&mut tape, xid, 0.2, 0.0, 7).unwrap();
    assert!(max_abs_diff(tape.data(out), x.data()) < 1e-5);
}

#[test]
fn dropout_p1_r1_zeroes_everything() {
    let mut r = rng(61);
    let x = random_tensor(&[2, 8, 8], &mut r);
    let mut tape = Tape::new();
    let xid = tape.constant(&x);
    let (out, _) = lf_dropout(&mut tape, xid, 1.0, 1.0, 7).unwrap();
    let limit = 1e-5 * x.max_abs();
    assert!(tape.data(out).iter().all(|v| v.abs() < limit));
}

#[test]
fn dropout_matches_brute_force_masked_dft() {
    let mut r = rng(62);
    let x = random_tensor(&[1, 4, 4], &mut r);
    let region = LowFreqRegion::new(4, 4, 0.5).unwrap();
    let mask = DropMask::draw(1, 4, 4, &region, 0.5, 1234);

    let mut tape = Tape::new();
    let xid = tape.constant(&x);
    let trace = lf_dropout_masked(&mut tape, xid, &mask);

    // Oracle: direct-summation DFT, scalar mask multiply, direct-summation
    // inverse, real part.
    let (amp, pha) = dft2_centered_oracle(x.data(), 4, 4);
    let amp_masked: Vec<f64> = amp
        .iter()
        .zip(mask.values().data())
        .map(|(a, m)| a * m)
        .collect();
    let expected = idft2_centered_oracle(&amp_masked, &pha, 4, 4);
    assert!(max_abs_diff(tape.data(trace.output), &expected) < 1e-6);
}

#[test]
fn high_frequencies_and_phase_bit_preserved() {
    let mut r = rng(63);
    let x = random_tensor(&[2, 8, 6], &mut r);
    let region = LowFreqRegion::new(8, 6, 0.2).unwrap();
    let mask = DropMask::draw(2, 8, 6, &region, 0.8, 5);

    let mut tape = Tape::new();
    let xid = tape.constant(&x);
    let trace = lf_dropout_masked(&mut tape, xid, &mask);
    let amp_in = tape.data(trace.amp_in);
    let amp_out = tape.data(trace.amp_out);
    for i in 0..8 {
        for j in 0..6 {
            if !region.contains(i, j) {
                for c in 0..2 {
                    let k = c * 48 + i * 6 + j;
                    assert_eq!(amp_in[k].to_bits(), amp_out[k].to_bits());
                }
            }
        }
    }
    // Phase is a single untouched node on both augmentation paths; check the
    // LF-Uncert trace exposes the identical node values too.
    let spectrum = fft2_centered(&x).unwrap();
    assert!(max_abs_diff(tape.data(trace.phase.unwrap()), spectrum.phase.data()) < 1e-12);

    let scales = Tensor::full(&[2], 0.3);
    let mut tape2 = Tape::new();
    let xid2 = tape2.constant(&x);
    let smu = tape2.constant(&scales);
    let ssg = tape2.constant(&scales);
    let tr2 = lf_uncert_traced(&mut tape2, xid2, smu, ssg, 0.2, &[0.4, -0.2], &[0.1, 0.3]).unwrap();
    let a_in = tape2.data(tr2.amp_in);
    let a_out = tape2.data(tr2.amp_out);
    for i in 0..8 {
        for j in 0..6 {
            if !region.contains(i, j) {
                for c in 0..2 {
                    let k = c * 48 + i * 6 + j;
                    assert_eq!(a_in[k].to_bits(), a_out[k].to_bits());
                }
            }
        }
    }
    assert!(max_abs_diff(tape2.data(tr2.phase.unwrap()), spectrum.phase.data()) < 1e-12);
}

#[test]
fn dropout_expectation_scales_region_by_keep_probability() {
    // The mean over many fresh masks of the augmented spectrum is the
    // deterministic spectrum scaled by (1-p) inside the region and untouched
    // outside. Measured before inversion; the real-part inverse symmetrizes
    // conjugate pairs and would fold unmasked mirror bins into the estimate.
    let mut r = rng(64);
    let x = random_tensor(&[1, 4, 4], &mut r);
    let p = 0.3;
    let n = 10_000;
    let region = LowFreqRegion::new(4, 4, 0.5).unwrap();
    let mut mean_amp = vec![0.0; 16];
    for s in 0..n {
        let mask = DropMask::draw(1, 4, 4, &region, p, 1000 + s as u64);
        let mut tape = Tape::new();
        let xid = tape.constant(&x);
        let trace = lf_dropout_masked(&mut tape, xid, &mask);
        for (m, v) in mean_amp.iter_mut().zip(tape.data(trace.amp_out)) {
            *m += v / n as f64;
        }
    }
    let full_spec = fft2_centered(&x).unwrap();
    let se_scale = (p * (1.0 - p) / n as f64).sqrt();
    for i in 0..4 {
        for j in 0..4 {
            let k = i * 4 + j;
            let a = full_spec.amplitude.data()[k];
            if region.contains(i, j) {
                let tol = 3.0 * a.max(1.0) * se_scale;
                assert!(
                    (mean_amp[k] - (1.0 - p) * a).abs() <= tol,
                    "bin ({i},{j}): mean {} vs expected {} (tol {tol})",
                    mean_amp[k],
                    (1.0 - p) * a
                );
            } else {
                assert!((mean_amp[k] - a).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn uncert_zero_scales_is_identity() {
    let mut r = rng(65);
    let x = random_tensor(&[2, 8, 8], &mut r);
    let zeros = Tensor::zeros(&[2]);
    let mut tape = Tape::new();
    let xid = tape.constant(&x);
    let smu = tape.constant(&zeros);
    let ssg = tape.constant(&zeros);
    let out = lf_uncert(&mut tape, xid, smu, ssg, 0.2, &[1.3, -0.4], &[0.8, 2.0]).unwrap();
    assert!(max_abs_diff(tape.data(out), x.data()) < 1e-5);
}

#[test]
fn uncert_zero_draws_is_identity() {
    let mut r = rng(66);
    let x = random_tensor(&[2, 8, 8], &mut r);
    let scales = Tensor::full(&[2], 0.7);
    let mut tape = Tape::new();
    let xid = tape.constant(&x);
    let smu = tape.constant(&scales);
    let ssg = tape.constant(&scales);
    let out = lf_uncert(&mut tape, xid, smu, ssg, 0.2, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
    assert!(max_abs_diff(tape.data(out), x.data()) < 1e-5);
}

#[test]
fn uncert_constant_input_floor_path_is_identity() {
    // A constant map has sigma = 0 inside the region; the floor keeps the
    // division finite and z = 0 must reproduce the input.
    let x = Tensor::full(&[1, 8, 8], 3.75);
    let scales = Tensor::full(&[1], 0.5);
    let mut tape = Tape::new();
    let xid = tape.constant(&x);
    let smu = tape.constant(&scales);
    let ssg = tape.constant(&scales);
    let out = lf_uncert(&mut tape, xid, smu, ssg, 0.2, &[0.0], &[0.0]).unwrap();
    assert!(max_abs_diff(tape.data(out), x.data()) < 1e-5);
}

#[test]
fn uncert_matches_brute_force_spectral_oracle() {
    let mut r = rng(67);
    let (c, h, w) = (2, 4, 4);
    let x = random_tensor(&[c, h, w], &mut r);
    let rfrac = 0.5;
    let z_mu = [0.7, -1.1];
    let z_sigma = [0.4, 0.9];
    let scale = 0.1;

    let scales = Tensor::full(&[c], scale);
    let mut tape = Tape::new();
    let xid = tape.constant(&x);
    let smu = tape.constant(&scales);
    let ssg = tape.constant(&scales);
    let out = lf_uncert(&mut tape, xid, smu, ssg, rfrac, &z_mu, &z_sigma).unwrap();

    // Oracle: direct DFT, scalar statistics, AdaIN, direct inverse.
    let region = LowFreqRegion::new(h, w, rfrac).unwrap();
    let mut expected = Vec::new();
    for ci in 0..c {
        let plane = &x.data()[ci * h * w..(ci + 1) * h * w];
        let (mut amp, pha) = dft2_centered_oracle(plane, h, w);
        let vals: Vec<f64> = region
            .rows()
            .iter()
            .flat_map(|&i| region.cols().iter().map(move |&j| (i, j)))
            .map(|(i, j)| amp[i * w + j])
            .collect();
        let n = vals.len() as f64;
        let mu: f64 = vals.iter().sum::<f64>() / n;
        let sigma = (vals.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / n).sqrt();
        let sigma_eff = sigma.max(SIGMA_FLOOR);
        let beta = mu + scale * z_mu[ci];
        let gamma = sigma + scale * z_sigma[ci];
        for &i in region.rows() {
            for &j in region.cols() {
                let a = amp[i * w + j];
                amp[i * w + j] = gamma * ((a - mu) / sigma_eff) + beta;
            }
        }
        expected.extend(idft2_centered_oracle(&amp, &pha, h, w));
    }
    assert!(max_abs_diff(tape.data(out), &expected) < 1e-6);
}

#[test]
fn uncert_gradients_reach_raw_noise_parameters() {
    // d(loss)/d(s_mu), d(loss)/d(s_sigma) through softplus and the full
    // augmentation, with frozen draws.
    let mut r = rng(68);
    let x = random_tensor(&[2, 6, 6], &mut r);
    let wgt = random_tensor(&[2, 6, 6], &mut r);
    let ns = NoiseScales::init(&[2], 0.1).unwrap();
    let z_mu = [0.9, -0.3];
    let z_sigma = [-0.5, 1.2];
    let rep = check_gradients(
        move |tape, ids| {
            let xc = tape.constant(&x);
            let smu = tape.softplus(ids[0]);
            let ssg = tape.softplus(ids[1]);
            let out = lf_uncert(tape, xc, smu, ssg, 0.3, &z_mu, &z_sigma).unwrap();
            let w = tape.constant(&wgt);
            let p = tape.mul(out, w);
            tape.sum_all(p)
        },
        &[ns.s_mu[0].clone(), ns.s_sigma[0].clone()],
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "rel err {}", rep.max_rel_err);
}

#[test]
fn uncert_gradient_wrt_input_features() {
    let mut r = rng(69);
    let x = random_tensor(&[1, 4, 4], &mut r);
    let wgt = random_tensor(&[1, 4, 4], &mut r);
    let scales = Tensor::full(&[1], 0.1);
    let rep = check_gradients(
        move |tape, ids| {
            let smu = tape.constant(&scales);
            let ssg = tape.constant(&scales);
            let out = lf_uncert(tape, ids[0], smu, ssg, 0.5, &[0.6], &[-0.8]).unwrap();
            let w = tape.constant(&wgt);
            let p = tape.mul(out, w);
            tape.sum_all(p)
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "rel err {}", rep.max_rel_err);
}

#[test]
fn dropout_gradient_with_frozen_mask() {
    let mut r = rng(70);
    let x = random_tensor(&[2, 4, 4], &mut r);
    let wgt = random_tensor(&[2, 4, 4], &mut r);
    let region = LowFreqRegion::new(4, 4, 0.5).unwrap();
    let mask = DropMask::draw(2, 4, 4, &region, 0.5, 77);
    let rep = check_gradients(
        move |tape, ids| {
            let trace = lf_dropout_masked(tape, ids[0], &mask);
            let w = tape.constant(&wgt);
            let p = tape.mul(trace.output, w);
            tape.sum_all(p)
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "rel err {}", rep.max_rel_err);
}

#[test]
fn stats_match_two_pass_oracle() {
    let mut r = rng(71);
    let amp = {
        let mut t = random_tensor(&[3, 6, 6], &mut r);
        for v in t.data_mut() {
            *v = v.abs() * 4.0 + 1.0;
        }
        t
    };
    let st = lowfreq_stats(&amp, 0.5).unwrap();
    let region = LowFreqRegion::new(6, 6, 0.5).unwrap();
    for c in 0..3 {
        // independent two-pass mean/std
        let mut vals = Vec::new();
        for &i in region.rows() {
            for &j in region.cols() {
                vals.push(amp.data()[c * 36 + i * 6 + j]);
            }
        }
        let mu: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        let var: f64 = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / vals.len() as f64;
        assert!((st.mu[c] - mu).abs() < 1e-7);
        assert!((st.sigma[c] - var.sqrt()).abs() < 1e-7);
    }
}
