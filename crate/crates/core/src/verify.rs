//! In-process property suite behind the `verify` command: numerical-core
//! checks, the gradient suite, augmentation identities, the pseudo-label
//! truth table, masking invariants, alternating-optimization contracts and
//! metric oracles. Each check reports the measured worst case against its
//! tolerance.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{lf_dropout_masked, lf_uncert, lf_uncert_traced, DropMask, LowFreqRegion};
use crate::decouple::{decouple_traced, DecoupleIds, DecoupleParams, DiseaseEmbeddings};
use crate::error::Result;
use crate::labels::{generate_pseudo_labels, PartialLabels, NEGATIVE, POSITIVE, UNKNOWN};
use crate::loss::{
    adversarial_loss, kl_known, mmd_loss, partial_bce_known, partial_bce_pseudo,
    s2_classification_loss, s2_total_loss, total_loss, KernelBandwidth, KernelConfig, LossWeights,
};
use crate::metrics::{aggregate, macro_f, qwk, TaskScore};
use crate::model::{ModelConfig, ModelIds, ModelParams, ParamMode};
use crate::tensor::{check_gradients, fft2_centered, ifft2_centered, Tape, Tensor, TensorId};
use crate::trainer::{three_branch_graph, Batch, StepRandomness, TrainConfig, Trainer};

/// Result of one verification check.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    /// Worst measured value (error, mismatch count, ...).
    pub measured: f64,
    pub tolerance: f64,
    pub details: String,
}

impl CheckOutcome {
    fn of(name: &str, measured: f64, tolerance: f64, details: impl Into<String>) -> Self {
        CheckOutcome {
            name: name.to_string(),
            passed: measured <= tolerance,
            measured,
            tolerance,
            details: details.into(),
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<38} measured={:<12.3e} tolerance={:<9.1e} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance,
            self.details
        )
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).expect("shape")
}

// ---- numerical core ----

pub fn check_fft_roundtrip() -> CheckOutcome {
    let mut r = rng(1001);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let c = r.gen_range(1..=8);
        let h = r.gen_range(1..=32);
        let w = r.gen_range(1..=32);
        let x = random_tensor(&[c, h, w], &mut r);
        let y = match fft2_centered(&x).and_then(|s| ifft2_centered(&s)) {
            Ok(y) => y,
            Err(e) => return CheckOutcome::of("fft_roundtrip", f64::INFINITY, 1e-5, e.to_string()),
        };
        let err = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err);
    }
    CheckOutcome::of("fft_roundtrip", worst, 1e-5, "100 random [C<=8, H,W<=32] tensors")
}

pub fn check_parseval() -> CheckOutcome {
    let mut r = rng(1002);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let c = r.gen_range(1..=4);
        let h = r.gen_range(2..=24);
        let w = r.gen_range(2..=24);
        let x = random_tensor(&[c, h, w], &mut r);
        let s = fft2_centered(&x).expect("finite input");
        let space: f64 = x.data().iter().map(|v| v * v).sum();
        let freq: f64 = s.amplitude.data().iter().map(|a| a * a).sum::<f64>() / (h * w) as f64;
        worst = worst.max((space - freq).abs() / space.max(1e-12));
    }
    CheckOutcome::of("parseval", worst, 1e-4, "relative energy mismatch")
}

// ---- gradient suite ----

fn grad_outcome(name: &str, rep: Result<crate::tensor::GradCheckReport>) -> CheckOutcome {
    match rep {
        Ok(r) => CheckOutcome::of(name, r.max_rel_err, 1e-4, format!("{} elements", r.elements_checked)),
        Err(e) => CheckOutcome::of(name, f64::INFINITY, 1e-4, e.to_string()),
    }
}

pub fn check_grad_decouple() -> CheckOutcome {
    let mut r = rng(1010);
    let feat = random_tensor(&[2, 3, 3], &mut r);
    let params = DecoupleParams::init(4, 2, 5, 1011);
    let emb = DiseaseEmbeddings::deterministic(3, 5, 1012);
    let wgt = random_tensor(&[3, 2], &mut r);
    grad_outcome(
        "grad_attention_decouple",
        check_gradients(
            move |tape, ids| {
                let p = DecoupleIds {
                    w1: ids[1],
                    w2: ids[2],
                    v: ids[3],
                };
                let (f, _) = decouple_traced(tape, ids[0], &emb, p);
                let w = tape.constant(&wgt);
                let prod = tape.mul(f, w);
                tape.sum_all(prod)
            },
            &[feat, params.w1, params.w2, params.v],
            1e-5,
        ),
    )
}

pub fn check_grad_losses() -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let labels = PartialLabels::from_rows(&[&[1, -1, 0], &[-1, 1, -1]]).unwrap();
    let teacher_probs =
        Tensor::new(vec![2, 3], vec![0.97, 0.4, 0.6, 0.2, 0.99, 0.03]).unwrap();
    let pseudo = generate_pseudo_labels(teacher_probs.data(), &labels, 0.95).unwrap();
    let mut r = rng(1020);
    let logits = random_tensor(&[2, 3], &mut r);
    let delta = labels.delta();
    let weights = LossWeights::default();

    let lb = labels.clone();
    out.push(grad_outcome(
        "grad_partial_bce_known",
        check_gradients(
            move |tape, ids| {
                let p = tape.sigmoid(ids[0]);
                partial_bce_known(tape, p, &lb).unwrap()
            },
            std::slice::from_ref(&logits),
            1e-5,
        ),
    ));
    let ps = pseudo.clone();
    out.push(grad_outcome(
        "grad_partial_bce_pseudo",
        check_gradients(
            move |tape, ids| {
                let p = tape.sigmoid(ids[0]);
                partial_bce_pseudo(tape, p, &ps).unwrap()
            },
            std::slice::from_ref(&logits),
            1e-5,
        ),
    ));
    let (lb, ps) = (labels.clone(), pseudo.clone());
    out.push(grad_outcome(
        "grad_s2_classification",
        check_gradients(
            move |tape, ids| {
                let p = tape.sigmoid(ids[0]);
                s2_classification_loss(tape, p, &lb, &ps, &weights).unwrap()
            },
            std::slice::from_ref(&logits),
            1e-5,
        ),
    ));
    let student_feats = random_tensor(&[3, 4], &mut r);
    let teacher_feats = random_tensor(&[3, 4], &mut r);
    let kc = KernelConfig {
        bandwidth: KernelBandwidth::Fixed(0.9),
    };
    out.push(grad_outcome(
        "grad_mmd",
        check_gradients(
            move |tape, ids| mmd_loss(tape, &[ids[0]], &[&teacher_feats], &kc).unwrap(),
            std::slice::from_ref(&student_feats),
            1e-5,
        ),
    ));
    let tp = teacher_probs.clone();
    let dl = delta.clone();
    out.push(grad_outcome(
        "grad_kl_known",
        check_gradients(
            move |tape, ids| {
                let p = tape.sigmoid(ids[0]);
                kl_known(tape, &tp, p, &dl).unwrap()
            },
            std::slice::from_ref(&logits),
            1e-5,
        ),
    ));
    let lb = labels.clone();
    out.push(grad_outcome(
        "grad_adversarial",
        check_gradients(
            move |tape, ids| {
                let p = tape.sigmoid(ids[0]);
                adversarial_loss(tape, &lb, p).unwrap()
            },
            std::slice::from_ref(&logits),
            1e-5,
        ),
    ));
    out
}

pub fn check_grad_lf_dropout() -> CheckOutcome {
    let mut r = rng(1030);
    let x = random_tensor(&[2, 6, 6], &mut r);
    let wgt = random_tensor(&[2, 6, 6], &mut r);
    let region = LowFreqRegion::new(6, 6, 0.4).unwrap();
    let mask = DropMask::draw(2, 6, 6, &region, 0.5, 1031);
    grad_outcome(
        "grad_lf_dropout_frozen_mask",
        check_gradients(
            move |tape, ids| {
                let tr = lf_dropout_masked(tape, ids[0], &mask);
                let w = tape.constant(&wgt);
                let p = tape.mul(tr.output, w);
                tape.sum_all(p)
            },
            &[x],
            1e-5,
        ),
    )
}

pub fn check_grad_lf_uncert() -> CheckOutcome {
    let mut r = rng(1040);
    let x = random_tensor(&[2, 6, 6], &mut r);
    let wgt = random_tensor(&[2, 6, 6], &mut r);
    let s_mu = Tensor::full(&[2], -2.0);
    let s_sigma = Tensor::full(&[2], -2.3);
    let z_mu = [0.8, -1.3];
    let z_sigma = [-0.4, 0.9];
    grad_outcome(
        "grad_lf_uncert_scales_and_input",
        check_gradients(
            move |tape, ids| {
                let smu = tape.softplus(ids[1]);
                let ssg = tape.softplus(ids[2]);
                let y = lf_uncert(tape, ids[0], smu, ssg, 0.4, &z_mu, &z_sigma).unwrap();
                let w = tape.constant(&wgt);
                let p = tape.mul(y, w);
                tape.sum_all(p)
            },
            &[x, s_mu, s_sigma],
            1e-5,
        ),
    )
}

/// Small two-block setup shared by the full-graph checks.
fn small_trainer(tau: f64) -> (Trainer, Batch, StepRandomness) {
    let cfg = ModelConfig {
        tasks: 3,
        channels: vec![4, 8],
        image_size: 16,
        d_att: 8,
        d_text: 6,
    };
    let mut model = ModelParams::init(cfg, 1050, 0.1, None).unwrap();
    let mut r = rng(1051);
    for v in model.cls_w.data_mut() {
        *v = r.gen_range(-1.0..1.0);
    }
    for v in model.cls_b.data_mut() {
        *v = r.gen_range(-0.5..0.5);
    }
    let train_cfg = TrainConfig {
        tau,
        lr_main: 1e-3,
        ..Default::default()
    };
    let trainer = Trainer::new(model, train_cfg, 1052).unwrap();
    let images: Vec<Tensor> = (0..2).map(|_| random_tensor(&[1, 16, 16], &mut r)).collect();
    let labels = PartialLabels::from_rows(&[&[1, -1, -1], &[-1, 0, -1]]).unwrap();
    let batch = Batch {
        images,
        labels,
        per_dataset: vec![2],
    };
    let rand = StepRandomness::derive(1053, 0, 0, 2, &trainer.model.config.channels, false);
    (trainer, batch, rand)
}

/// Gradient of the total loss through a 2-block backbone with respect to
/// every parameter group, with teacher-derived targets frozen at the base
/// point (they are stop-gradient data inside a training step).
pub fn check_grad_total_loss() -> CheckOutcome {
    let (trainer, batch, rand) = small_trainer(0.55);

    // Base forward: freeze pseudo labels, KL targets and MMD targets.
    let mut tape = Tape::new();
    let (_, base) = match trainer.forward_three_branches(&mut tape, &batch, &rand) {
        Ok(v) => v,
        Err(e) => return CheckOutcome::of("grad_total_loss_2block", f64::INFINITY, 1e-4, e.to_string()),
    };
    let pseudo = base.pseudo.clone();
    let teacher_probs = tape.value(base.teacher_probs);
    let teacher_feats = base.teacher_feats.clone();
    // Margin so eps-perturbations cannot flip a pseudo label.
    let margin = teacher_probs
        .data()
        .iter()
        .map(|p| (p - 0.55).abs().min((p - 0.45).abs()))
        .fold(f64::INFINITY, f64::min);
    if margin < 1e-3 {
        return CheckOutcome::of(
            "grad_total_loss_2block",
            f64::INFINITY,
            1e-4,
            format!("threshold margin too small: {margin}"),
        );
    }

    let model = trainer.model.clone();
    let cfg = trainer.config.clone();
    let weights = cfg.weights();
    let kernel = KernelConfig {
        bandwidth: KernelBandwidth::Fixed(1.0),
    };
    let inputs: Vec<Tensor> = model
        .theta()
        .into_iter()
        .cloned()
        .chain(model.noise_params().into_iter().cloned())
        .collect();
    let blocks = model.config.blocks();
    let batch2 = batch.clone();
    let emb = model.embeddings.clone();
    let rand2 = rand.clone();

    let rep = check_gradients(
        move |tape, ids| {
            let conv_w = ids[0..blocks].to_vec();
            let conv_b = ids[blocks..2 * blocks].to_vec();
            let dec = DecoupleIds {
                w1: ids[2 * blocks],
                w2: ids[2 * blocks + 1],
                v: ids[2 * blocks + 2],
            };
            let cls_w = ids[2 * blocks + 3];
            let cls_b = ids[2 * blocks + 4];
            let raw_s_mu = ids[2 * blocks + 5..3 * blocks + 5].to_vec();
            let raw_s_sigma = ids[3 * blocks + 5..4 * blocks + 5].to_vec();
            let sigma_mu = raw_s_mu.iter().map(|&id| tape.softplus(id)).collect();
            let sigma_sigma = raw_s_sigma.iter().map(|&id| tape.softplus(id)).collect();
            let mids = ModelIds {
                conv_w,
                conv_b,
                dec,
                cls_w,
                cls_b,
                raw_s_mu,
                raw_s_sigma,
                sigma_mu,
                sigma_sigma,
            };
            let projected = crate::decouple::project_embeddings(tape, &emb, mids.dec);
            let mut t_rows = Vec::new();
            let mut s1_rows = Vec::new();
            let mut s2_rows = Vec::new();
            let mut s2_feats = Vec::new();
            for (i, img) in batch2.images.iter().enumerate() {
                let x = tape.constant(img);
                let blocks_out = crate::model::encode(tape, x, &mids);
                let f_last = *blocks_out.last().unwrap();
                let th = crate::model::head(tape, f_last, &mids, &projected);
                t_rows.push(th.probs);
                let region_mask = DropMask::draw(
                    tape.shape(f_last)[0],
                    tape.shape(f_last)[1],
                    tape.shape(f_last)[2],
                    &LowFreqRegion::new(tape.shape(f_last)[1], tape.shape(f_last)[2], cfg.r)
                        .unwrap(),
                    cfg.p,
                    rand2.mask_seeds[i],
                );
                let tr = lf_dropout_masked(tape, f_last, &region_mask);
                let s1h = crate::model::head(tape, tr.output, &mids, &projected);
                s1_rows.push(s1h.probs);
                let ub = crate::model::encode_uncert(tape, x, &mids, cfg.r, &rand2.z[i]).unwrap();
                let s2h = crate::model::head(tape, *ub.last().unwrap(), &mids, &projected);
                s2_rows.push(s2h.probs);
                s2_feats.push(s2h.feats);
            }
            let tprobs = tape.concat_rows(&t_rows);
            let s1probs = tape.concat_rows(&s1_rows);
            let s2probs = tape.concat_rows(&s2_rows);
            let t_ce = partial_bce_known(tape, tprobs, &batch2.labels).unwrap();
            let s1_ce = partial_bce_pseudo(tape, s1probs, &pseudo).unwrap();
            let s2_ce =
                s2_classification_loss(tape, s2probs, &batch2.labels, &pseudo, &weights).unwrap();
            let trefs: Vec<&Tensor> = teacher_feats.iter().collect();
            let mmd = mmd_loss(tape, &s2_feats, &trefs, &kernel).unwrap();
            let kl = kl_known(tape, &teacher_probs, s2probs, &batch2.labels.delta()).unwrap();
            let s2 = s2_total_loss(tape, s2_ce, mmd, kl, &weights);
            total_loss(tape, t_ce, s1_ce, s2)
        },
        &inputs,
        1e-5,
    );
    grad_outcome("grad_total_loss_2block", rep)
}

// ---- augmentation identities ----

pub fn check_augmentation_identities() -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let mut r = rng(1060);
    let x = random_tensor(&[2, 8, 8], &mut r);

    {
        let mut tape = Tape::new();
        let xid = tape.constant(&x);
        let (y, _) = crate::augment::lf_dropout(&mut tape, xid, 0.2, 0.0, 7).unwrap();
        let err = x
            .data()
            .iter()
            .zip(tape.data(y))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        out.push(CheckOutcome::of("lf_dropout_p0_identity", err, 1e-5, ""));
    }
    {
        let mut tape = Tape::new();
        let xid = tape.constant(&x);
        let (y, _) = crate::augment::lf_dropout(&mut tape, xid, 1.0, 1.0, 7).unwrap();
        let max = tape.data(y).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        out.push(CheckOutcome::of(
            "lf_dropout_p1_r1_zeroes",
            max,
            1e-5 * x.max_abs(),
            "",
        ));
    }
    for (name, scales, z) in [
        ("lf_uncert_sigma0_identity", 0.0, 1.7),
        ("lf_uncert_z0_identity", 0.6, 0.0),
    ] {
        let mut tape = Tape::new();
        let xid = tape.constant(&x);
        let sc = Tensor::full(&[2], scales);
        let smu = tape.constant(&sc);
        let ssg = tape.constant(&sc);
        let y = lf_uncert(&mut tape, xid, smu, ssg, 0.2, &[z, z], &[z, z]).unwrap();
        let err = x
            .data()
            .iter()
            .zip(tape.data(y))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        out.push(CheckOutcome::of(name, err, 1e-5, ""));
    }
    {
        // constant map: sigma floor path
        let c = Tensor::full(&[1, 8, 8], 2.5);
        let mut tape = Tape::new();
        let xid = tape.constant(&c);
        let sc = Tensor::full(&[1], 0.5);
        let smu = tape.constant(&sc);
        let ssg = tape.constant(&sc);
        let y = lf_uncert(&mut tape, xid, smu, ssg, 0.2, &[0.0], &[0.0]).unwrap();
        let err = c
            .data()
            .iter()
            .zip(tape.data(y))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        out.push(CheckOutcome::of("lf_uncert_floor_identity", err, 1e-5, ""));
    }
    {
        // high frequencies and phase bit-preserved before inversion
        let region = LowFreqRegion::new(8, 8, 0.2).unwrap();
        let mask = DropMask::draw(2, 8, 8, &region, 0.9, 1061);
        let mut tape = Tape::new();
        let xid = tape.constant(&x);
        let tr = lf_dropout_masked(&mut tape, xid, &mask);
        let mut bad = 0.0;
        let (a_in, a_out) = (tape.data(tr.amp_in), tape.data(tr.amp_out));
        for i in 0..8 {
            for j in 0..8 {
                if !region.contains(i, j) {
                    for c in 0..2 {
                        let k = c * 64 + i * 8 + j;
                        if a_in[k].to_bits() != a_out[k].to_bits() {
                            bad += 1.0;
                        }
                    }
                }
            }
        }
        let spectrum = fft2_centered(&x).unwrap();
        let phase_err = tape
            .data(tr.phase.unwrap())
            .iter()
            .zip(spectrum.phase.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        out.push(CheckOutcome::of("high_freq_bits_preserved", bad, 0.0, "mismatched bins"));
        out.push(CheckOutcome::of("phase_preserved", phase_err, 1e-12, ""));

        let sc = Tensor::full(&[2], 0.3);
        let mut tape = Tape::new();
        let xid = tape.constant(&x);
        let smu = tape.constant(&sc);
        let ssg = tape.constant(&sc);
        let tr = lf_uncert_traced(&mut tape, xid, smu, ssg, 0.2, &[0.3, -0.7], &[0.2, 0.5]).unwrap();
        let mut bad = 0.0;
        let (a_in, a_out) = (tape.data(tr.amp_in), tape.data(tr.amp_out));
        for i in 0..8 {
            for j in 0..8 {
                if !region.contains(i, j) {
                    for c in 0..2 {
                        let k = c * 64 + i * 8 + j;
                        if a_in[k].to_bits() != a_out[k].to_bits() {
                            bad += 1.0;
                        }
                    }
                }
            }
        }
        out.push(CheckOutcome::of(
            "uncert_high_freq_bits_preserved",
            bad,
            0.0,
            "mismatched bins",
        ));
    }
    out
}

// ---- pseudo labels ----

/// Exhaustive truth table over known-state x probability grid, strict
/// boundaries included. Parameterized over the generator so a deliberately
/// broken implementation is caught (mutation sanity).
pub fn check_pseudo_label_table_with<F>(generate: F) -> CheckOutcome
where
    F: Fn(&[f64], &PartialLabels, f64) -> Result<crate::labels::PseudoLabels>,
{
    let tau = 0.95_f64;
    let lo = 1.0 - tau;
    let eps = 1e-6;
    let probs = [0.0, lo - eps, lo, 0.5, tau, tau + eps, 1.0];
    let mut mismatches = 0.0;
    for known in [UNKNOWN, NEGATIVE, POSITIVE] {
        for &p in &probs {
            let labels = PartialLabels::single(vec![known]).unwrap();
            let got = match generate(&[p], &labels, tau) {
                Ok(g) => g.values()[0],
                Err(_) => {
                    mismatches += 1.0;
                    continue;
                }
            };
            let want = if known != UNKNOWN {
                UNKNOWN
            } else if p > tau {
                POSITIVE
            } else if p < lo {
                NEGATIVE
            } else {
                UNKNOWN
            };
            if got != want {
                mismatches += 1.0;
            }
        }
    }
    CheckOutcome::of(
        "pseudo_label_truth_table",
        mismatches,
        0.0,
        "21 (known, probability) cells",
    )
}

pub fn check_pseudo_label_table() -> CheckOutcome {
    check_pseudo_label_table_with(generate_pseudo_labels)
}

/// Masked-out positions contribute nothing: exact-zero logit gradients and
/// zero-valued empty-mask losses. Parameterized for mutation sanity.
pub fn check_masking_invariants_with<F>(bce: F) -> CheckOutcome
where
    F: Fn(&mut Tape, TensorId, &PartialLabels) -> Result<TensorId>,
{
    let labels = PartialLabels::from_rows(&[&[1, -1, -1], &[-1, 0, -1]]).unwrap();
    let teacher = vec![0.97, 0.5, 0.5, 0.5, 0.5, 0.02];
    let pseudo = generate_pseudo_labels(&teacher, &labels, 0.95).unwrap();
    let mut tape = Tape::new();
    let logits = tape.leaf(
        &Tensor::new(vec![2, 3], vec![0.3, -0.8, 1.2, 0.05, -0.4, 0.9]).unwrap(),
    );
    let probs = tape.sigmoid(logits);
    let known = match bce(&mut tape, probs, &labels) {
        Ok(k) => k,
        Err(e) => return CheckOutcome::of("masking_invariants", f64::INFINITY, 0.0, e.to_string()),
    };
    let psd = partial_bce_pseudo(&mut tape, probs, &pseudo).unwrap();
    let l = tape.add(known, psd);
    tape.backward(l).unwrap();
    let g = tape.grad(logits).unwrap();
    let delta = labels.delta();
    let zeta = pseudo.zeta();
    let mut worst = 0.0_f64;
    for k in 0..6 {
        if delta[k] == 0.0 && zeta[k] == 0.0 {
            worst = worst.max(g[k].abs());
        }
    }

    // Empty-mask convention: zero loss, no gradient.
    let empty = PartialLabels::single(vec![-1, -1]).unwrap();
    let mut tape = Tape::new();
    let lg = tape.leaf(&Tensor::new(vec![1, 2], vec![0.2, -0.4]).unwrap());
    let p = tape.sigmoid(lg);
    let zl = match bce(&mut tape, p, &empty) {
        Ok(z) => z,
        Err(e) => return CheckOutcome::of("masking_invariants", f64::INFINITY, 0.0, e.to_string()),
    };
    worst = worst.max(tape.item(zl).abs());
    tape.backward(zl).unwrap();
    if let Some(g) = tape.grad(lg) {
        worst = worst.max(g.iter().fold(0.0_f64, |m, v| m.max(v.abs())));
    }
    CheckOutcome::of("masking_invariants", worst, 0.0, "free positions and empty masks")
}

pub fn check_masking_invariants() -> CheckOutcome {
    check_masking_invariants_with(partial_bce_known)
}

/// Scalar-oracle values of the masked BCE, parameterized over the
/// implementation so an injected defect (e.g. a flipped sign) fails.
pub fn check_partial_bce_oracle_with<F>(bce: F) -> CheckOutcome
where
    F: Fn(&mut Tape, TensorId, &PartialLabels) -> Result<TensorId>,
{
    let cases: [(&[i8], &[f64], f64); 3] = [
        (&[1, -1, 0], &[0.5, 0.9, 0.5], std::f64::consts::LN_2),
        (&[1, 1], &[1.0, 1.0], 0.0),
        (&[0, -1], &[0.25, 0.9], -(0.75_f64.ln())),
    ];
    let mut worst = 0.0_f64;
    for (labels, probs, want) in cases {
        let labels = PartialLabels::single(labels.to_vec()).unwrap();
        let mut tape = Tape::new();
        let p = tape.constant(&Tensor::new(vec![1, labels.tasks()], probs.to_vec()).unwrap());
        match bce(&mut tape, p, &labels) {
            Ok(l) => worst = worst.max((tape.item(l) - want).abs()),
            Err(e) => {
                return CheckOutcome::of("partial_bce_oracle", f64::INFINITY, 1e-6, e.to_string())
            }
        }
    }
    CheckOutcome::of("partial_bce_oracle", worst, 1e-6, "hand-evaluated cases")
}

pub fn check_partial_bce_oracle() -> CheckOutcome {
    check_partial_bce_oracle_with(partial_bce_known)
}

// ---- alternating optimization ----

pub fn check_alternating_contracts() -> Vec<CheckOutcome> {
    let (mut trainer, batch, rand) = small_trainer(0.95);
    let mut out = Vec::new();

    let bits = |ts: Vec<&Tensor>| -> Vec<u64> {
        ts.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
    };
    let noise_before = bits(trainer.model.noise_params());
    trainer.main_step(&batch, &rand).unwrap();
    let noise_after = bits(trainer.model.noise_params());
    let moved = noise_before
        .iter()
        .zip(&noise_after)
        .filter(|(a, b)| a != b)
        .count();
    out.push(CheckOutcome::of(
        "main_step_freezes_noise_scales",
        moved as f64,
        0.0,
        "changed noise-scale bits",
    ));

    let theta_before = bits(trainer.model.theta());
    trainer.adversarial_step(&batch, &rand).unwrap();
    let theta_after = bits(trainer.model.theta());
    let moved = theta_before
        .iter()
        .zip(&theta_after)
        .filter(|(a, b)| a != b)
        .count();
    out.push(CheckOutcome::of(
        "adversarial_step_freezes_theta",
        moved as f64,
        0.0,
        "changed theta bits",
    ));

    let mut prev = trainer.eval_adv(&batch, &rand).unwrap();
    let mut worst_rise = 0.0_f64;
    for _ in 0..10 {
        trainer.adversarial_step(&batch, &rand).unwrap();
        let now = trainer.eval_adv(&batch, &rand).unwrap();
        worst_rise = worst_rise.max(now - prev);
        prev = now;
    }
    out.push(CheckOutcome::of(
        "adversarial_descent_frozen_z",
        worst_rise,
        1e-8,
        "10 frozen-z steps, worst per-step rise",
    ));
    out
}

// ---- metric oracles ----

/// Independent confusion-count implementation used only here.
fn oracle_macro_f(preds: &[u8], labels: &[u8]) -> f64 {
    let mut counts = [[0u64; 2]; 2];
    for (&p, &l) in preds.iter().zip(labels) {
        counts[p as usize][l as usize] += 1;
    }
    let f = |tp: u64, fp: u64, fn_: u64| {
        if 2 * tp + fp + fn_ == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        }
    };
    0.5 * (f(counts[1][1], counts[1][0], counts[0][1]) + f(counts[0][0], counts[0][1], counts[1][0]))
}

fn oracle_qwk(preds: &[usize], labels: &[usize], l: usize) -> f64 {
    let n = preds.len() as f64;
    let mut o = vec![0.0; l * l];
    for (&p, &y) in preds.iter().zip(labels) {
        o[p * l + y] += 1.0;
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..l {
        for j in 0..l {
            let w = ((i as f64 - j as f64) * (i as f64 - j as f64))
                / (((l - 1) as f64) * ((l - 1) as f64));
            num += w * o[i * l + j];
            let row: f64 = (0..l).map(|jj| o[i * l + jj]).sum();
            let col: f64 = (0..l).map(|ii| o[ii * l + j]).sum();
            den += w * row * col / n;
        }
    }
    if den == 0.0 {
        0.0
    } else {
        1.0 - num / den
    }
}

pub fn check_metric_oracles() -> Vec<CheckOutcome> {
    let mut r = rng(1080);
    let mut worst_f = 0.0_f64;
    let mut worst_q = 0.0_f64;
    for _ in 0..1000 {
        let n = r.gen_range(5..100);
        let preds: Vec<u8> = (0..n).map(|_| r.gen_range(0..2) as u8).collect();
        let labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..2) as u8).collect();
        worst_f = worst_f.max((macro_f(&preds, &labels) - oracle_macro_f(&preds, &labels)).abs());

        let levels = r.gen_range(2..=5);
        let p: Vec<usize> = (0..n).map(|_| r.gen_range(0..levels)).collect();
        let y: Vec<usize> = (0..n).map(|_| r.gen_range(0..levels)).collect();
        worst_q = worst_q.max((qwk(&p, &y, levels) - oracle_qwk(&p, &y, levels)).abs());
    }
    let glaucoma = aggregate(&[
        TaskScore { task: 0, dataset: 0, value: 75.7 },
        TaskScore { task: 0, dataset: 1, value: 89.5 },
    ]);
    vec![
        CheckOutcome::of("macro_f_oracle_1000", worst_f, 1e-12, ""),
        CheckOutcome::of("qwk_oracle_1000", worst_q, 1e-12, ""),
        CheckOutcome::of(
            "aggregation_example",
            (glaucoma - 82.6).abs(),
            1e-12,
            "75.7 and 89.5 average to 82.6",
        ),
    ]
}

/// Keeps the free-function graph builder exercised from the library side.
pub fn check_graph_builder_consistency() -> CheckOutcome {
    let (trainer, batch, rand) = small_trainer(0.95);
    let mut tape = Tape::new();
    let ids = trainer.model.register(&mut tape, ParamMode::TrainTheta);
    let out = three_branch_graph(
        &mut tape,
        &ids,
        &trainer.config,
        &trainer.kernel,
        &trainer.model.embeddings,
        &batch,
        &rand,
    )
    .unwrap();
    let direct = tape.item(out.losses.total);
    let via_method = trainer.eval_total(&batch, &rand).unwrap();
    CheckOutcome::of(
        "graph_builder_consistency",
        (direct - via_method).abs(),
        0.0,
        "free function vs trainer method",
    )
}

/// The whole suite, in report order.
pub fn run_suite() -> Vec<CheckOutcome> {
    let mut checks = vec![check_fft_roundtrip(), check_parseval()];
    checks.push(check_grad_decouple());
    checks.extend(check_grad_losses());
    checks.push(check_grad_lf_dropout());
    checks.push(check_grad_lf_uncert());
    checks.push(check_grad_total_loss());
    checks.extend(check_augmentation_identities());
    checks.push(check_pseudo_label_table());
    checks.push(check_partial_bce_oracle());
    checks.push(check_masking_invariants());
    checks.extend(check_alternating_contracts());
    checks.extend(check_metric_oracles());
    checks.push(check_graph_builder_consistency());
    checks
}
