//! Alternating adversarial training of the three-branch network.
//!
//! Each iteration runs a main step (teacher + both students forward, one
//! AdamW update of encoder/decoupling/classifier parameters on the total
//! loss, noise scales frozen) followed by an adversarial step (fresh noise
//! draws, one AdamW update of the noise scales on the adversarial loss,
//! everything else frozen). Inference uses the teacher path only.
//!
//! All randomness is derived from (seed, epoch, step, purpose, sample), so
//! runs replay bit-identically and disabling a branch never shifts the
//! random streams of the others.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::{derive_seed, SyntheticDataset};
use crate::decouple::DiseaseEmbeddings;
use crate::error::{Error, Result};
use crate::labels::{generate_pseudo_labels, PartialLabels, PseudoLabels};
use crate::loss::{
    adversarial_loss, kl_known, mmd_loss, partial_bce_known, partial_bce_pseudo,
    s2_classification_loss, s2_total_loss, total_loss, KernelConfig, LossWeights,
};
use crate::metrics::{combine, evaluate_dataset, DatasetMetrics, MetricsReport};
use crate::model::{encode, encode_uncert, head, ModelConfig, ModelIds, ModelParams, ParamMode, ZDraws};
use crate::optim::{clip_global_norm, AdamW};
use crate::tensor::{read_tensor, write_tensor, Tape, Tensor, TensorId};

const TAG_SHUFFLE: u64 = 10;
const TAG_FLIP: u64 = 11;
const TAG_MASK: u64 = 12;
const TAG_Z: u64 = 13;
const TAG_ADV_Z: u64 = 14;

/// Training hyperparameters. Defaults follow the reference setup: tau 0.95,
/// r = p = 0.2, lambdas (0.6, 0.05, 1.0), AdamW at 1e-5 with weight decay
/// 5e-4 and a x0.1 learning-rate drop every 10 epochs, 20 epochs, batch 16.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub tau: f64,
    pub r: f64,
    pub p: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub batch_size: usize,
    pub lr_main: f64,
    pub lr_adv: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub grad_clip: f64,
    pub sigma_init: f64,
    pub enable_s1: bool,
    pub enable_s2: bool,
    pub enable_adversarial: bool,
    pub flip_augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 0.95,
            r: 0.2,
            p: 0.2,
            lambda1: 0.6,
            lambda2: 0.05,
            lambda3: 1.0,
            batch_size: 16,
            lr_main: 1e-5,
            lr_adv: 1e-3,
            weight_decay: 5e-4,
            lr_decay_factor: 0.1,
            lr_decay_every: 10,
            epochs: 20,
            grad_clip: 5.0,
            sigma_init: 0.1,
            enable_s1: true,
            enable_s2: true,
            enable_adversarial: true,
            flip_augment: true,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.5 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau={} outside (0.5, 1)", self.tau)));
        }
        if !(self.r > 0.0 && self.r <= 1.0) {
            return Err(Error::Config(format!("r={} outside (0, 1]", self.r)));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!("p={} outside [0, 1]", self.p)));
        }
        self.weights().validate().map_err(|e| Error::Config(e.to_string()))?;
        for (n, v) in [
            ("batch_size", self.batch_size as f64),
            ("epochs", self.epochs as f64),
            ("lr_decay_every", self.lr_decay_every as f64),
        ] {
            if v <= 0.0 {
                return Err(Error::Config(format!("{n} must be positive")));
            }
        }
        for (n, v) in [
            ("lr_main", self.lr_main),
            ("lr_adv", self.lr_adv),
            ("weight_decay", self.weight_decay),
            ("lr_decay_factor", self.lr_decay_factor),
            ("grad_clip", self.grad_clip),
            ("sigma_init", self.sigma_init),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{n}={v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// One training batch with its per-dataset composition.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Vec<Tensor>,
    pub labels: PartialLabels,
    pub per_dataset: Vec<usize>,
}

impl Batch {
    pub fn from_slices(datasets: &[&SyntheticDataset], picks: &[Vec<usize>]) -> Result<Batch> {
        let mut images = Vec::new();
        let mut rows: Vec<i8> = Vec::new();
        let mut per_dataset = Vec::new();
        let tasks = datasets
            .first()
            .map(|d| d.labels.tasks())
            .ok_or_else(|| Error::InvalidArg("batch from no datasets".into()))?;
        for (ds, idxs) in datasets.iter().zip(picks) {
            per_dataset.push(idxs.len());
            for &i in idxs {
                images.push(ds.image(i));
                for t in 0..tasks {
                    rows.push(ds.labels.get(i, t));
                }
            }
        }
        let b = images.len();
        Ok(Batch {
            images,
            labels: PartialLabels::new(b, tasks, rows)?,
            per_dataset,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Every source dataset contributed the same number of samples.
    pub fn composition_is_equal(&self) -> bool {
        self.per_dataset.windows(2).all(|w| w[0] == w[1])
    }
}

/// Frozen per-step randomness, replayable.
#[derive(Debug, Clone)]
pub struct StepRandomness {
    pub flips: Vec<bool>,
    pub mask_seeds: Vec<u64>,
    pub z: Vec<ZDraws>,
    pub adv_z: Vec<ZDraws>,
}

impl StepRandomness {
    pub fn derive(
        seed: u64,
        epoch: usize,
        step: usize,
        batch: usize,
        channels: &[usize],
        flip_augment: bool,
    ) -> Self {
        let mut flip_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_FLIP, epoch as u64, step as u64]));
        let flips = (0..batch)
            .map(|_| flip_augment && flip_rng.gen::<f64>() < 0.5)
            .collect();
        let mask_seeds = (0..batch)
            .map(|i| derive_seed(seed, &[TAG_MASK, epoch as u64, step as u64, i as u64]))
            .collect();
        let z = (0..batch)
            .map(|i| {
                ZDraws::sample(
                    channels,
                    derive_seed(seed, &[TAG_Z, epoch as u64, step as u64, i as u64]),
                )
            })
            .collect();
        let adv_z = (0..batch)
            .map(|i| {
                ZDraws::sample(
                    channels,
                    derive_seed(seed, &[TAG_ADV_Z, epoch as u64, step as u64, i as u64]),
                )
            })
            .collect();
        StepRandomness {
            flips,
            mask_seeds,
            z,
            adv_z,
        }
    }

    /// Deterministic no-augmentation variant (tests, identities).
    pub fn quiet(batch: usize, channels: &[usize]) -> Self {
        StepRandomness {
            flips: vec![false; batch],
            mask_seeds: (0..batch as u64).collect(),
            z: (0..batch).map(|_| ZDraws::zeros(channels)).collect(),
            adv_z: (0..batch).map(|_| ZDraws::zeros(channels)).collect(),
        }
    }
}

/// Loss nodes of one three-branch forward.
pub struct LossNodes {
    pub teacher_ce: TensorId,
    pub s1_ce: TensorId,
    pub s2_ce: TensorId,
    pub mmd: TensorId,
    pub kl: TensorId,
    pub s2_total: TensorId,
    pub total: TensorId,
}

/// Everything a step needs from the forward pass.
pub struct BranchOutputs {
    pub teacher_probs: TensorId,
    pub teacher_logits: TensorId,
    pub s1_probs: Option<TensorId>,
    pub s2_probs: Option<TensorId>,
    /// Teacher head nodes, per sample: task features and logits. These are
    /// the activations that produced the pseudo labels; pseudo-label losses
    /// must push no gradient into them.
    pub teacher_feat_nodes: Vec<TensorId>,
    /// Detached copies used as MMD targets.
    pub teacher_feats: Vec<Tensor>,
    pub s2_feats: Vec<TensorId>,
    pub pseudo: PseudoLabels,
    pub losses: LossNodes,
}

fn flip_horizontal(img: &Tensor) -> Tensor {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut data = vec![0.0; c * h * w];
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                data[ci * h * w + i * w + j] = img.data()[ci * h * w + i * w + (w - 1 - j)];
            }
        }
    }
    Tensor::new(s.to_vec(), data).expect("shape preserved")
}

/// The trainer: model, optimizers, and the alternating loop.
pub struct Trainer {
    pub model: ModelParams,
    pub config: TrainConfig,
    pub seed: u64,
    pub epoch: usize,
    pub skipped_steps: u64,
    pub kernel: KernelConfig,
    opt_theta: AdamW,
    opt_noise: AdamW,
}

/// Scalar outcomes of one step.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub skipped: bool,
}

/// Per-epoch log record.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub l_total: f64,
    pub l_adv: f64,
    pub datasets: Vec<DatasetScore>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatasetScore {
    pub name: String,
    pub m_f: f64,
    pub m_qwk: f64,
}

impl EpochLog {
    /// One line of key=value pairs.
    pub fn line(&self) -> String {
        let mut s = format!(
            "epoch={} lr={:.3e} l_total={:.6} l_adv={:.6}",
            self.epoch, self.lr, self.l_total, self.l_adv
        );
        for d in &self.datasets {
            s.push_str(&format!(
                " {}_mf={:.4} {}_mqwk={:.4}",
                d.name, d.m_f, d.name, d.m_qwk
            ));
        }
        s
    }
}

/// Result of a full fit: per-epoch log plus final metrics computed from the
/// checkpoint-precision weights (so a later eval of the saved checkpoint
/// reproduces them exactly).
pub struct FitResult {
    pub epochs: Vec<EpochLog>,
    pub final_in_domain: MetricsReport,
    pub final_ood: Option<MetricsReport>,
    pub skipped_steps: u64,
}

impl Trainer {
    pub fn new(model: ModelParams, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let theta_sizes: Vec<usize> = model.theta().iter().map(|t| t.numel()).collect();
        let noise_sizes: Vec<usize> = model.noise_params().iter().map(|t| t.numel()).collect();
        let opt_theta = AdamW::new(&theta_sizes, config.lr_main, config.weight_decay);
        // Weight decay on the noise scales would bias them toward zero and
        // cancel the adversarial objective.
        let opt_noise = AdamW::new(&noise_sizes, config.lr_adv, 0.0);
        Ok(Trainer {
            model,
            config,
            seed,
            epoch: 0,
            skipped_steps: 0,
            kernel: KernelConfig::default(),
            opt_theta,
            opt_noise,
        })
    }

    /// Forward all enabled branches and assemble every loss node.
    pub fn forward_three_branches(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        rand: &StepRandomness,
    ) -> Result<(ModelIds, BranchOutputs)> {
        let ids = self.model.register(tape, ParamMode::TrainTheta);
        let out = three_branch_graph(
            tape,
            &ids,
            &self.config,
            &self.kernel,
            &self.model.embeddings,
            batch,
            rand,
        )?;
        Ok((ids, out))
    }
}

/// Build the full three-branch forward graph over already-registered
/// parameters. Exposed so verification code can gradient-check the whole
/// assembly with parameters of its choosing.
pub fn three_branch_graph(
    tape: &mut Tape,
    ids: &ModelIds,
    cfg: &TrainConfig,
    kernel: &KernelConfig,
    embeddings: &DiseaseEmbeddings,
    batch: &Batch,
    rand: &StepRandomness,
) -> Result<BranchOutputs> {
    {
        let projected = crate::decouple::project_embeddings(tape, embeddings, ids.dec);
        let mut t_prob_rows = Vec::with_capacity(batch.len());
        let mut t_logit_rows = Vec::with_capacity(batch.len());
        let mut s1_prob_rows = Vec::new();
        let mut s2_prob_rows = Vec::new();
        let mut teacher_feat_nodes = Vec::new();
        let mut teacher_feats = Vec::new();
        let mut s2_feats = Vec::new();

        for (i, img) in batch.images.iter().enumerate() {
            let image = if rand.flips[i] { flip_horizontal(img) } else { img.clone() };
            let x = tape.constant(&image);
            let blocks = encode(tape, x, ids);
            let f_last = *blocks.last().expect("at least one block");

            let t_head = head(tape, f_last, ids, &projected);
            t_prob_rows.push(t_head.probs);
            t_logit_rows.push(t_head.logits);
            teacher_feat_nodes.push(t_head.feats);
            teacher_feats.push(tape.value(t_head.feats));

            if cfg.enable_s1 {
                let (aug, _mask) =
                    crate::augment::lf_dropout(tape, f_last, cfg.r, cfg.p, rand.mask_seeds[i])?;
                let s1_head = head(tape, aug, ids, &projected);
                s1_prob_rows.push(s1_head.probs);
            }
            if cfg.enable_s2 {
                let ublocks = encode_uncert(tape, x, ids, cfg.r, &rand.z[i])?;
                let s2_head = head(tape, *ublocks.last().expect("blocks"), ids, &projected);
                s2_prob_rows.push(s2_head.probs);
                s2_feats.push(s2_head.feats);
            }
        }

        let teacher_probs = tape.concat_rows(&t_prob_rows);
        let teacher_logits = tape.concat_rows(&t_logit_rows);
        if tape.data(teacher_probs).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("teacher probabilities".into()));
        }
        let pseudo = generate_pseudo_labels(tape.data(teacher_probs), &batch.labels, cfg.tau)?;

        let weights = cfg.weights();
        let teacher_ce = partial_bce_known(tape, teacher_probs, &batch.labels)?;

        let (s1_probs, s1_ce) = if cfg.enable_s1 {
            let p = tape.concat_rows(&s1_prob_rows);
            (Some(p), partial_bce_pseudo(tape, p, &pseudo)?)
        } else {
            (None, tape.constant_scalar(0.0))
        };

        let (s2_probs, s2_ce, mmd, kl, s2_total) = if cfg.enable_s2 {
            let p = tape.concat_rows(&s2_prob_rows);
            let ce = s2_classification_loss(tape, p, &batch.labels, &pseudo, &weights)?;
            let teacher_refs: Vec<&Tensor> = teacher_feats.iter().collect();
            let mmd = mmd_loss(tape, &s2_feats, &teacher_refs, kernel)?;
            let teacher_vals = tape.value(teacher_probs);
            let kl = kl_known(tape, &teacher_vals, p, &batch.labels.delta())?;
            let s2_total = s2_total_loss(tape, ce, mmd, kl, &weights);
            (Some(p), ce, mmd, kl, s2_total)
        } else {
            let zero = tape.constant_scalar(0.0);
            (None, zero, zero, zero, zero)
        };

        let total = total_loss(tape, teacher_ce, s1_ce, s2_total);
        Ok(BranchOutputs {
            teacher_probs,
            teacher_logits,
            s1_probs,
            s2_probs,
            teacher_feat_nodes,
            teacher_feats,
            s2_feats,
            pseudo,
            losses: LossNodes {
                teacher_ce,
                s1_ce,
                s2_ce,
                mmd,
                kl,
                s2_total,
                total,
            },
        })
    }
}

impl Trainer {

    fn theta_ids(ids: &ModelIds) -> Vec<TensorId> {
        let mut v = ids.conv_w.clone();
        v.extend(ids.conv_b.iter().copied());
        v.extend([ids.dec.w1, ids.dec.w2, ids.dec.v, ids.cls_w, ids.cls_b]);
        v
    }

    fn collect_grads(tape: &Tape, ids: &[TensorId]) -> (Vec<Vec<f64>>, bool) {
        let mut grads = Vec::with_capacity(ids.len());
        let mut finite = true;
        for &id in ids {
            let g = tape
                .grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.data(id).len()]);
            finite &= g.iter().all(|v| v.is_finite());
            grads.push(g);
        }
        (grads, finite)
    }

    /// One update of the main parameters; noise scales untouched.
    pub fn main_step(&mut self, batch: &Batch, rand: &StepRandomness) -> Result<StepStats> {
        let mut tape = Tape::new();
        let (ids, out) = self.forward_three_branches(&mut tape, batch, rand)?;
        let loss = tape.item(out.losses.total);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("total loss at epoch {}", self.epoch)));
        }
        tape.backward(out.losses.total)?;
        let (mut grads, finite) = Self::collect_grads(&tape, &Self::theta_ids(&ids));
        if !finite {
            self.skipped_steps += 1;
            return Ok(StepStats {
                loss,
                grad_norm: f64::NAN,
                skipped: true,
            });
        }
        let norm = clip_global_norm(&mut grads, self.config.grad_clip);
        let mut params = self.model.theta_mut();
        self.opt_theta.step(&mut params, &grads)?;
        Ok(StepStats {
            loss,
            grad_norm: norm,
            skipped: false,
        })
    }

    /// Forward the second student only and return its adversarial loss node.
    fn forward_adversarial(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        rand: &StepRandomness,
    ) -> Result<(ModelIds, TensorId)> {
        let ids = self.model.register(tape, ParamMode::TrainNoise);
        let projected =
            crate::decouple::project_embeddings(tape, &self.model.embeddings, ids.dec);
        let mut rows = Vec::with_capacity(batch.len());
        for (i, img) in batch.images.iter().enumerate() {
            let image = if rand.flips[i] { flip_horizontal(img) } else { img.clone() };
            let x = tape.constant(&image);
            let blocks = encode_uncert(tape, x, &ids, self.config.r, &rand.adv_z[i])?;
            let h = head(tape, *blocks.last().expect("blocks"), &ids, &projected);
            rows.push(h.probs);
        }
        let probs = tape.concat_rows(&rows);
        let l_adv = adversarial_loss(tape, &batch.labels, probs)?;
        Ok((ids, l_adv))
    }

    /// One update of the noise scales; main parameters untouched.
    pub fn adversarial_step(&mut self, batch: &Batch, rand: &StepRandomness) -> Result<StepStats> {
        let mut tape = Tape::new();
        let (ids, l_adv) = self.forward_adversarial(&mut tape, batch, rand)?;
        let loss = tape.item(l_adv);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "adversarial loss at epoch {}",
                self.epoch
            )));
        }
        tape.backward(l_adv)?;
        let mut noise_ids = ids.raw_s_mu.clone();
        noise_ids.extend(ids.raw_s_sigma.iter().copied());
        let (mut grads, finite) = Self::collect_grads(&tape, &noise_ids);
        if !finite {
            self.skipped_steps += 1;
            return Ok(StepStats {
                loss,
                grad_norm: f64::NAN,
                skipped: true,
            });
        }
        let norm = clip_global_norm(&mut grads, self.config.grad_clip);
        let mut params = self.model.noise_params_mut();
        self.opt_noise.step(&mut params, &grads)?;
        Ok(StepStats {
            loss,
            grad_norm: norm,
            skipped: false,
        })
    }

    /// Total loss under given randomness, no update.
    pub fn eval_total(&self, batch: &Batch, rand: &StepRandomness) -> Result<f64> {
        let mut tape = Tape::new();
        let (_, out) = self.forward_three_branches(&mut tape, batch, rand)?;
        Ok(tape.item(out.losses.total))
    }

    /// Adversarial loss under given randomness, no update.
    pub fn eval_adv(&self, batch: &Batch, rand: &StepRandomness) -> Result<f64> {
        let mut tape = Tape::new();
        let (_, l) = self.forward_adversarial(&mut tape, batch, rand)?;
        Ok(tape.item(l))
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        self.config.lr_main
            * self
                .config
                .lr_decay_factor
                .powi((epoch / self.config.lr_decay_every) as i32)
    }

    /// Train for the configured number of epochs.
    pub fn fit(
        &mut self,
        train: &[SyntheticDataset],
        in_tests: &[SyntheticDataset],
        ood: Option<&SyntheticDataset>,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<FitResult> {
        if train.is_empty() {
            return Err(Error::InvalidArg("fit needs at least one training dataset".into()));
        }
        if train.iter().any(|d| d.is_empty()) {
            return Err(Error::InvalidArg("empty training dataset".into()));
        }
        if self.config.batch_size % train.len() != 0 {
            return Err(Error::InvalidArg(format!(
                "batch size {} not divisible by {} datasets",
                self.config.batch_size,
                train.len()
            )));
        }
        let per_ds = self.config.batch_size / train.len();
        let steps = train.iter().map(|d| d.len() / per_ds).min().expect("nonempty");
        if steps == 0 {
            return Err(Error::InvalidArg("datasets smaller than their batch share".into()));
        }
        let channels = self.model.config.channels.clone();
        let mut epochs_log = Vec::new();

        let start = self.epoch;
        for epoch in start..self.config.epochs {
            self.epoch = epoch;
            self.opt_theta.lr = self.lr_at(epoch);
            let orders: Vec<Vec<usize>> = train
                .iter()
                .enumerate()
                .map(|(k, d)| {
                    let mut idx: Vec<usize> = (0..d.len()).collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        self.seed,
                        &[TAG_SHUFFLE, epoch as u64, k as u64],
                    ));
                    idx.shuffle(&mut rng);
                    idx
                })
                .collect();

            let mut loss_sum = 0.0;
            let mut adv_sum = 0.0;
            let mut adv_count = 0usize;
            for step in 0..steps {
                let picks: Vec<Vec<usize>> = orders
                    .iter()
                    .map(|o| o[step * per_ds..(step + 1) * per_ds].to_vec())
                    .collect();
                let refs: Vec<&SyntheticDataset> = train.iter().collect();
                let batch = Batch::from_slices(&refs, &picks)?;
                assert!(
                    batch.composition_is_equal(),
                    "unequal batch composition at epoch {epoch} step {step}"
                );
                let rand = StepRandomness::derive(
                    self.seed,
                    epoch,
                    step,
                    batch.len(),
                    &channels,
                    self.config.flip_augment,
                );
                let stats = self.main_step(&batch, &rand)?;
                loss_sum += stats.loss;
                if self.config.enable_s2 && self.config.enable_adversarial {
                    let adv = self.adversarial_step(&batch, &rand)?;
                    adv_sum += adv.loss;
                    adv_count += 1;
                }
            }

            let mut scores = Vec::new();
            for ds in in_tests {
                let m = evaluate_model(&self.model, ds)?;
                let report = combine(vec![m]);
                scores.push(DatasetScore {
                    name: ds.name.clone(),
                    m_f: report.m_f,
                    m_qwk: report.m_qwk,
                });
            }
            if let Some(ds) = ood {
                let m = evaluate_model(&self.model, ds)?;
                let report = combine(vec![m]);
                scores.push(DatasetScore {
                    name: ds.name.clone(),
                    m_f: report.m_f,
                    m_qwk: report.m_qwk,
                });
            }
            let log = EpochLog {
                epoch,
                lr: self.opt_theta.lr,
                l_total: loss_sum / steps as f64,
                l_adv: if adv_count > 0 { adv_sum / adv_count as f64 } else { 0.0 },
                datasets: scores,
            };
            on_epoch(&log);
            epochs_log.push(log);
            self.epoch = epoch + 1;
        }

        // Final metrics from checkpoint-precision weights.
        let quantized = self.model.quantized();
        let mut in_metrics = Vec::new();
        for ds in in_tests {
            in_metrics.push(evaluate_model(&quantized, ds)?);
        }
        let final_in_domain = combine(in_metrics);
        let final_ood = match ood {
            Some(ds) => Some(combine(vec![evaluate_model(&quantized, ds)?])),
            None => None,
        };
        Ok(FitResult {
            epochs: epochs_log,
            final_in_domain,
            final_ood,
            skipped_steps: self.skipped_steps,
        })
    }
}

/// Teacher-only inference: deterministic, no augmentation.
pub fn infer(model: &ModelParams, images: &Tensor) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::Shape(format!("infer expects [N,1,S,S], got {s:?}")));
    }
    if s[2] != model.config.image_size || s[3] != model.config.image_size {
        return Err(Error::Shape(format!(
            "image size {}x{} does not match model {}",
            s[2], s[3], model.config.image_size
        )));
    }
    let (n, side) = (s[0], s[2]);
    let plane = side * side;
    let t = model.config.tasks;
    let mut out = Vec::with_capacity(n * t);
    for i in 0..n {
        let img = Tensor::new(
            vec![1, side, side],
            images.data()[i * plane..(i + 1) * plane].to_vec(),
        )?;
        let mut tape = Tape::new();
        let ids = model.register(&mut tape, ParamMode::Frozen);
        let projected =
            crate::decouple::project_embeddings(&mut tape, &model.embeddings, ids.dec);
        let x = tape.constant(&img);
        let blocks = encode(&mut tape, x, &ids);
        let h = head(&mut tape, *blocks.last().expect("blocks"), &ids, &projected);
        out.extend_from_slice(tape.data(h.probs));
    }
    Tensor::new(vec![n, t], out)
}

/// Teacher-only metrics of one dataset.
pub fn evaluate_model(model: &ModelParams, ds: &SyntheticDataset) -> Result<DatasetMetrics> {
    let probs = infer(model, &ds.images)?;
    Ok(evaluate_dataset(&ds.name, &probs, &ds.labels))
}

// ---- checkpointing ----

#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub epoch: usize,
    pub seed: u64,
    pub model: ModelConfig,
}

fn manifest_string(meta: &CheckpointMeta) -> String {
    let channels: Vec<String> = meta.model.channels.iter().map(|c| c.to_string()).collect();
    format!(
        "format=1\nconfig_hash={}\nepoch={}\nseed={}\ntasks={}\nchannels={}\nd_att={}\nd_text={}\nimage_size={}\n---\n",
        meta.config_hash,
        meta.epoch,
        meta.seed,
        meta.model.tasks,
        channels.join(","),
        meta.model.d_att,
        meta.model.d_text,
        meta.model.image_size
    )
}

impl Trainer {
    /// Named tensors of the full training state.
    fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = Vec::new();
        for (name, t) in self.model.theta_names().into_iter().zip(self.model.theta()) {
            out.push((name, t.clone()));
        }
        for (name, t) in self.model.noise_names().into_iter().zip(self.model.noise_params()) {
            out.push((name, t.clone()));
        }
        out.push(("emb".into(), self.model.embeddings.matrix().clone()));
        out.extend(self.opt_theta.state_tensors("opt_theta", &self.model.theta()));
        out.extend(self.opt_noise.state_tensors("opt_noise", &self.model.noise_params()));
        out
    }

    pub fn save_checkpoint(&self, path: &Path, config_hash: &str) -> Result<()> {
        let meta = CheckpointMeta {
            config_hash: config_hash.to_string(),
            epoch: self.epoch,
            seed: self.seed,
            model: self.model.config.clone(),
        };
        let mut buf: Vec<u8> = manifest_string(&meta).into_bytes();
        let tensors = self.state_tensors();
        buf.extend((tensors.len() as u64).to_le_bytes());
        for (name, t) in &tensors {
            buf.extend((name.len() as u64).to_le_bytes());
            buf.extend(name.as_bytes());
            write_tensor(&mut buf, t)?;
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Rebuild a trainer from a checkpoint, continuing at the stored epoch.
    pub fn from_checkpoint(path: &Path, config: TrainConfig) -> Result<Trainer> {
        let (meta, tensors) = read_checkpoint(path)?;
        let model = model_from_tensors(meta.model.clone(), &tensors, config.sigma_init)?;
        let mut trainer = Trainer::new(model, config, meta.seed)?;
        trainer.epoch = meta.epoch;
        trainer.opt_theta.restore_state("opt_theta", &tensors)?;
        trainer.opt_noise.restore_state("opt_noise", &tensors)?;
        Ok(trainer)
    }
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointMeta, BTreeMap<String, Tensor>)> {
    let bytes = std::fs::read(path)?;
    let sep = b"---\n";
    let pos = bytes
        .windows(sep.len())
        .position(|w| w == sep)
        .ok_or_else(|| Error::Checkpoint("missing manifest separator".into()))?;
    let manifest = std::str::from_utf8(&bytes[..pos])
        .map_err(|_| Error::Checkpoint("manifest is not utf-8".into()))?;
    let mut kv = BTreeMap::new();
    for line in manifest.lines() {
        if let Some((k, v)) = line.split_once('=') {
            kv.insert(k.to_string(), v.to_string());
        }
    }
    let get = |k: &str| {
        kv.get(k)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("manifest missing {k}")))
    };
    let channels: Vec<usize> = get("channels")?
        .split(',')
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Checkpoint("bad channels list".into()))?;
    let meta = CheckpointMeta {
        config_hash: get("config_hash")?,
        epoch: get("epoch")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad epoch".into()))?,
        seed: get("seed")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad seed".into()))?,
        model: ModelConfig {
            tasks: get("tasks")?.parse().map_err(|_| Error::Checkpoint("bad tasks".into()))?,
            channels,
            image_size: get("image_size")?
                .parse()
                .map_err(|_| Error::Checkpoint("bad image_size".into()))?,
            d_att: get("d_att")?.parse().map_err(|_| Error::Checkpoint("bad d_att".into()))?,
            d_text: get("d_text")?
                .parse()
                .map_err(|_| Error::Checkpoint("bad d_text".into()))?,
        },
    };

    let mut cur = &bytes[pos + sep.len()..];
    let mut b8 = [0u8; 8];
    cur.read_exact(&mut b8)?;
    let count = u64::from_le_bytes(b8) as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        cur.read_exact(&mut b8)?;
        let name_len = u64::from_le_bytes(b8) as usize;
        let mut name = vec![0u8; name_len];
        cur.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|_| Error::Checkpoint("bad tensor name".into()))?;
        let t = read_tensor(&mut cur)?;
        tensors.insert(name, t);
    }
    Ok((meta, tensors))
}

/// Materialize model parameters from checkpoint tensors.
pub fn model_from_tensors(
    config: ModelConfig,
    tensors: &BTreeMap<String, Tensor>,
    sigma_init: f64,
) -> Result<ModelParams> {
    let mut model = ModelParams::init(config, 0, sigma_init.max(1e-6), None)?;
    let expect = |name: &str| {
        tensors
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint missing tensor {name}")))
    };
    let names = model.theta_names();
    for (name, param) in names.iter().zip(model.theta_mut()) {
        let t = expect(name)?;
        if t.shape() != param.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: shape {:?} vs model {:?}",
                t.shape(),
                param.shape()
            )));
        }
        *param = t;
    }
    let names = model.noise_names();
    for (name, param) in names.iter().zip(model.noise_params_mut()) {
        let t = expect(name)?;
        if t.shape() != param.shape() {
            return Err(Error::Checkpoint(format!("tensor {name}: shape mismatch")));
        }
        *param = t;
    }
    let emb = expect("emb")?;
    model.embeddings = DiseaseEmbeddings::new(emb)?;
    Ok(model)
}

/// Load only what inference needs.
pub fn model_from_checkpoint(path: &Path) -> Result<(CheckpointMeta, ModelParams)> {
    let (meta, tensors) = read_checkpoint(path)?;
    let model = model_from_tensors(meta.model.clone(), &tensors, 0.1)?;
    Ok((meta, model))
}

/// Write a training log as lines of key=value pairs.
pub fn write_log(path: &Path, epochs: &[EpochLog]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for e in epochs {
        writeln!(f, "{}", e.line())?;
    }
    Ok(())
}
