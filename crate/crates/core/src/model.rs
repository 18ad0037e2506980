//! The shared three-branch network: a small strided-conv encoder, the
//! text-guided decoupling head, and per-task logistic classifiers. One
//! parameter set serves all branches; branches differ only in which
//! spectral augmentation runs between encoder blocks.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{lf_uncert, NoiseScales};
use crate::decouple::{decouple_projected, DecoupleIds, DecoupleParams, DiseaseEmbeddings};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub tasks: usize,
    /// Output channels of each encoder block; the input is single-channel.
    pub channels: Vec<usize>,
    pub image_size: usize,
    pub d_att: usize,
    pub d_text: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            tasks: 4,
            channels: vec![8, 16, 32, 32],
            image_size: 64,
            d_att: 64,
            d_text: 32,
        }
    }
}

impl ModelConfig {
    pub fn blocks(&self) -> usize {
        self.channels.len()
    }

    pub fn final_channels(&self) -> usize {
        *self.channels.last().expect("at least one block")
    }

    /// Spatial side of the final feature map (stride-2 per block).
    pub fn final_side(&self) -> usize {
        let mut s = self.image_size;
        for _ in 0..self.blocks() {
            s = s.div_ceil(2);
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("model needs at least one encoder block".into()));
        }
        if self.final_side() < 4 {
            return Err(Error::Config(format!(
                "final feature map {}x{} is below 4x4; fewer blocks or larger images needed",
                self.final_side(),
                self.final_side()
            )));
        }
        if self.tasks == 0 {
            return Err(Error::Config("model needs at least one task".into()));
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rand::Rng::gen_range(rng, f64::MIN_POSITIVE..1.0);
    let u2: f64 = rand::Rng::gen::<f64>(rng);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// All learnable state plus the frozen embeddings.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub conv_w: Vec<Tensor>,
    pub conv_b: Vec<Tensor>,
    pub decouple: DecoupleParams,
    /// `[T, C_L]`; zero-initialized so an untrained model scores 0.5.
    pub cls_w: Tensor,
    pub cls_b: Tensor,
    pub noise: NoiseScales,
    pub embeddings: DiseaseEmbeddings,
}

impl ModelParams {
    pub fn init(
        config: ModelConfig,
        seed: u64,
        sigma_init: f64,
        embeddings: Option<DiseaseEmbeddings>,
    ) -> Result<Self> {
        config.validate()?;
        let embeddings = match embeddings {
            Some(e) => {
                if e.tasks() != config.tasks || e.dim() != config.d_text {
                    return Err(Error::Config(format!(
                        "embeddings [{} x {}] do not match model [{} x {}]",
                        e.tasks(),
                        e.dim(),
                        config.tasks,
                        config.d_text
                    )));
                }
                e
            }
            None => DiseaseEmbeddings::deterministic(config.tasks, config.d_text, seed ^ 0xe5b),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        let mut cin = 1;
        for &cout in &config.channels {
            let fan_in = (cin * 9) as f64;
            let scale = (2.0 / fan_in).sqrt();
            let data: Vec<f64> = (0..cout * cin * 9).map(|_| normal(&mut rng) * scale).collect();
            conv_w.push(Tensor::new(vec![cout, cin, 3, 3], data)?);
            conv_b.push(Tensor::zeros(&[cout]));
            cin = cout;
        }
        let decouple = DecoupleParams::init(config.d_att, config.final_channels(), config.d_text, seed ^ 0x7a11);
        let cls_w = Tensor::zeros(&[config.tasks, config.final_channels()]);
        let cls_b = Tensor::zeros(&[config.tasks]);
        let noise = NoiseScales::init(&config.channels, sigma_init)?;
        Ok(ModelParams {
            config,
            conv_w,
            conv_b,
            decouple,
            cls_w,
            cls_b,
            noise,
            embeddings,
        })
    }

    /// Main-parameter group (everything Algorithm-style updates with the
    /// total loss), in canonical checkpoint order.
    pub fn theta_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.conv_w.len() {
            names.push(format!("conv_w.{l}"));
        }
        for l in 0..self.conv_b.len() {
            names.push(format!("conv_b.{l}"));
        }
        names.extend(["dec.w1".into(), "dec.w2".into(), "dec.v".into()]);
        names.extend(["cls.w".into(), "cls.b".into()]);
        names
    }

    pub fn theta(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.conv_w.iter().collect();
        v.extend(self.conv_b.iter());
        v.push(&self.decouple.w1);
        v.push(&self.decouple.w2);
        v.push(&self.decouple.v);
        v.push(&self.cls_w);
        v.push(&self.cls_b);
        v
    }

    pub fn theta_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = Vec::new();
        v.extend(self.conv_w.iter_mut());
        v.extend(self.conv_b.iter_mut());
        v.push(&mut self.decouple.w1);
        v.push(&mut self.decouple.w2);
        v.push(&mut self.decouple.v);
        v.push(&mut self.cls_w);
        v.push(&mut self.cls_b);
        v
    }

    pub fn noise_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.noise.s_mu.len() {
            names.push(format!("noise.mu.{l}"));
        }
        for l in 0..self.noise.s_sigma.len() {
            names.push(format!("noise.sigma.{l}"));
        }
        names
    }

    pub fn noise_params(&self) -> Vec<&Tensor> {
        self.noise.s_mu.iter().chain(self.noise.s_sigma.iter()).collect()
    }

    pub fn noise_params_mut(&mut self) -> Vec<&mut Tensor> {
        self.noise
            .s_mu
            .iter_mut()
            .chain(self.noise.s_sigma.iter_mut())
            .collect()
    }

    /// Parameters rounded through the checkpoint's f32 payload precision.
    pub fn quantized(&self) -> ModelParams {
        let q = |t: &Tensor| {
            Tensor::new(
                t.shape().to_vec(),
                t.data().iter().map(|&v| v as f32 as f64).collect(),
            )
            .expect("shape preserved")
        };
        ModelParams {
            config: self.config.clone(),
            conv_w: self.conv_w.iter().map(&q).collect(),
            conv_b: self.conv_b.iter().map(&q).collect(),
            decouple: DecoupleParams {
                w1: q(&self.decouple.w1),
                w2: q(&self.decouple.w2),
                v: q(&self.decouple.v),
            },
            cls_w: q(&self.cls_w),
            cls_b: q(&self.cls_b),
            noise: NoiseScales {
                s_mu: self.noise.s_mu.iter().map(&q).collect(),
                s_sigma: self.noise.s_sigma.iter().map(&q).collect(),
            },
            embeddings: DiseaseEmbeddings::new(q(self.embeddings.matrix())).expect("finite"),
        }
    }
}

/// Which parameter group a tape should treat as trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMode {
    /// Encoder, decoupling and classifier trainable; noise scales constant.
    TrainTheta,
    /// Noise scales trainable; everything else constant.
    TrainNoise,
    /// Everything constant (inference).
    Frozen,
}

/// Tape handles for one registration of the model.
pub struct ModelIds {
    pub conv_w: Vec<TensorId>,
    pub conv_b: Vec<TensorId>,
    pub dec: DecoupleIds,
    pub cls_w: TensorId,
    pub cls_b: TensorId,
    /// Raw (pre-softplus) noise parameters, then their positive scales.
    pub raw_s_mu: Vec<TensorId>,
    pub raw_s_sigma: Vec<TensorId>,
    pub sigma_mu: Vec<TensorId>,
    pub sigma_sigma: Vec<TensorId>,
}

impl ModelParams {
    pub fn register(&self, tape: &mut Tape, mode: ParamMode) -> ModelIds {
        let theta_leaf = matches!(mode, ParamMode::TrainTheta);
        let noise_leaf = matches!(mode, ParamMode::TrainNoise);
        let reg = |tape: &mut Tape, t: &Tensor, leaf: bool| {
            if leaf {
                tape.leaf(t)
            } else {
                tape.constant(t)
            }
        };
        let conv_w = self.conv_w.iter().map(|t| reg(tape, t, theta_leaf)).collect();
        let conv_b = self.conv_b.iter().map(|t| reg(tape, t, theta_leaf)).collect();
        let dec = if theta_leaf {
            self.decouple.register(tape)
        } else {
            self.decouple.register_frozen(tape)
        };
        let cls_w = reg(tape, &self.cls_w, theta_leaf);
        let cls_b = reg(tape, &self.cls_b, theta_leaf);
        let raw_s_mu: Vec<TensorId> = self
            .noise
            .s_mu
            .iter()
            .map(|t| reg(tape, t, noise_leaf))
            .collect();
        let raw_s_sigma: Vec<TensorId> = self
            .noise
            .s_sigma
            .iter()
            .map(|t| reg(tape, t, noise_leaf))
            .collect();
        let sigma_mu = raw_s_mu.iter().map(|&id| tape.softplus(id)).collect();
        let sigma_sigma = raw_s_sigma.iter().map(|&id| tape.softplus(id)).collect();
        ModelIds {
            conv_w,
            conv_b,
            dec,
            cls_w,
            cls_b,
            raw_s_mu,
            raw_s_sigma,
            sigma_mu,
            sigma_sigma,
        }
    }
}

/// One encoder block: 3x3 stride-2 convolution, then SiLU.
pub fn encode_block(tape: &mut Tape, x: TensorId, w: TensorId, b: TensorId) -> TensorId {
    let y = tape.conv2d(x, w, b, 2, 1);
    tape.silu(y)
}

/// Plain encoder pass; returns every block's output.
pub fn encode(tape: &mut Tape, image: TensorId, ids: &ModelIds) -> Vec<TensorId> {
    let mut outs = Vec::with_capacity(ids.conv_w.len());
    let mut x = image;
    for (w, b) in ids.conv_w.iter().zip(&ids.conv_b) {
        x = encode_block(tape, x, *w, *b);
        outs.push(x);
    }
    outs
}

/// Per-block standard-normal draws for LF-Uncert.
#[derive(Debug, Clone, PartialEq)]
pub struct ZDraws {
    pub mu: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
}

impl ZDraws {
    pub fn zeros(channels: &[usize]) -> Self {
        ZDraws {
            mu: channels.iter().map(|&c| vec![0.0; c]).collect(),
            sigma: channels.iter().map(|&c| vec![0.0; c]).collect(),
        }
    }

    pub fn sample(channels: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |c: usize| (0..c).map(|_| normal(&mut rng)).collect::<Vec<f64>>();
        ZDraws {
            mu: channels.iter().map(|&c| draw(c)).collect(),
            sigma: channels.iter().map(|&c| draw(c)).collect(),
        }
    }
}

/// Encoder pass with LF-Uncert attached after every block.
pub fn encode_uncert(
    tape: &mut Tape,
    image: TensorId,
    ids: &ModelIds,
    r: f64,
    z: &ZDraws,
) -> Result<Vec<TensorId>> {
    let mut outs = Vec::with_capacity(ids.conv_w.len());
    let mut x = image;
    for (l, (w, b)) in ids.conv_w.iter().zip(&ids.conv_b).enumerate() {
        x = encode_block(tape, x, *w, *b);
        x = lf_uncert(
            tape,
            x,
            ids.sigma_mu[l],
            ids.sigma_sigma[l],
            r,
            &z.mu[l],
            &z.sigma[l],
        )?;
        outs.push(x);
    }
    Ok(outs)
}

/// Decouple + classify one feature map; returns task features `[T, C]`,
/// logits `[T]` and probabilities `[T]`.
pub struct HeadOut {
    pub feats: TensorId,
    pub logits: TensorId,
    pub probs: TensorId,
}

pub fn head(
    tape: &mut Tape,
    feat_map: TensorId,
    ids: &ModelIds,
    projected: &[TensorId],
) -> HeadOut {
    let (feats, _) = decouple_projected(tape, feat_map, projected, ids.dec);
    let weighted = tape.mul(feats, ids.cls_w);
    let dots = tape.sum_axis1(weighted);
    let logits = tape.add(dots, ids.cls_b);
    let probs = tape.sigmoid(logits);
    HeadOut {
        feats,
        logits,
        probs,
    }
}
