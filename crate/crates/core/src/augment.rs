//! Low-frequency feature augmentations.
//!
//! Both augmentations move a `[C,H,W]` feature map into the frequency
//! domain, alter only the amplitudes inside a centered low-frequency region,
//! and transform back. Phases and high-frequency amplitudes pass through
//! untouched. LF-Dropout zeroes region bins with a Bernoulli mask;
//! LF-Uncert renormalizes the region's per-channel statistics to a noisy
//! target (AdaIN with perturbed mean/std), the noise scale being learnable.
//!
//! The inverse transform keeps the real part. Asymmetric amplitude edits do
//! not correspond to a real signal, so an imaginary component arises and is
//! discarded, exactly as spatial-feature code working on `rfft`/`irfft`
//! pairs does.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// Floor applied to the per-channel standard deviation before it divides
/// the centered amplitudes.
pub const SIGMA_FLOOR: f64 = 1e-5;

/// Centered low-frequency index region of an `H x W` spectrum.
///
/// The side along an axis of length `d` is `max(1, round(r * d))`; the
/// region is anchored so the zero-frequency bin (floor(H/2), floor(W/2))
/// is inside it. Even sides extend one bin further toward low indices.
#[derive(Debug, Clone)]
pub struct LowFreqRegion {
    r: f64,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

impl LowFreqRegion {
    pub fn new(h: usize, w: usize, r: f64) -> Result<Self> {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::InvalidArg(format!("region fraction r={r} not in (0, 1]")));
        }
        Ok(LowFreqRegion {
            r,
            rows: Self::span(h, r),
            cols: Self::span(w, r),
        })
    }

    pub fn side(dim: usize, r: f64) -> usize {
        ((r * dim as f64).round() as usize).max(1)
    }

    fn span(dim: usize, r: f64) -> Vec<usize> {
        let side = Self::side(dim, r);
        let start = dim / 2 - side / 2;
        (start..start + side).collect()
    }

    pub fn fraction(&self) -> f64 {
        self.r
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn cols(&self) -> &[usize] {
        &self.cols
    }

    /// Number of bins in the region.
    pub fn len(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        false // side floors at 1 in both axes
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.rows.contains(&i) && self.cols.contains(&j)
    }
}

/// Bernoulli keep/drop mask over a `[C,H,W]` spectrum.
///
/// Entries outside the low-frequency region are always 1; entries inside
/// are independent draws of Bernoulli(1-p), one per (channel, i, j).
#[derive(Debug, Clone)]
pub struct DropMask {
    values: Tensor,
    seed: u64,
}

impl DropMask {
    pub fn draw(c: usize, h: usize, w: usize, region: &LowFreqRegion, p: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Tensor::full(&[c, h, w], 1.0);
        for ci in 0..c {
            for &i in region.rows() {
                for &j in region.cols() {
                    let keep = rng.gen::<f64>() >= p;
                    values.data_mut()[ci * h * w + i * w + j] = if keep { 1.0 } else { 0.0 };
                }
            }
        }
        DropMask { values, seed }
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Per-channel mean and population standard deviation of the low-frequency
/// amplitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct LfStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Channel statistics over the low-frequency region only, computed as
/// sqrt(E[a^2] - mu^2) with the variance clamped at zero.
pub fn lowfreq_stats(amplitude: &Tensor, r: f64) -> Result<LfStats> {
    let s = amplitude.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("lowfreq_stats expects [C,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let region = LowFreqRegion::new(h, w, r)?;
    let n = region.len() as f64;
    let mut mu = Vec::with_capacity(c);
    let mut sigma = Vec::with_capacity(c);
    for ci in 0..c {
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for &i in region.rows() {
            for &j in region.cols() {
                let a = amplitude.data()[ci * h * w + i * w + j];
                sum += a;
                sumsq += a * a;
            }
        }
        let m = sum / n;
        mu.push(m);
        sigma.push((sumsq / n - m * m).max(0.0).sqrt());
    }
    Ok(LfStats { mu, sigma })
}

/// Intermediate nodes of a spectral augmentation, kept for inspection: the
/// amplitude before and after editing, the (optional, inspection-only)
/// phase, and the spatial output.
///
/// Reconstruction rescales the complex spectrum to the edited amplitude,
/// which keeps the phase bit-exactly without ever materializing it; traced
/// variants additionally expose the phase node for property checks.
#[derive(Debug, Clone, Copy)]
pub struct SpectralAugTrace {
    pub amp_in: TensorId,
    pub amp_out: TensorId,
    pub phase: Option<TensorId>,
    pub output: TensorId,
}

fn dropout_core(
    tape: &mut Tape,
    x: TensorId,
    mask: &DropMask,
    want_phase: bool,
) -> SpectralAugTrace {
    let z = tape.fft2_complex(x);
    let amp_in = tape.complex_abs(z);
    let phase = want_phase.then(|| tape.complex_arg(z));
    let m = tape.constant(mask.values());
    let amp_out = tape.mul(amp_in, m);
    let z2 = tape.rescale_amp(z, amp_out);
    let output = tape.ifft2_real(z2);
    SpectralAugTrace {
        amp_in,
        amp_out,
        phase,
        output,
    }
}

/// LF-Dropout with an externally drawn (frozen) mask, exposing the
/// intermediate spectrum nodes.
pub fn lf_dropout_masked(tape: &mut Tape, x: TensorId, mask: &DropMask) -> SpectralAugTrace {
    dropout_core(tape, x, mask, true)
}

/// Zero low-frequency amplitude bins with probability `p`, keep phase and
/// everything outside the region, and return to the spatial domain.
///
/// The drawn mask is returned alongside the output so a step can be
/// replayed exactly.
pub fn lf_dropout(
    tape: &mut Tape,
    x: TensorId,
    r: f64,
    p: f64,
    seed: u64,
) -> Result<(TensorId, DropMask)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArg(format!("drop probability p={p} not in [0, 1]")));
    }
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::Shape(format!("lf_dropout expects [C,H,W], got {s:?}")));
    }
    let region = LowFreqRegion::new(s[1], s[2], r)?;
    let mask = DropMask::draw(s[0], s[1], s[2], &region, p, seed);
    let trace = dropout_core(tape, x, &mask, false);
    Ok((trace.output, mask))
}

/// LF-Uncert: renormalize low-frequency amplitudes per channel to a noisy
/// mean/std target (AdaIN), with externally supplied standard-normal draws
/// `z_mu`, `z_sigma` (one per channel) and noise scale values
/// `sigma_mu`, `sigma_sigma` ([C] nodes, typically softplus of raw
/// parameters so gradients reach them).
pub fn lf_uncert_traced(
    tape: &mut Tape,
    x: TensorId,
    sigma_mu: TensorId,
    sigma_sigma: TensorId,
    r: f64,
    z_mu: &[f64],
    z_sigma: &[f64],
) -> Result<SpectralAugTrace> {
    uncert_core(tape, x, sigma_mu, sigma_sigma, r, z_mu, z_sigma, true)
}

#[allow(clippy::too_many_arguments)]
fn uncert_core(
    tape: &mut Tape,
    x: TensorId,
    sigma_mu: TensorId,
    sigma_sigma: TensorId,
    r: f64,
    z_mu: &[f64],
    z_sigma: &[f64],
    want_phase: bool,
) -> Result<SpectralAugTrace> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::Shape(format!("lf_uncert expects [C,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if z_mu.len() != c || z_sigma.len() != c {
        return Err(Error::Shape(format!("noise draws must have length C={c}")));
    }
    for scales in [sigma_mu, sigma_sigma] {
        let v = tape.data(scales);
        if v.len() != c {
            return Err(Error::Shape(format!("noise scales must have length C={c}")));
        }
        if v.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::InvalidArg("noise scales must be finite and >= 0".into()));
        }
    }
    let region = LowFreqRegion::new(h, w, r)?;

    let z = tape.fft2_complex(x);
    let amp_in = tape.complex_abs(z);
    let phase = want_phase.then(|| tape.complex_arg(z));

    let lf = tape.gather_region(amp_in, region.rows(), region.cols());
    let mu = tape.mean_axis1(lf);
    let centered = tape.sub_col(lf, mu);
    let sq = tape.square(centered);
    let var = tape.mean_axis1(sq);
    let sigma = tape.sqrt(var);
    let sigma_eff = tape.clamp_min(sigma, SIGMA_FLOOR);
    if tape.data(sigma_eff).iter().any(|&s| !(s > 0.0)) {
        return Err(Error::NonFinite("effective sigma after flooring".into()));
    }

    // beta = mu + Sigma_mu * z_mu, gamma = sigma + Sigma_sigma * z_sigma
    let zmu = tape.constant(&Tensor::new(vec![c], z_mu.to_vec())?);
    let zsg = tape.constant(&Tensor::new(vec![c], z_sigma.to_vec())?);
    let eps_mu = tape.mul(sigma_mu, zmu);
    let eps_sg = tape.mul(sigma_sigma, zsg);
    let beta = tape.add(mu, eps_mu);
    let gamma = tape.add(sigma, eps_sg);

    let normalized = tape.div_col(centered, sigma_eff);
    let rescaled = tape.mul_col(normalized, gamma);
    let lf_aug = tape.add_col(rescaled, beta);

    let amp_out = tape.scatter_region(amp_in, lf_aug, region.rows(), region.cols());
    let z2 = tape.rescale_amp(z, amp_out);
    let output = tape.ifft2_real(z2);
    Ok(SpectralAugTrace {
        amp_in,
        amp_out,
        phase,
        output,
    })
}

pub fn lf_uncert(
    tape: &mut Tape,
    x: TensorId,
    sigma_mu: TensorId,
    sigma_sigma: TensorId,
    r: f64,
    z_mu: &[f64],
    z_sigma: &[f64],
) -> Result<TensorId> {
    Ok(uncert_core(tape, x, sigma_mu, sigma_sigma, r, z_mu, z_sigma, false)?.output)
}

/// Learnable noise scales for LF-Uncert, one `[C]` pair per encoder block.
///
/// Raw parameters are unconstrained; the exposed scales are softplus of the
/// raw values, so they stay strictly positive.
#[derive(Debug, Clone)]
pub struct NoiseScales {
    pub s_mu: Vec<Tensor>,
    pub s_sigma: Vec<Tensor>,
}

impl NoiseScales {
    /// One pair of `[C]` parameter vectors per block, initialized so that
    /// softplus(raw) equals `sigma_init`.
    pub fn init(channel_widths: &[usize], sigma_init: f64) -> Result<Self> {
        if !(sigma_init > 0.0) {
            return Err(Error::InvalidArg(format!(
                "sigma_init must be > 0 (softplus parametrization), got {sigma_init}"
            )));
        }
        let raw = (sigma_init.exp() - 1.0).ln();
        Ok(NoiseScales {
            s_mu: channel_widths.iter().map(|&c| Tensor::full(&[c], raw)).collect(),
            s_sigma: channel_widths.iter().map(|&c| Tensor::full(&[c], raw)).collect(),
        })
    }

    pub fn blocks(&self) -> usize {
        self.s_mu.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn region_geometry_matches_rounding_rule() {
        // side = max(1, round(r * dim))
        for (dim, r, want) in [
            (4usize, 0.2, 1usize),
            (8, 0.2, 2),
            (16, 0.2, 3),
            (32, 0.2, 6),
            (7, 0.5, 4),
            (5, 1.0, 5),
            (1, 0.3, 1),
        ] {
            assert_eq!(LowFreqRegion::side(dim, r), want, "dim={dim} r={r}");
        }
        let reg = LowFreqRegion::new(8, 6, 0.5).unwrap();
        assert_eq!(reg.len(), LowFreqRegion::side(8, 0.5) * LowFreqRegion::side(6, 0.5));
        assert!(reg.contains(8 / 2, 6 / 2), "center bin inside region");
    }

    #[test]
    fn region_rejects_bad_fraction() {
        assert!(LowFreqRegion::new(8, 8, 0.0).is_err());
        assert!(LowFreqRegion::new(8, 8, 1.2).is_err());
        assert!(LowFreqRegion::new(8, 8, -0.1).is_err());
    }

    #[test]
    fn drop_mask_is_binary_and_one_outside() {
        let region = LowFreqRegion::new(8, 8, 0.5).unwrap();
        let mask = DropMask::draw(2, 8, 8, &region, 0.7, 99);
        for i in 0..8 {
            for j in 0..8 {
                for c in 0..2 {
                    let v = mask.values().data()[c * 64 + i * 8 + j];
                    assert!(v == 0.0 || v == 1.0);
                    if !region.contains(i, j) {
                        assert_eq!(v, 1.0);
                    }
                }
            }
        }
        assert_eq!(mask.seed(), 99);
    }

    #[test]
    fn stats_constant_region() {
        let amp = Tensor::full(&[3, 4, 4], 2.5);
        let st = lowfreq_stats(&amp, 0.5).unwrap();
        for c in 0..3 {
            assert!((st.mu[c] - 2.5).abs() < 1e-12);
            assert!(st.sigma[c].abs() < 1e-7);
        }
    }

    #[test]
    fn stats_two_point_population_std() {
        // Region of h=4,w=2 at r=0.5 is 2x1 = two entries per channel.
        let mut amp = Tensor::zeros(&[1, 4, 2]);
        let region = LowFreqRegion::new(4, 2, 0.5).unwrap();
        let mut vals = [1.0, 3.0].into_iter();
        for &i in region.rows() {
            for &j in region.cols() {
                amp.data_mut()[i * 2 + j] = vals.next().unwrap();
            }
        }
        let st = lowfreq_stats(&amp, 0.5).unwrap();
        assert!((st.mu[0] - 2.0).abs() < 1e-12);
        assert!((st.sigma[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lf_dropout_rejects_out_of_range() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[1, 4, 4]));
        assert!(lf_dropout(&mut tape, x, 0.2, -0.1, 0).is_err());
        assert!(lf_dropout(&mut tape, x, 0.2, 1.5, 0).is_err());
        assert!(lf_dropout(&mut tape, x, 0.0, 0.5, 0).is_err());
        assert!(lf_dropout(&mut tape, x, 1.5, 0.5, 0).is_err());
    }

    #[test]
    fn noise_scales_softplus_matches_init() {
        let ns = NoiseScales::init(&[4, 8], 0.1).unwrap();
        assert_eq!(ns.blocks(), 2);
        let mut tape = Tape::new();
        let raw = tape.leaf(&ns.s_mu[0]);
        let sp = tape.softplus(raw);
        for &v in tape.data(sp) {
            assert!((v - 0.1).abs() < 1e-12);
        }
        assert!(NoiseScales::init(&[4], 0.0).is_err());
    }
}
