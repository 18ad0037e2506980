//! Centered 2-d frequency transforms, forward and inverse, with gradients.
//!
//! Convention: unnormalized forward transform, 1/(H*W) on the inverse. The
//! zero-frequency bin of a centered spectrum sits at (floor(H/2), floor(W/2));
//! for even sizes the Nyquist row/column therefore lands asymmetrically on
//! the low-index side.
//!
//! Complex tape nodes store interleaved (re, im) pairs in a trailing axis of
//! size 2, i.e. shape [C, H, W, 2].

use std::cell::RefCell;

use rustfft::num_complex::Complex;
use rustfft::{FftDirection, FftPlanner};

use super::tape::Op;
use super::{Tape, Tensor, TensorId};
use crate::error::{Error, Result};

/// Largest |imaginary| allowed when a validated inverse discards the
/// imaginary part, relative to the real output's max magnitude.
const RESIDUE_REL_LIMIT: f64 = 1e-4;
const RESIDUE_ABS_FLOOR: f64 = 1e-12;

/// Amplitude/phase pair of a centered per-channel 2-d spectrum.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub amplitude: Tensor,
    pub phase: Tensor,
    pub shifted: bool,
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// In-place 2-d FFT of a row-major complex buffer (rows, then columns).
fn fft2_inplace(buf: &mut [Complex<f64>], h: usize, w: usize, dir: FftDirection) {
    PLANNER.with(|p| {
        let mut planner = p.borrow_mut();
        let row_fft = planner.plan_fft(w, dir);
        let col_fft = planner.plan_fft(h, dir);
        drop(planner);

        for row in buf.chunks_exact_mut(w) {
            row_fft.process(row);
        }
        let mut col = vec![Complex::default(); h];
        for j in 0..w {
            for i in 0..h {
                col[i] = buf[i * w + j];
            }
            col_fft.process(&mut col);
            for i in 0..h {
                buf[i * w + j] = col[i];
            }
        }
    });
}

/// Write a raw-order complex plane into interleaved storage with the
/// zero-frequency bin moved from index 0 to (floor(H/2), floor(W/2)).
fn store_shifted(raw: &[Complex<f64>], h: usize, w: usize, out: &mut [f64]) {
    let (ch, cw) = (h / 2, w / 2);
    for i in 0..h {
        let si = (i + ch) % h;
        for j in 0..w {
            let sj = (j + cw) % w;
            let z = raw[i * w + j];
            out[(si * w + sj) * 2] = z.re;
            out[(si * w + sj) * 2 + 1] = z.im;
        }
    }
}

/// Read an interleaved center-shifted plane back into raw frequency order.
fn load_unshifted(plane: &[f64], h: usize, w: usize) -> Vec<Complex<f64>> {
    let (ch, cw) = (h / 2, w / 2);
    let mut out = vec![Complex::default(); h * w];
    for i in 0..h {
        let si = (i + ch) % h;
        for j in 0..w {
            let sj = (j + cw) % w;
            out[i * w + j] = Complex::new(plane[(si * w + sj) * 2], plane[(si * w + sj) * 2 + 1]);
        }
    }
    out
}

fn chw(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "expected [C,H,W], got {shape:?}");
    (shape[0], shape[1], shape[2])
}

impl Tape {
    /// Per-channel centered 2-d FFT of a real `[C,H,W]` tensor into an
    /// interleaved complex `[C,H,W,2]` node.
    pub fn fft2_complex(&mut self, x: TensorId) -> TensorId {
        let shape = self.shape(x).to_vec();
        let (c, h, w) = chw(&shape);
        let src = self.node_data(x);
        let mut data = vec![0.0; c * h * w * 2];
        for ci in 0..c {
            let mut buf: Vec<Complex<f64>> = src[ci * h * w..(ci + 1) * h * w]
                .iter()
                .map(|&v| Complex::new(v, 0.0))
                .collect();
            fft2_inplace(&mut buf, h, w, FftDirection::Forward);
            store_shifted(&buf, h, w, &mut data[ci * h * w * 2..(ci + 1) * h * w * 2]);
        }
        let rg = self.node_requires_grad(x);
        self.push_node(data, vec![c, h, w, 2], rg, Op::Fft2Centered(x))
    }

    /// Elementwise magnitude of a complex `[C,H,W,2]` node.
    pub fn complex_abs(&mut self, z: TensorId) -> TensorId {
        let shape = self.shape(z).to_vec();
        assert_eq!(shape.last(), Some(&2), "complex_abs expects trailing axis 2");
        let src = self.node_data(z);
        let data: Vec<f64> = src
            .chunks_exact(2)
            .map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt())
            .collect();
        let rg = self.node_requires_grad(z);
        self.push_node(data, shape[..shape.len() - 1].to_vec(), rg, Op::ComplexAbs(z))
    }

    /// Elementwise argument (radians) of a complex `[C,H,W,2]` node.
    pub fn complex_arg(&mut self, z: TensorId) -> TensorId {
        let shape = self.shape(z).to_vec();
        assert_eq!(shape.last(), Some(&2), "complex_arg expects trailing axis 2");
        let src = self.node_data(z);
        let data: Vec<f64> = src.chunks_exact(2).map(|p| p[1].atan2(p[0])).collect();
        let rg = self.node_requires_grad(z);
        self.push_node(data, shape[..shape.len() - 1].to_vec(), rg, Op::ComplexArg(z))
    }

    /// Rebuild interleaved complex values from amplitude and phase nodes.
    pub fn polar_to_complex(&mut self, amp: TensorId, phase: TensorId) -> TensorId {
        assert_eq!(self.shape(amp), self.shape(phase), "polar shape mismatch");
        let shape = self.shape(amp).to_vec();
        let a = self.node_data(amp);
        let p = self.node_data(phase);
        let mut data = Vec::with_capacity(a.len() * 2);
        for k in 0..a.len() {
            data.push(a[k] * p[k].cos());
            data.push(a[k] * p[k].sin());
        }
        let mut out_shape = shape;
        out_shape.push(2);
        let rg = self.node_requires_grad(amp) || self.node_requires_grad(phase);
        self.push_node(data, out_shape, rg, Op::PolarToComplex { amp, phase })
    }

    /// Replace the amplitude of a complex `[C,H,W,2]` node, keeping its
    /// phase: z * (amp / |z|), with (amp, 0) at zero bins. Identical in
    /// value and gradient to rebuilding from (amp, arg(z)) but free of
    /// trigonometric calls.
    pub fn rescale_amp(&mut self, z: TensorId, amp: TensorId) -> TensorId {
        let zshape = self.shape(z).to_vec();
        assert_eq!(zshape.last(), Some(&2), "rescale_amp expects complex node");
        assert_eq!(
            &zshape[..zshape.len() - 1],
            self.shape(amp),
            "rescale_amp shape mismatch"
        );
        let zv = self.node_data(z);
        let uv = self.node_data(amp);
        let mut data = Vec::with_capacity(zv.len());
        for (k, &u) in uv.iter().enumerate() {
            let (x, y) = (zv[2 * k], zv[2 * k + 1]);
            let a2 = x * x + y * y;
            if a2 > 0.0 {
                let s = u / a2.sqrt();
                data.push(x * s);
                data.push(y * s);
            } else {
                data.push(u);
                data.push(0.0);
            }
        }
        let rg = self.node_requires_grad(z) || self.node_requires_grad(amp);
        self.push_node(data, zshape, rg, Op::RescaleAmp { z, amp })
    }

    /// Inverse centered 2-d FFT of a complex `[C,H,W,2]` node, keeping the
    /// real part. The imaginary part is discarded without inspection; use
    /// [`Tape::ifft2_real_checked`] when the spectrum is expected to be that
    /// of a real signal.
    pub fn ifft2_real(&mut self, z: TensorId) -> TensorId {
        self.ifft2_real_impl(z).0
    }

    /// Like [`Tape::ifft2_real`], but rejects spectra whose inverse carries
    /// an imaginary residue above `1e-4` of the output magnitude.
    pub fn ifft2_real_checked(&mut self, z: TensorId) -> Result<TensorId> {
        let (id, residue, max_re) = self.ifft2_real_impl(z);
        let limit = RESIDUE_REL_LIMIT * max_re + RESIDUE_ABS_FLOOR;
        if residue > limit {
            return Err(Error::CorruptSpectrum { residue, limit });
        }
        Ok(id)
    }

    fn ifft2_real_impl(&mut self, z: TensorId) -> (TensorId, f64, f64) {
        let shape = self.shape(z).to_vec();
        assert_eq!(shape.len(), 4, "ifft2 expects [C,H,W,2], got {shape:?}");
        assert_eq!(shape[3], 2, "ifft2 expects trailing axis 2");
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let src = self.node_data(z);
        let norm = 1.0 / (h * w) as f64;
        let mut data = Vec::with_capacity(c * h * w);
        let mut residue: f64 = 0.0;
        let mut max_re: f64 = 0.0;
        for ci in 0..c {
            let plane = &src[ci * h * w * 2..(ci + 1) * h * w * 2];
            let mut buf = load_unshifted(plane, h, w);
            fft2_inplace(&mut buf, h, w, FftDirection::Inverse);
            for zv in &buf {
                let re = zv.re * norm;
                residue = residue.max((zv.im * norm).abs());
                max_re = max_re.max(re.abs());
                data.push(re);
            }
        }
        let rg = self.node_requires_grad(z);
        let id = self.push_node(data, vec![c, h, w], rg, Op::Ifft2CenteredReal(z));
        (id, residue, max_re)
    }
}

/// Gradient of `fft2_complex` with respect to its real input: the real part
/// of the unnormalized inverse transform of the (unshifted) output gradient.
pub(crate) fn backward_fft2_centered(grad: &[f64], in_shape: &[usize]) -> Vec<f64> {
    let (c, h, w) = chw(in_shape);
    let mut out = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        let plane = &grad[ci * h * w * 2..(ci + 1) * h * w * 2];
        let mut buf = load_unshifted(plane, h, w);
        fft2_inplace(&mut buf, h, w, FftDirection::Inverse);
        out.extend(buf.iter().map(|z| z.re));
    }
    out
}

/// Gradient of `ifft2_real` with respect to its complex input: the forward
/// transform of the output gradient, scaled by 1/(H*W) and re-shifted.
pub(crate) fn backward_ifft2_centered_real(grad: &[f64], out_shape: &[usize]) -> Vec<f64> {
    let (c, h, w) = chw(out_shape);
    let norm = 1.0 / (h * w) as f64;
    let mut out = vec![0.0; c * h * w * 2];
    for ci in 0..c {
        let mut buf: Vec<Complex<f64>> = grad[ci * h * w..(ci + 1) * h * w]
            .iter()
            .map(|&g| Complex::new(g * norm, 0.0))
            .collect();
        fft2_inplace(&mut buf, h, w, FftDirection::Forward);
        store_shifted(&buf, h, w, &mut out[ci * h * w * 2..(ci + 1) * h * w * 2]);
    }
    out
}

/// Centered amplitude/phase spectrum of a real `[C,H,W]` tensor.
pub fn fft2_centered(x: &Tensor) -> Result<Spectrum> {
    x.ensure_finite("fft2_centered input")?;
    let (_, h, w) = chw(x.shape());
    if h < 1 || w < 1 {
        return Err(Error::Shape("fft2_centered needs H >= 1, W >= 1".into()));
    }
    let mut tape = Tape::new();
    let xid = tape.constant(x);
    let z = tape.fft2_complex(xid);
    let amp = tape.complex_abs(z);
    let pha = tape.complex_arg(z);
    Ok(Spectrum {
        amplitude: tape.value(amp),
        phase: tape.value(pha),
        shifted: true,
    })
}

/// Real spatial tensor of a centered spectrum. Rejects spectra that are not
/// (numerically) those of a real signal.
pub fn ifft2_centered(s: &Spectrum) -> Result<Tensor> {
    if !s.shifted {
        return Err(Error::InvalidArg("spectrum must be center-shifted".into()));
    }
    if s.amplitude.shape() != s.phase.shape() {
        return Err(Error::Shape("amplitude/phase shape mismatch".into()));
    }
    let mut tape = Tape::new();
    let amp = tape.constant(&s.amplitude);
    let pha = tape.constant(&s.phase);
    let z = tape.polar_to_complex(amp, pha);
    let out = tape.ifft2_real_checked(z)?;
    Ok(tape.value(out))
}

/// Distance of a raw-order frequency index from DC, as a fraction of the axis.
fn freq_fraction(k: usize, n: usize) -> f64 {
    let d = k.min(n - k);
    d as f64 / n as f64
}

/// Zero every frequency bin of a `[C,H,W]` tensor whose distance from DC
/// exceeds `cutoff` (fraction of the axis length) on either axis. The kept
/// set is conjugate-symmetric, so the result is exactly real.
pub fn low_pass(x: &Tensor, cutoff: f64) -> Tensor {
    let (c, h, w) = chw(x.shape());
    let mut out = Vec::with_capacity(c * h * w);
    let norm = 1.0 / (h * w) as f64;
    for ci in 0..c {
        let mut buf: Vec<Complex<f64>> = x.data()[ci * h * w..(ci + 1) * h * w]
            .iter()
            .map(|&v| Complex::new(v, 0.0))
            .collect();
        fft2_inplace(&mut buf, h, w, FftDirection::Forward);
        for i in 0..h {
            for j in 0..w {
                if freq_fraction(i, h) > cutoff || freq_fraction(j, w) > cutoff {
                    buf[i * w + j] = Complex::default();
                }
            }
        }
        fft2_inplace(&mut buf, h, w, FftDirection::Inverse);
        out.extend(buf.iter().map(|z| z.re * norm));
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
}

/// Spectral energy of a `[C,H,W]` tensor split at `cutoff`: `(low, high)`,
/// with `low + high` equal to the total signal energy (Parseval).
pub fn band_energy(x: &Tensor, cutoff: f64) -> (f64, f64) {
    let (c, h, w) = chw(x.shape());
    let norm = 1.0 / (h * w) as f64;
    let (mut low, mut high) = (0.0, 0.0);
    for ci in 0..c {
        let mut buf: Vec<Complex<f64>> = x.data()[ci * h * w..(ci + 1) * h * w]
            .iter()
            .map(|&v| Complex::new(v, 0.0))
            .collect();
        fft2_inplace(&mut buf, h, w, FftDirection::Forward);
        for i in 0..h {
            for j in 0..w {
                let e = buf[i * w + j].norm_sqr() * norm;
                if freq_fraction(i, h) > cutoff || freq_fraction(j, w) > cutoff {
                    high += e;
                } else {
                    low += e;
                }
            }
        }
    }
    (low, high)
}
