//! Invertible transforms with log-determinants.
//!
//! Each step maps data to latent (`forward`, returning the log-determinant of
//! its Jacobian as a scalar node) and has an exact algebraic `inverse`.
//! Conditioning features are parameters of the bijection; they are read but
//! never transformed.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::math;
use crate::params::{he_normal, Bound, ParamId, ParamSet};
use crate::tensor::Tensor;

/// Bound on the coupling log-scale, `s = S_MAX * tanh(s_raw / S_MAX)`.
pub const S_MAX: f64 = 2.0;

/// Slope of the leaky relu in coupling and conditioning networks.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    ActNorm,
    Coupling,
    Permute,
    Squeeze,
}

/// Weight and bias of one 3x3 (or kxk) convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvLayer {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        input: usize,
        output: usize,
        k: usize,
        zero: bool,
        rng: &mut R,
    ) -> Self {
        let shape = [output, input, k, k];
        let w = if zero {
            Tensor::zeros(shape)
        } else {
            he_normal(&shape, input * k * k, rng)
        };
        let weight = params.add(format!("{name}.weight"), w, true);
        let bias = params.add(format!("{name}.bias"), Tensor::zeros([output]), true);
        Self { weight, bias }
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d_same(x, p.var(self.weight), p.var(self.bias))
    }

    pub fn apply_strided(&self, g: &mut Graph, p: &Bound, x: Var, stride: usize) -> Result<Var> {
        g.conv2d(x, p.var(self.weight), p.var(self.bias), 1, stride)
    }
}

fn spatial(g: &Graph, v: Var) -> Result<(usize, usize, usize)> {
    g.value(v).dims3()
}

// ---- actnorm ----------------------------------------------------------------

/// Per-channel affine map `z = scale * (y + bias)`.
///
/// The scale is stored as a trainable log-magnitude plus a fixed sign so it can
/// never reach zero during training.
#[derive(Clone, Debug)]
pub struct ActNorm {
    channels: usize,
    log_scale: ParamId,
    bias: ParamId,
    sign: ParamId,
    initialized: bool,
}

impl ActNorm {
    pub fn identity(params: &mut ParamSet, name: &str, channels: usize) -> Self {
        let mut a = Self::pending(params, name, channels);
        a.initialized = true;
        a
    }

    /// Awaiting data-dependent initialization; `inverse` fails until then.
    pub fn pending(params: &mut ParamSet, name: &str, channels: usize) -> Self {
        let log_scale = params.add(format!("{name}.log_scale"), Tensor::zeros([channels]), true);
        let bias = params.add(format!("{name}.bias"), Tensor::zeros([channels]), true);
        let sign = params.add(format!("{name}.sign"), Tensor::full([channels], 1.0), false);
        Self {
            channels,
            log_scale,
            bias,
            sign,
            initialized: false,
        }
    }

    pub fn with_values(params: &mut ParamSet, name: &str, scale: &[f64], bias: &[f64]) -> Result<Self> {
        let mut a = Self::identity(params, name, scale.len());
        a.set(params, scale, bias)?;
        Ok(a)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn scale(&self, params: &ParamSet) -> Vec<f64> {
        params[self.log_scale]
            .data()
            .iter()
            .zip(params[self.sign].data())
            .map(|(l, s)| s * math::exp(*l))
            .collect()
    }

    pub fn bias(&self, params: &ParamSet) -> Vec<f64> {
        params[self.bias].data().to_vec()
    }

    pub fn set(&mut self, params: &mut ParamSet, scale: &[f64], bias: &[f64]) -> Result<()> {
        if scale.len() != self.channels || bias.len() != self.channels {
            return Err(Error::ShapeMismatch {
                op: "actnorm",
                left: vec![self.channels],
                right: vec![scale.len(), bias.len()],
            });
        }
        if let Some(c) = scale.iter().position(|&s| s == 0.0 || !s.is_finite()) {
            return Err(Error::ZeroScale { channel: c });
        }
        for (c, &s) in scale.iter().enumerate() {
            params.get_mut(self.log_scale).data_mut()[c] = math::ln(math::abs(s));
            params.get_mut(self.sign).data_mut()[c] = if s < 0.0 { -1.0 } else { 1.0 };
        }
        params.get_mut(self.bias).data_mut().copy_from_slice(bias);
        self.initialized = true;
        Ok(())
    }

    /// Sets bias and scale so that `batch` maps to zero mean and unit variance per channel.
    pub fn initialize_from(&mut self, params: &mut ParamSet, batch: &[Tensor]) -> Result<()> {
        let c = self.channels;
        let mut sum = vec![0.0; c];
        let mut count = 0usize;
        for t in batch {
            let (tc, h, w) = t.dims3()?;
            if tc != c {
                return Err(Error::ChannelMismatch { input: tc, kernel: c });
            }
            for (ch, plane) in t.data().chunks(h * w).enumerate() {
                sum[ch] += plane.iter().sum::<f64>();
            }
            count += h * w;
        }
        if count == 0 {
            return Ok(());
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut var = vec![0.0; c];
        for t in batch {
            let (_, h, w) = t.dims3()?;
            for (ch, plane) in t.data().chunks(h * w).enumerate() {
                var[ch] += plane.iter().map(|v| (v - mean[ch]) * (v - mean[ch])).sum::<f64>();
            }
        }
        let scale: Vec<f64> = var
            .iter()
            .map(|v| {
                let v = v / count as f64;
                if v > 0.0 {
                    1.0 / math::sqrt(v)
                } else {
                    1.0
                }
            })
            .collect();
        let bias: Vec<f64> = mean.iter().map(|m| -m).collect();
        self.set(params, &scale, &bias)
    }

    fn broadcast(&self, g: &mut Graph, p: &Bound, h: usize, w: usize) -> Result<(Var, Var, Var)> {
        let ls = g.broadcast_channels(p.var(self.log_scale), h, w)?;
        let sign = g.broadcast_channels(p.var(self.sign), h, w)?;
        let bias = g.broadcast_channels(p.var(self.bias), h, w)?;
        Ok((ls, sign, bias))
    }

    fn check(&self, g: &Graph, v: Var) -> Result<(usize, usize)> {
        let (c, h, w) = spatial(g, v)?;
        if c != self.channels {
            return Err(Error::ChannelMismatch {
                input: c,
                kernel: self.channels,
            });
        }
        Ok((h, w))
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, y: Var) -> Result<(Var, Var)> {
        if !self.initialized {
            return Err(Error::Uninitialized);
        }
        let (h, w) = self.check(g, y)?;
        let (ls, sign, bias) = self.broadcast(g, p, h, w)?;
        let shifted = g.add(y, bias)?;
        let mag = g.exp(ls)?;
        let scale = g.mul(mag, sign)?;
        let z = g.mul(shifted, scale)?;
        let total = g.sum_all(p.var(self.log_scale))?;
        let logdet = g.scale(total, (h * w) as f64)?;
        Ok((z, logdet))
    }

    pub fn inverse(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        if !self.initialized {
            return Err(Error::Uninitialized);
        }
        let (h, w) = self.check(g, z)?;
        let (ls, sign, bias) = self.broadcast(g, p, h, w)?;
        let neg = g.neg(ls)?;
        let inv_mag = g.exp(neg)?;
        let inv = g.mul(inv_mag, sign)?;
        let scaled = g.mul(z, inv)?;
        g.sub(scaled, bias)
    }
}

// ---- affine coupling --------------------------------------------------------

/// Affine coupling conditioned on `concat(y_a, u)`.
///
/// `y` splits into `y_a` (first `floor(C/2)` channels) and `y_b`; a small conv
/// net predicts `(s_raw, t)` from `y_a` and the features, and
/// `z_b = y_b * exp(s) + t` with `s = S_MAX * tanh(s_raw / S_MAX)`.
#[derive(Clone, Debug)]
pub struct AffineCoupling {
    channels: usize,
    cond_channels: usize,
    layers: [ConvLayer; 3],
}

impl AffineCoupling {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        channels: usize,
        cond_channels: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if channels < 2 {
            return Err(Error::TooFewChannels(channels));
        }
        let ca = channels / 2;
        let cb = channels - ca;
        let l0 = ConvLayer::new(params, &format!("{name}.net0"), ca + cond_channels, hidden, 3, false, rng);
        let l1 = ConvLayer::new(params, &format!("{name}.net1"), hidden, hidden, 3, false, rng);
        let l2 = ConvLayer::new(params, &format!("{name}.net2"), hidden, 2 * cb, 3, true, rng);
        Ok(Self {
            channels,
            cond_channels,
            layers: [l0, l1, l2],
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn layers(&self) -> &[ConvLayer; 3] {
        &self.layers
    }

    fn split_point(&self) -> usize {
        self.channels / 2
    }

    fn check(&self, g: &Graph, y: Var, u: Option<Var>) -> Result<()> {
        let (c, h, w) = spatial(g, y)?;
        if c < 2 {
            return Err(Error::TooFewChannels(c));
        }
        if c != self.channels {
            return Err(Error::ChannelMismatch {
                input: c,
                kernel: self.channels,
            });
        }
        match u {
            Some(u) => {
                let (uc, uh, uw) = spatial(g, u)?;
                if (uh, uw) != (h, w) {
                    return Err(Error::ExtentMismatch {
                        detail: format!("conditioning {uh}x{uw} vs coupling input {h}x{w}"),
                    });
                }
                if uc != self.cond_channels {
                    return Err(Error::ChannelMismatch {
                        input: uc,
                        kernel: self.cond_channels,
                    });
                }
            }
            None if self.cond_channels != 0 => {
                return Err(Error::ExtentMismatch {
                    detail: String::from("coupling expects conditioning features"),
                });
            }
            None => {}
        }
        Ok(())
    }

    /// Bounded log-scale and shift for the second half.
    fn scale_shift(&self, g: &mut Graph, p: &Bound, ya: Var, u: Option<Var>) -> Result<(Var, Var)> {
        let input = match u {
            Some(u) => g.concat(&[ya, u])?,
            None => ya,
        };
        let h0 = self.layers[0].apply(g, p, input)?;
        let h0 = g.leaky_relu(h0, LEAKY_SLOPE)?;
        let h1 = self.layers[1].apply(g, p, h0)?;
        let h1 = g.leaky_relu(h1, LEAKY_SLOPE)?;
        let out = self.layers[2].apply(g, p, h1)?;
        let cb = self.channels - self.split_point();
        let (s_raw, t) = g.split_channels(out, cb)?;
        let s = g.scale(s_raw, 1.0 / S_MAX)?;
        let s = g.tanh(s)?;
        let s = g.scale(s, S_MAX)?;
        Ok((s, t))
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, y: Var, u: Option<Var>) -> Result<(Var, Var)> {
        self.check(g, y, u)?;
        let (ya, yb) = g.split_channels(y, self.split_point())?;
        let (s, t) = self.scale_shift(g, p, ya, u)?;
        let es = g.exp(s)?;
        let zb = g.mul(yb, es)?;
        let zb = g.add(zb, t)?;
        let z = g.concat(&[ya, zb])?;
        let logdet = g.sum_all(s)?;
        Ok((z, logdet))
    }

    pub fn inverse(&self, g: &mut Graph, p: &Bound, z: Var, u: Option<Var>) -> Result<Var> {
        self.check(g, z, u)?;
        let (za, zb) = g.split_channels(z, self.split_point())?;
        let (s, t) = self.scale_shift(g, p, za, u)?;
        let d = g.sub(zb, t)?;
        let ns = g.neg(s)?;
        let ens = g.exp(ns)?;
        let yb = g.mul(d, ens)?;
        g.concat(&[za, yb])
    }
}

// ---- permutation and squeeze ------------------------------------------------

fn reverse_index(c: usize, plane: usize) -> Arc<[usize]> {
    (0..c)
        .flat_map(|ch| {
            let src = c - 1 - ch;
            (0..plane).map(move |i| src * plane + i)
        })
        .collect()
}

/// Reverses the channel order. Its own inverse; log-determinant zero.
pub fn reverse_channels(g: &mut Graph, y: Var) -> Result<Var> {
    let (c, h, w) = spatial(g, y)?;
    g.gather(y, reverse_index(c, h * w), &[c, h, w])
}

/// Offsets inside each 2x2 block in output-channel order: top-left, top-right,
/// bottom-left, bottom-right.
const BLOCK: [(usize, usize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];

fn squeeze_index(c: usize, h: usize, w: usize) -> Arc<[usize]> {
    let (ho, wo) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for (dy, dx) in BLOCK {
            for i in 0..ho {
                for j in 0..wo {
                    idx.push((ch * h + 2 * i + dy) * w + 2 * j + dx);
                }
            }
        }
    }
    idx.into()
}

fn unsqueeze_index(c: usize, h: usize, w: usize) -> Arc<[usize]> {
    // c, h, w are the extents of the squeezed tensor.
    let (ho, wo) = (2 * h, 2 * w);
    let oc = c / 4;
    let mut idx = Vec::with_capacity(c * h * w);
    for ch in 0..oc {
        for y in 0..ho {
            for x in 0..wo {
                let q = (y % 2) * 2 + x % 2;
                idx.push(((ch * 4 + q) * h + y / 2) * w + x / 2);
            }
        }
    }
    idx.into()
}

/// Space-to-depth over 2x2 blocks: `C x H x W` to `4C x H/2 x W/2`.
pub fn squeeze(g: &mut Graph, y: Var) -> Result<Var> {
    let (c, h, w) = spatial(g, y)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddExtent { height: h, width: w });
    }
    g.gather(y, squeeze_index(c, h, w), &[4 * c, h / 2, w / 2])
}

/// Inverse of [`squeeze`].
pub fn unsqueeze(g: &mut Graph, z: Var) -> Result<Var> {
    let (c, h, w) = spatial(g, z)?;
    if c % 4 != 0 {
        return Err(Error::ChannelMismatch { input: c, kernel: 4 });
    }
    g.gather(z, unsqueeze_index(c, h, w), &[c / 4, 2 * h, 2 * w])
}

// ---- steps and stacks -------------------------------------------------------

#[derive(Clone, Debug)]
pub enum FlowStep {
    ActNorm(ActNorm),
    Coupling(AffineCoupling),
    Permute,
    Squeeze,
}

impl FlowStep {
    pub fn kind(&self) -> StepKind {
        match self {
            Self::ActNorm(_) => StepKind::ActNorm,
            Self::Coupling(_) => StepKind::Coupling,
            Self::Permute => StepKind::Permute,
            Self::Squeeze => StepKind::Squeeze,
        }
    }

    /// Whether the step reads conditioning features.
    pub fn is_conditioned(&self) -> bool {
        matches!(self, Self::Coupling(c) if c.cond_channels > 0)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, y: Var, u: Option<Var>) -> Result<(Var, Var)> {
        match self {
            Self::ActNorm(a) => a.forward(g, p, y),
            Self::Coupling(c) => c.forward(g, p, y, u),
            Self::Permute => {
                let z = reverse_channels(g, y)?;
                Ok((z, g.scalar(0.0)))
            }
            Self::Squeeze => {
                let z = squeeze(g, y)?;
                Ok((z, g.scalar(0.0)))
            }
        }
    }

    pub fn inverse(&self, g: &mut Graph, p: &Bound, z: Var, u: Option<Var>) -> Result<Var> {
        match self {
            Self::ActNorm(a) => a.inverse(g, p, z),
            Self::Coupling(c) => c.inverse(g, p, z, u),
            Self::Permute => reverse_channels(g, z),
            Self::Squeeze => unsqueeze(g, z),
        }
    }
}

/// Composition of steps sharing one conditioning tensor.
#[derive(Clone, Debug, Default)]
pub struct FlowStack {
    pub steps: Vec<FlowStep>,
}

impl FlowStack {
    pub fn new(steps: Vec<FlowStep>) -> Self {
        Self { steps }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, y: Var, u: Option<Var>) -> Result<(Var, Var)> {
        let mut h = y;
        let mut logdet = g.scalar(0.0);
        for step in &self.steps {
            let (next, ld) = step.forward(g, p, h, u)?;
            h = next;
            logdet = g.add(logdet, ld)?;
        }
        Ok((h, logdet))
    }

    pub fn inverse(&self, g: &mut Graph, p: &Bound, z: Var, u: Option<Var>) -> Result<Var> {
        let mut h = z;
        for step in self.steps.iter().rev() {
            h = step.inverse(g, p, h, u)?;
        }
        Ok(h)
    }
}
