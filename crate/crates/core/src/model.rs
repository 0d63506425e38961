//! Multi-scale conditional flow over high-resolution fields.
//!
//! A conditioning encoder turns the low-resolution input into one feature map
//! per flow scale. Each scale squeezes, runs `steps_per_scale` rounds of
//! (actnorm, conditional coupling, channel reversal), then factors half the
//! channels out as a latent; the last scale keeps everything. Every latent is
//! scored by a diagonal Gaussian whose mean and log-std come from a conv head
//! over that scale's features.
//!
//! Each feature map also carries the LR field itself, resampled to the scale's
//! resolution, so couplings and priors see the coarse values directly. The
//! concatenated features pass through a per-channel affine normalizer that is
//! data-initialized together with the flow's actnorms.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::field::GridField;
use crate::flow::{squeeze, unsqueeze, ActNorm, AffineCoupling, ConvLayer, FlowStack, FlowStep, LEAKY_SLOPE};
use crate::graph::{Graph, Var};
use crate::math;
use crate::params::{Bound, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Upsampling factor, 2 or 4.
    pub upsampling: usize,
    pub num_scales: usize,
    pub steps_per_scale: usize,
    pub hidden_channels: usize,
    pub cond_channels: usize,
    /// Physical channels of the field.
    pub channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            upsampling: 2,
            num_scales: 3,
            steps_per_scale: 2,
            hidden_channels: 64,
            cond_channels: 64,
            channels: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.upsampling, 2 | 4) {
            return Err(Error::InvalidConfig(format!(
                "upsampling factor must be 2 or 4, got {}",
                self.upsampling
            )));
        }
        if self.num_scales == 0 || self.steps_per_scale == 0 {
            return Err(Error::InvalidConfig("need at least one scale and one step".into()));
        }
        if self.hidden_channels == 0 || self.cond_channels == 0 || self.channels == 0 {
            return Err(Error::InvalidConfig("channel counts must be positive".into()));
        }
        Ok(())
    }

    fn log2_upsampling(&self) -> usize {
        self.upsampling.trailing_zeros() as usize
    }

    /// Checks HR extents against the scale count.
    pub fn check_hr_extents(&self, height: usize, width: usize) -> Result<()> {
        let m = 1usize << self.num_scales;
        if height % m != 0 || width % m != 0 || height == 0 || width == 0 {
            return Err(Error::ExtentMismatch {
                detail: format!("HR extents {height}x{width} must be divisible by {m}"),
            });
        }
        Ok(())
    }

    /// Channels of each scale's latent.
    pub fn latent_channels(&self) -> Vec<usize> {
        let mut c = self.channels;
        let mut out = Vec::with_capacity(self.num_scales);
        for k in 0..self.num_scales {
            c *= 4;
            if k + 1 < self.num_scales {
                out.push(c - c / 2);
                c /= 2;
            } else {
                out.push(c);
            }
        }
        out
    }
}

/// Per-scale latents `z_1 .. z_K`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub latents: Vec<Tensor>,
}

impl LatentState {
    pub fn numel(&self) -> usize {
        self.latents.iter().map(Tensor::numel).sum()
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    stem: [ConvLayer; 2],
    downs: Vec<ConvLayer>,
    /// Per-scale standardization of the conditioning features.
    norms: Vec<ActNorm>,
}

#[derive(Clone, Debug)]
struct Scale {
    flow: FlowStack,
    split: bool,
}

/// The conditional flow with its parameters.
#[derive(Clone, Debug)]
pub struct FlowModel {
    config: ModelConfig,
    params: ParamSet,
    encoder: Encoder,
    scales: Vec<Scale>,
    priors: Vec<ConvLayer>,
}

impl FlowModel {
    /// Builds an identity-initialized model: coupling outputs and prior heads start
    /// at zero, actnorms at unit scale. Hidden convolutions draw from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let ce = config.cond_channels;
        let cu = ce + config.channels;

        let stem = [
            ConvLayer::new(&mut params, "enc.stem0", config.channels, ce, 3, false, &mut rng),
            ConvLayer::new(&mut params, "enc.stem1", ce, ce, 3, false, &mut rng),
        ];
        let n_down = config.num_scales.saturating_sub(config.log2_upsampling());
        let downs = (0..n_down)
            .map(|i| ConvLayer::new(&mut params, &format!("enc.down{i}"), ce, ce, 3, false, &mut rng))
            .collect();
        let norms = (0..config.num_scales)
            .map(|k| ActNorm::identity(&mut params, &format!("enc.norm{k}"), cu))
            .collect();

        let mut scales = Vec::with_capacity(config.num_scales);
        let mut c = config.channels;
        for k in 0..config.num_scales {
            c *= 4;
            let mut steps = Vec::with_capacity(3 * config.steps_per_scale);
            for s in 0..config.steps_per_scale {
                let name = format!("scale{k}.step{s}");
                steps.push(FlowStep::ActNorm(ActNorm::identity(&mut params, &format!("{name}.actnorm"), c)));
                steps.push(FlowStep::Coupling(AffineCoupling::new(
                    &mut params,
                    &format!("{name}.coupling"),
                    c,
                    cu,
                    config.hidden_channels,
                    &mut rng,
                )?));
                steps.push(FlowStep::Permute);
            }
            let split = k + 1 < config.num_scales;
            scales.push(Scale {
                flow: FlowStack::new(steps),
                split,
            });
            if split {
                c /= 2;
            }
        }

        let priors = config
            .latent_channels()
            .iter()
            .enumerate()
            .map(|(k, &cz)| ConvLayer::new(&mut params, &format!("prior{k}"), cu, 2 * cz, 3, true, &mut rng))
            .collect();

        Ok(Self {
            config,
            params,
            encoder: Encoder { stem, downs, norms },
            scales,
            priors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn check_pair(&self, y_hr: (usize, usize, usize), x_lr: (usize, usize, usize)) -> Result<()> {
        let s = self.config.upsampling;
        if y_hr.0 != self.config.channels || x_lr.0 != self.config.channels {
            return Err(Error::ChannelMismatch {
                input: y_hr.0.max(x_lr.0),
                kernel: self.config.channels,
            });
        }
        if x_lr.1 * s != y_hr.1 || x_lr.2 * s != y_hr.2 {
            return Err(Error::ExtentMismatch {
                detail: format!(
                    "LR {}x{} times {s} does not match HR {}x{}",
                    x_lr.1, x_lr.2, y_hr.1, y_hr.2
                ),
            });
        }
        self.config.check_hr_extents(y_hr.1, y_hr.2)
    }

    // ---- graph-level building blocks ---------------------------------------

    /// Conditioning features `u_1 .. u_K`, each at its flow scale's resolution
    /// (`s * h / 2^k` for an `h`-high LR input).
    pub fn encode_graph(&self, g: &mut Graph, p: &Bound, x_lr: Var) -> Result<Vec<Var>> {
        let raw = self.raw_features(g, p, x_lr)?;
        raw.into_iter()
            .zip(&self.encoder.norms)
            .map(|(u, n)| Ok(n.forward(g, p, u)?.0))
            .collect()
    }

    fn raw_features(&self, g: &mut Graph, p: &Bound, x_lr: Var) -> Result<Vec<Var>> {
        let f = self.encoder.stem[0].apply(g, p, x_lr)?;
        let f = g.leaky_relu(f, LEAKY_SLOPE)?;
        let f = self.encoder.stem[1].apply(g, p, f)?;
        let base = g.leaky_relu(f, LEAKY_SLOPE)?;

        let mut pyramid = Vec::with_capacity(self.encoder.downs.len());
        let mut cur = base;
        for layer in &self.encoder.downs {
            let d = layer.apply_strided(g, p, cur, 2)?;
            cur = g.leaky_relu(d, LEAKY_SLOPE)?;
            pyramid.push(cur);
        }

        let l2s = self.config.log2_upsampling();
        let mut out = Vec::with_capacity(self.config.num_scales);
        for k in 1..=self.config.num_scales {
            let (u, xk) = if k < l2s {
                let f = 1 << (l2s - k);
                (upsample_nearest(g, base, f)?, upsample_nearest(g, x_lr, f)?)
            } else if k == l2s {
                (base, x_lr)
            } else {
                (pyramid[k - l2s - 1], downsample_mean(g, x_lr, 1 << (k - l2s))?)
            };
            out.push(g.concat(&[u, xk])?);
        }
        Ok(out)
    }

    /// Data-to-latent pass. Returns the latents and the summed log-determinant.
    pub fn forward_graph(&self, g: &mut Graph, p: &Bound, y: Var, u: &[Var]) -> Result<(Vec<Var>, Var)> {
        let mut h = y;
        let mut logdet = g.scalar(0.0);
        let mut latents = Vec::with_capacity(self.scales.len());
        for (scale, &uk) in self.scales.iter().zip(u) {
            h = squeeze(g, h)?;
            let (next, ld) = scale.flow.forward(g, p, h, Some(uk))?;
            logdet = g.add(logdet, ld)?;
            if scale.split {
                let c = g.shape(next)[0];
                let (keep, z) = g.split_channels(next, c / 2)?;
                latents.push(z);
                h = keep;
            } else {
                latents.push(next);
                h = next;
            }
        }
        Ok((latents, logdet))
    }

    /// Latent-to-data pass, the exact inverse of [`Self::forward_graph`].
    pub fn inverse_graph(&self, g: &mut Graph, p: &Bound, latents: &[Var], u: &[Var]) -> Result<Var> {
        if latents.len() != self.scales.len() || u.len() != self.scales.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} latents and feature maps",
                self.scales.len()
            )));
        }
        let mut h = latents[latents.len() - 1];
        for (k, scale) in self.scales.iter().enumerate().rev() {
            if scale.split {
                h = g.concat(&[h, latents[k]])?;
            }
            h = scale.flow.inverse(g, p, h, Some(u[k]))?;
            h = unsqueeze(g, h)?;
        }
        Ok(h)
    }

    /// `(mean, log_std)` of the conditional prior at scale `k`.
    pub fn prior_graph(&self, g: &mut Graph, p: &Bound, k: usize, uk: Var) -> Result<(Var, Var)> {
        let out = self.priors[k].apply(g, p, uk)?;
        let c = g.shape(out)[0];
        g.split_channels(out, c / 2)
    }

    /// Summed diagonal-Gaussian log-density of `z`.
    pub fn gaussian_log_density(g: &mut Graph, z: Var, mean: Var, log_std: Var) -> Result<Var> {
        let n = g.value(z).numel() as f64;
        let diff = g.sub(z, mean)?;
        let nls = g.neg(log_std)?;
        let inv_std = g.exp(nls)?;
        let r = g.mul(diff, inv_std)?;
        let r2 = g.mul(r, r)?;
        let quad = g.sum_all(r2)?;
        let quad = g.scale(quad, -0.5)?;
        let ls = g.sum_all(log_std)?;
        let lp = g.sub(quad, ls)?;
        let c = g.scalar(-n * math::HALF_LN_2PI);
        g.add(lp, c)
    }

    /// Negative log-likelihood of `y` given `x`, in bits per dimension.
    pub fn nll_graph(&self, g: &mut Graph, p: &Bound, y: Var, x: Var) -> Result<Var> {
        self.check_pair(g.value(y).dims3()?, g.value(x).dims3()?)?;
        let d = g.value(y).numel() as f64;
        let u = self.encode_graph(g, p, x)?;
        let (latents, logdet) = self.forward_graph(g, p, y, &u)?;
        let mut logp = logdet;
        for (k, (&z, &uk)) in latents.iter().zip(&u).enumerate() {
            let (mean, log_std) = self.prior_graph(g, p, k, uk)?;
            let lp = Self::gaussian_log_density(g, z, mean, log_std)?;
            logp = g.add(logp, lp)?;
        }
        let bpd = g.scale(logp, -1.0 / (d * math::LN_2))?;
        if !g.value(bpd).is_finite() {
            return Err(Error::NonFinite("nll"));
        }
        Ok(bpd)
    }

    /// Draws `z_k = mean_k + tau * std_k * eps` and inverts the flow.
    pub fn sample_graph<R: Rng + ?Sized>(&self, g: &mut Graph, p: &Bound, x: Var, tau: f64, rng: &mut R) -> Result<Var> {
        if !(tau >= 0.0) {
            return Err(Error::Domain {
                op: "sample",
                detail: format!("temperature must be non-negative, got {tau}"),
            });
        }
        let (c, h, w) = g.value(x).dims3()?;
        let s = self.config.upsampling;
        self.check_pair((c, h * s, w * s), (c, h, w))?;
        let u = self.encode_graph(g, p, x)?;
        let mut latents = Vec::with_capacity(u.len());
        for (k, &uk) in u.iter().enumerate() {
            let (mean, log_std) = self.prior_graph(g, p, k, uk)?;
            let shape = g.shape(mean).to_vec();
            let eps = Tensor::from_fn(shape, |_| {
                let e: f64 = StandardNormal.sample(rng);
                e * tau
            });
            let eps = g.constant(eps);
            let std = g.exp(log_std)?;
            let noise = g.mul(std, eps)?;
            latents.push(g.add(mean, noise)?);
        }
        self.inverse_graph(g, p, &latents, &u)
    }

    // ---- value-level API ------------------------------------------------------

    pub fn encode_condition(&self, x_lr: &GridField) -> Result<Vec<Tensor>> {
        let (c, h, w) = x_lr.extents();
        let s = self.config.upsampling;
        self.check_pair((c, h * s, w * s), (c, h, w))?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(x_lr.to_tensor());
        let u = self.encode_graph(&mut g, &p, x)?;
        Ok(u.iter().map(|&v| g.value(v).clone()).collect())
    }

    pub fn forward_flow(&self, y_hr: &GridField, x_lr: &GridField) -> Result<(LatentState, f64)> {
        self.check_pair(y_hr.extents(), x_lr.extents())?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(x_lr.to_tensor());
        let y = g.constant(y_hr.to_tensor());
        let u = self.encode_graph(&mut g, &p, x)?;
        let (lat, ld) = self.forward_graph(&mut g, &p, y, &u)?;
        Ok((
            LatentState {
                latents: lat.iter().map(|&v| g.value(v).clone()).collect(),
            },
            g.value(ld).item(),
        ))
    }

    pub fn inverse_flow(&self, latents: &LatentState, x_lr: &GridField) -> Result<GridField> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(x_lr.to_tensor());
        let u = self.encode_graph(&mut g, &p, x)?;
        let z: Vec<Var> = latents.latents.iter().map(|t| g.constant(t.clone())).collect();
        let y = self.inverse_graph(&mut g, &p, &z, &u)?;
        GridField::from_tensor(g.value(y))
    }

    /// Bits per dimension of `y_hr` under `p(y | x_lr)`.
    pub fn nll(&self, y_hr: &GridField, x_lr: &GridField) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let y = g.constant(y_hr.to_tensor());
        let x = g.constant(x_lr.to_tensor());
        let bpd = self.nll_graph(&mut g, &p, y, x)?;
        Ok(g.value(bpd).item())
    }

    pub fn sample(&self, x_lr: &GridField, tau: f64, seed: u64) -> Result<GridField> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(x_lr.to_tensor());
        let y = self.sample_graph(&mut g, &p, x, tau, &mut rng)?;
        Ok(GridField::from_tensor(g.value(y))?.with_range(x_lr.range))
    }

    /// `n` samples with seeds `base_seed .. base_seed + n - 1`.
    pub fn sample_ensemble(&self, x_lr: &GridField, tau: f64, n: usize, base_seed: u64) -> Result<Vec<GridField>> {
        if n == 0 {
            return Err(Error::EmptyEnsemble);
        }
        (0..n as u64).map(|i| self.sample(x_lr, tau, base_seed.wrapping_add(i))).collect()
    }

    /// Data-dependent actnorm initialization: every actnorm (including the
    /// conditioning normalizers) is set so that its input over `batch` has zero
    /// mean and unit variance per channel.
    pub fn initialize_actnorms(&mut self, batch: &[(GridField, GridField)]) -> Result<()> {
        for (y, x) in batch {
            self.check_pair(y.extents(), x.extents())?;
        }
        let mut raw: Vec<Vec<Tensor>> = alloc::vec![Vec::new(); self.config.num_scales];
        for (_, x) in batch {
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let xv = g.constant(x.to_tensor());
            for (k, u) in self.raw_features(&mut g, &p, xv)?.into_iter().enumerate() {
                raw[k].push(g.value(u).clone());
            }
        }
        for (k, r) in raw.iter().enumerate() {
            let mut n = self.encoder.norms[k].clone();
            n.initialize_from(&mut self.params, r)?;
            self.encoder.norms[k] = n;
        }
        let features: Vec<Vec<Tensor>> = batch.iter().map(|(_, x)| self.encode_condition(x)).collect::<Result<_>>()?;
        let mut current: Vec<Tensor> = batch.iter().map(|(y, _)| y.to_tensor()).collect();
        for k in 0..self.scales.len() {
            for h in current.iter_mut() {
                let mut g = Graph::new();
                let v = g.constant(core::mem::replace(h, Tensor::scalar(0.0)));
                let s = squeeze(&mut g, v)?;
                *h = g.value(s).clone();
            }
            for i in 0..self.scales[k].flow.steps.len() {
                if let FlowStep::ActNorm(_) = self.scales[k].flow.steps[i] {
                    let FlowStep::ActNorm(mut a) = self.scales[k].flow.steps[i].clone() else {
                        unreachable!()
                    };
                    a.initialize_from(&mut self.params, &current)?;
                    self.scales[k].flow.steps[i] = FlowStep::ActNorm(a);
                }
                let step = &self.scales[k].flow.steps[i];
                for (h, u) in current.iter_mut().zip(&features) {
                    let mut g = Graph::new();
                    let p = self.params.bind(&mut g, false);
                    let hv = g.constant(core::mem::replace(h, Tensor::scalar(0.0)));
                    let uv = g.constant(u[k].clone());
                    let (z, _) = step.forward(&mut g, &p, hv, Some(uv))?;
                    *h = g.value(z).clone();
                }
            }
            if self.scales[k].split {
                for h in current.iter_mut() {
                    let c = h.shape()[0];
                    let (_, hh, ww) = h.dims3()?;
                    let keep = h.data()[..(c / 2) * hh * ww].to_vec();
                    *h = Tensor::new([c / 2, hh, ww], keep)?;
                }
            }
        }
        Ok(())
    }

    /// Whether every actnorm holds usable parameters.
    pub fn actnorms_ready(&self) -> bool {
        self.scales
            .iter()
            .flat_map(|s| &s.flow.steps)
            .all(|st| !matches!(st, FlowStep::ActNorm(a) if !a.is_initialized()))
    }
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(g: &mut Graph, x: Var, factor: usize) -> Result<Var> {
    let (c, h, w) = g.value(x).dims3()?;
    let (ho, wo) = (h * factor, w * factor);
    let index: alloc::sync::Arc<[usize]> = (0..c)
        .flat_map(|ch| (0..ho).flat_map(move |y| (0..wo).map(move |xx| (ch * h + y / factor) * w + xx / factor)))
        .collect();
    g.gather(x, index, &[c, ho, wo])
}

/// Block-mean pooling by an integer factor.
pub fn downsample_mean(g: &mut Graph, x: Var, factor: usize) -> Result<Var> {
    let (c, h, w) = g.value(x).dims3()?;
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::ExtentMismatch {
            detail: format!("{h}x{w} is not divisible by {factor}"),
        });
    }
    let (ho, wo) = (h / factor, w / factor);
    let mut acc: Option<Var> = None;
    for dy in 0..factor {
        for dx in 0..factor {
            let index: alloc::sync::Arc<[usize]> = (0..c)
                .flat_map(|ch| {
                    (0..ho).flat_map(move |y| (0..wo).map(move |xx| (ch * h + y * factor + dy) * w + xx * factor + dx))
                })
                .collect();
            let part = g.gather(x, index, &[c, ho, wo])?;
            acc = Some(match acc {
                Some(a) => g.add(a, part)?,
                None => part,
            });
        }
    }
    g.scale(acc.expect("factor is positive"), 1.0 / (factor * factor) as f64)
}

/// A standalone unconditional flow with a standard-normal base density.
#[derive(Clone, Debug)]
pub struct DensityFlow {
    pub params: ParamSet,
    pub stack: FlowStack,
}

impl DensityFlow {
    /// Natural-log density of `y`.
    pub fn log_prob(&self, y: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let yv = g.constant(y.clone());
        let (z, logdet) = self.stack.forward(&mut g, &p, yv, None)?;
        let zero = g.scalar(0.0);
        let lp = FlowModel::gaussian_log_density(&mut g, z, zero, zero)?;
        let total = g.add(lp, logdet)?;
        Ok(g.value(total).item())
    }
}
