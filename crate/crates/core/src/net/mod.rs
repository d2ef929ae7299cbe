//! Small fully connected networks with hand-written reverse passes: a
//! permutation-invariant point encoder and the conditional noise predictor.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Dense layers with SiLU between them. Parameters are one flat array laid
/// out layer by layer as a row-major `out × in` weight followed by the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    /// Apply the activation after the last layer too.
    pub final_activation: bool,
    pub params: Vec<f64>,
}

/// Pre-activations of one forward pass, kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn param_count(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn zeros(sizes: &[usize], final_activation: bool) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidConfig(format!("bad layer sizes {sizes:?}")));
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            final_activation,
            params: vec![0.0; Self::param_count(sizes)],
        })
    }

    /// Gaussian weights with variance `1/fan_in`, zero biases.
    pub fn init(sizes: &[usize], final_activation: bool, rng: &mut impl Rng) -> Result<Self> {
        let mut m = Self::zeros(sizes, final_activation)?;
        let mut off = 0;
        for w in sizes.windows(2) {
            let scale = (1.0 / w[0] as f64).sqrt();
            for p in &mut m.params[off..off + w[0] * w[1]] {
                *p = scale * rng.sample::<f64, _>(StandardNormal);
            }
            off += w[0] * w[1] + w[1];
        }
        Ok(m)
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.len() < 2 || self.sizes.contains(&0) || self.params.len() != Self::param_count(&self.sizes) {
            return Err(Error::Checkpoint(format!(
                "parameter array of length {} does not fit layers {:?}",
                self.params.len(),
                self.sizes
            )));
        }
        Ok(())
    }

    fn activates(&self, layer: usize) -> bool {
        layer + 2 < self.sizes.len() || self.final_activation
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_traced(x).0
    }

    pub fn forward_traced(&self, x: &[f64]) -> (Vec<f64>, MlpTrace) {
        debug_assert_eq!(x.len(), self.sizes[0]);
        let mut pre = Vec::with_capacity(self.sizes.len() - 1);
        let mut cur = x.to_vec();
        let mut off = 0;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &self.params[off..off + n_in * n_out];
            let bias = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let z: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &weights[o * n_in..(o + 1) * n_in];
                    bias[o] + row.iter().zip(&cur).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            cur = if self.activates(l) { z.iter().map(|v| silu(*v)).collect() } else { z.clone() };
            pre.push(z);
            off += n_in * n_out + n_out;
        }
        (
            cur,
            MlpTrace {
                input: x.to_vec(),
                pre,
            },
        )
    }

    /// Accumulates parameter gradients into `grad_params` and returns the
    /// gradient with respect to the input.
    pub fn backward(&self, trace: &MlpTrace, grad_out: &[f64], grad_params: Option<&mut [f64]>) -> Vec<f64> {
        let mut grad_params = grad_params;
        let n_layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        let mut g = grad_out.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            if self.activates(l) {
                for (gi, z) in g.iter_mut().zip(&trace.pre[l]) {
                    *gi *= silu_grad(*z);
                }
            }
            let input: Vec<f64>;
            let a_in: &[f64] = if l == 0 {
                &trace.input
            } else if self.activates(l - 1) {
                input = trace.pre[l - 1].iter().map(|v| silu(*v)).collect();
                &input
            } else {
                &trace.pre[l - 1]
            };
            let o = offsets[l];
            if let Some(gp) = grad_params.as_deref_mut() {
                for r in 0..n_out {
                    if g[r] != 0.0 {
                        let row = &mut gp[o + r * n_in..o + (r + 1) * n_in];
                        for (w, a) in row.iter_mut().zip(a_in) {
                            *w += g[r] * a;
                        }
                    }
                    gp[o + n_in * n_out + r] += g[r];
                }
            }
            let weights = &self.params[o..o + n_in * n_out];
            let mut gin = vec![0.0; n_in];
            for r in 0..n_out {
                if g[r] != 0.0 {
                    for (gi, w) in gin.iter_mut().zip(&weights[r * n_in..(r + 1) * n_in]) {
                        *gi += g[r] * w;
                    }
                }
            }
            g = gin;
        }
        g
    }
}

/// Per-point MLP followed by a channel-wise max over points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectEncoder {
    pub mlp: Mlp,
}

/// Which point won each pooled channel, plus the traces of those points.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    argmax: Vec<usize>,
    traces: Vec<(usize, MlpTrace)>,
}

impl ObjectEncoder {
    pub fn new(widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut sizes = vec![3];
        sizes.extend_from_slice(widths);
        Ok(ObjectEncoder {
            mlp: Mlp::init(&sizes, true, rng)?,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn forward(&self, points: &[[f64; 3]]) -> Result<Vec<f64>> {
        Ok(self.forward_traced(points)?.0)
    }

    /// Max-pooled feature. Ties go to the first point attaining the maximum.
    pub fn forward_traced(&self, points: &[[f64; 3]]) -> Result<(Vec<f64>, EncoderTrace)> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let c = self.feature_dim();
        let mut best = vec![f64::NEG_INFINITY; c];
        let mut argmax = vec![0usize; c];
        for (i, p) in points.iter().enumerate() {
            let f = self.mlp.forward(p);
            for ch in 0..c {
                if f[ch] > best[ch] {
                    best[ch] = f[ch];
                    argmax[ch] = i;
                }
            }
        }
        if best.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("object encoder output".into()));
        }
        let mut winners: Vec<usize> = argmax.clone();
        winners.sort_unstable();
        winners.dedup();
        let traces = winners.into_iter().map(|i| (i, self.mlp.forward_traced(&points[i]).1)).collect();
        Ok((best, EncoderTrace { argmax, traces }))
    }

    pub fn backward(&self, trace: &EncoderTrace, grad_feature: &[f64], grad_params: &mut [f64]) {
        for (i, t) in &trace.traces {
            let g: Vec<f64> = trace
                .argmax
                .iter()
                .zip(grad_feature)
                .map(|(a, g)| if a == i { *g } else { 0.0 })
                .collect();
            if g.iter().any(|v| *v != 0.0) {
                self.mlp.backward(t, &g, Some(grad_params));
            }
        }
    }
}

/// Sinusoidal embedding of the diffusion step.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Widths and embedding sizes of the two networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub encoder_widths: Vec<usize>,
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub semantic_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            encoder_widths: vec![64, 128],
            hidden: vec![256, 256],
            time_dim: 32,
            semantic_dim: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.is_empty() || self.hidden.is_empty() || self.encoder_widths.contains(&0) || self.hidden.contains(&0) {
            return Err(Error::InvalidConfig("network widths must be non-empty and positive".into()));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::InvalidConfig("time embedding size must be a positive even number".into()));
        }
        Ok(())
    }
}

/// `ε̂ = MLP([h_t, emb(t), object feature, semantic feature])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserMlp {
    pub pose_dim: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub semantic_dim: usize,
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct DenoiserTrace {
    mlp: MlpTrace,
}

/// Input gradients of one denoiser evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserInputGrad {
    pub h_t: Vec<f64>,
    pub feature: Vec<f64>,
}

impl DenoiserMlp {
    pub fn new(pose_dim: usize, cond_dim: usize, cfg: &NetConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut sizes = vec![pose_dim + cfg.time_dim + cond_dim + cfg.semantic_dim];
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(pose_dim);
        Ok(DenoiserMlp {
            pose_dim,
            time_dim: cfg.time_dim,
            cond_dim,
            semantic_dim: cfg.semantic_dim,
            mlp: Mlp::init(&sizes, false, rng)?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.mlp.validate()?;
        let expected = self.pose_dim + self.time_dim + self.cond_dim + self.semantic_dim;
        if self.mlp.input_dim() != expected || self.mlp.output_dim() != self.pose_dim {
            return Err(Error::Checkpoint("denoiser layer sizes disagree with its input layout".into()));
        }
        Ok(())
    }

    fn assemble(&self, h_t: &[f64], t: usize, feature: &[f64], semantic: Option<&[f64]>) -> Result<Vec<f64>> {
        let check = |what: &'static str, expected: usize, got: usize| {
            if expected != got {
                Err(Error::DimensionMismatch { what, expected, got })
            } else {
                Ok(())
            }
        };
        check("noisy pose", self.pose_dim, h_t.len())?;
        check("object feature", self.cond_dim, feature.len())?;
        let sem_len = semantic.map_or(0, |s| s.len());
        if self.semantic_dim > 0 || sem_len > 0 {
            check("semantic feature", self.semantic_dim, sem_len)?;
        }
        let mut x = Vec::with_capacity(self.mlp.input_dim());
        x.extend_from_slice(h_t);
        x.extend(time_embedding(t, self.time_dim));
        x.extend_from_slice(feature);
        if let Some(s) = semantic {
            x.extend_from_slice(s);
        }
        Ok(x)
    }

    pub fn forward(&self, h_t: &[f64], t: usize, feature: &[f64], semantic: Option<&[f64]>) -> Result<Vec<f64>> {
        Ok(self.mlp.forward(&self.assemble(h_t, t, feature, semantic)?))
    }

    pub fn forward_traced(
        &self,
        h_t: &[f64],
        t: usize,
        feature: &[f64],
        semantic: Option<&[f64]>,
    ) -> Result<(Vec<f64>, DenoiserTrace)> {
        let (out, mlp) = self.mlp.forward_traced(&self.assemble(h_t, t, feature, semantic)?);
        Ok((out, DenoiserTrace { mlp }))
    }

    pub fn backward(&self, trace: &DenoiserTrace, grad_out: &[f64], grad_params: Option<&mut [f64]>) -> DenoiserInputGrad {
        let g = self.mlp.backward(&trace.mlp, grad_out, grad_params);
        let f0 = self.pose_dim + self.time_dim;
        DenoiserInputGrad {
            h_t: g[..self.pose_dim].to_vec(),
            feature: g[f0..f0 + self.cond_dim].to_vec(),
        }
    }
}
