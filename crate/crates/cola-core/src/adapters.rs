//! Dual-pathway low-rank adapters.
//!
//! Each adapted linear keeps its frozen base weight and up to two low-rank
//! pathways: an intra-modal one (`(alpha/r) * B_L * A_L`, plain LoRA) and an
//! inter-modal fusion one (`lambda * B_C * Phi * A_C`) whose r-by-r core
//! `Phi` is produced per forward pass by a two-layer hypernetwork from the
//! paired modality's pooled features. Pathway factors can be shared between
//! the two branches; products are evaluated right-to-left so the full
//! d_out-by-d_in delta is never materialized on the forward path.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, NodeId};
use crate::linalg::{low_rank_singular_values, numerical_rank, Mat};
use crate::scalar::Scalar;
use crate::tensor::{Param, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// How the low-rank factors are shared between the two pathways.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SharingMode {
    /// Separate A and B per pathway.
    NonShared,
    /// One A matrix feeds both pathways.
    SharedA,
    /// One B matrix closes both pathways.
    SharedB,
    /// One A and one B: a single unified pass through `Phi`, scaled by the
    /// static alpha/r factor instead of the learnable lambda.
    FullyShared,
}

impl SharingMode {
    pub const ALL: [SharingMode; 4] = [
        SharingMode::NonShared,
        SharingMode::SharedA,
        SharingMode::SharedB,
        SharingMode::FullyShared,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nonshared" | "non-shared" => Ok(SharingMode::NonShared),
            "shareda" | "shared-a" => Ok(SharingMode::SharedA),
            "sharedb" | "shared-b" => Ok(SharingMode::SharedB),
            "fullyshared" | "fully-shared" => Ok(SharingMode::FullyShared),
            other => Err(Error::config(format!("unknown sharing mode '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SharingMode::NonShared => "non-shared",
            SharingMode::SharedA => "shared-a",
            SharingMode::SharedB => "shared-b",
            SharingMode::FullyShared => "fully-shared",
        }
    }
}

/// Adapter hyperparameters shared by every injection point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Rank of both low-rank pathways.
    pub rank: usize,
    /// Static numerator of the intra-modal alpha/r scale.
    pub alpha: f64,
    /// Initial value of the learnable inter-modal gate.
    pub lambda_init: f64,
    /// Hypernetwork bottleneck reduction factor.
    pub gamma: usize,
    pub sharing: SharingMode,
    pub activation: Activation,
    /// Linear layers of the hypernetwork carry biases.
    pub hypernet_bias: bool,
    /// Hypernetwork layer norms carry affine gain/bias.
    pub hypernet_ln_affine: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            rank: 16,
            alpha: 8.0,
            lambda_init: 0.5,
            gamma: 16,
            sharing: SharingMode::NonShared,
            activation: Activation::Gelu,
            hypernet_bias: true,
            hypernet_ln_affine: true,
        }
    }
}

impl AdapterConfig {
    pub fn lora_scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, d_in: usize, d_out: usize) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("rank must be >= 1"));
        }
        if self.rank >= d_in.min(d_out) {
            return Err(Error::config(format!(
                "rank {} must be smaller than min(d_in, d_out) = {}",
                self.rank,
                d_in.min(d_out)
            )));
        }
        if self.alpha <= 0.0 {
            return Err(Error::config("alpha must be positive"));
        }
        if self.gamma == 0 {
            return Err(Error::config("gamma must be >= 1"));
        }
        Ok(())
    }
}

/// Intra-modal low-rank pathway: `a` is [r, d_in], `b` is [d_out, r].
#[derive(Debug, Clone)]
pub struct LoraPath<T> {
    pub a: Param<T>,
    pub b: Param<T>,
}

impl<T: Scalar> LoraPath<T> {
    pub fn init(d_in: usize, d_out: usize, rank: usize, rng: &mut impl Rng) -> Self {
        LoraPath {
            a: Param::trainable(Tensor::kaiming_uniform(vec![rank, d_in], d_in, rng)),
            b: Param::trainable(Tensor::zeros(vec![d_out, rank])),
        }
    }

    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }
}

/// Two linear layers with a nonlinearity and layer norms, mapping the pooled
/// cross-modal vector [d_c] to the r-by-r core.
#[derive(Debug, Clone)]
pub struct Hypernet<T> {
    pub w_down: Param<T>,
    pub b_down: Option<Param<T>>,
    pub ln_inner_gain: Option<Param<T>>,
    pub ln_inner_bias: Option<Param<T>>,
    pub w_up: Param<T>,
    pub b_up: Option<Param<T>>,
    pub ln_outer_gain: Option<Param<T>>,
    pub ln_outer_bias: Option<Param<T>>,
    pub activation: Activation,
    rank: usize,
    d_c: usize,
}

impl<T: Scalar> Hypernet<T> {
    pub fn init(d_c: usize, rank: usize, config: &AdapterConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.gamma > d_c {
            return Err(Error::config(format!(
                "gamma {} exceeds cross-modal dim {d_c}",
                config.gamma
            )));
        }
        let d_h = (d_c / config.gamma).max(1);
        let r2 = rank * rank;
        let affine = |d: usize| {
            (
                Some(Param::trainable(Tensor::full(vec![d], 1.0))),
                Some(Param::trainable(Tensor::zeros(vec![d]))),
            )
        };
        let (ln_inner_gain, ln_inner_bias) = if config.hypernet_ln_affine {
            affine(d_h)
        } else {
            (None, None)
        };
        let (ln_outer_gain, ln_outer_bias) = if config.hypernet_ln_affine {
            affine(r2)
        } else {
            (None, None)
        };
        Ok(Hypernet {
            w_down: Param::trainable(Tensor::xavier_uniform(vec![d_h, d_c], d_c, d_h, rng)),
            b_down: config
                .hypernet_bias
                .then(|| Param::trainable(Tensor::zeros(vec![d_h]))),
            ln_inner_gain,
            ln_inner_bias,
            w_up: Param::trainable(Tensor::xavier_uniform(vec![r2, d_h], d_h, r2, rng)),
            b_up: config
                .hypernet_bias
                .then(|| Param::trainable(Tensor::zeros(vec![r2]))),
            ln_outer_gain,
            ln_outer_bias,
            activation: config.activation,
            rank,
            d_c,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn d_c(&self) -> usize {
        self.d_c
    }

    /// `Phi = LN(W_up * LN(act(W_down * xbar_c)))`, reshaped to [r, r].
    pub fn forward(&self, g: &mut Graph<T>, xbar_c: NodeId) -> Result<NodeId> {
        if g.value(xbar_c).shape() != [self.d_c] {
            return Err(Error::shape(format!(
                "hypernet input has shape {:?}, expected [{}]",
                g.value(xbar_c).shape(),
                self.d_c
            )));
        }
        let wd = g.param(&self.w_down);
        let mut z = g.linear(xbar_c, wd)?;
        if let Some(b) = &self.b_down {
            let bn = g.param(b);
            z = g.add_bias(z, bn)?;
        }
        z = g.activation(z, self.activation);
        let gain_in = self.ln_inner_gain.as_ref().map(|p| g.param(p));
        let bias_in = self.ln_inner_bias.as_ref().map(|p| g.param(p));
        z = g.layer_norm(z, gain_in, bias_in, LN_EPS)?;
        let wu = g.param(&self.w_up);
        z = g.linear(z, wu)?;
        if let Some(b) = &self.b_up {
            let bn = g.param(b);
            z = g.add_bias(z, bn)?;
        }
        let gain_out = self.ln_outer_gain.as_ref().map(|p| g.param(p));
        let bias_out = self.ln_outer_bias.as_ref().map(|p| g.param(p));
        z = g.layer_norm(z, gain_out, bias_out, LN_EPS)?;
        g.reshape(z, vec![self.rank, self.rank])
    }

    /// Phi as a plain tensor, no graph involvement, for diagnostics.
    pub fn forward_value(&self, xbar_c: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let x = g.constant(xbar_c.clone());
        let phi = self.forward(&mut g, x)?;
        Ok(g.value(phi).clone())
    }

    fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        let mut out: Vec<(&'static str, &Param<T>)> = vec![("hyp_w_down", &self.w_down)];
        if let Some(p) = &self.b_down {
            out.push(("hyp_b_down", p));
        }
        if let Some(p) = &self.ln_inner_gain {
            out.push(("hyp_ln_inner_gain", p));
        }
        if let Some(p) = &self.ln_inner_bias {
            out.push(("hyp_ln_inner_bias", p));
        }
        out.push(("hyp_w_up", &self.w_up));
        if let Some(p) = &self.b_up {
            out.push(("hyp_b_up", p));
        }
        if let Some(p) = &self.ln_outer_gain {
            out.push(("hyp_ln_outer_gain", p));
        }
        if let Some(p) = &self.ln_outer_bias {
            out.push(("hyp_ln_outer_bias", p));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.numel()).sum()
    }
}

/// Inter-modal fusion pathway: low-rank factors plus the dynamic core.
#[derive(Debug, Clone)]
pub struct ColaPath<T> {
    pub a: Param<T>,
    pub b: Param<T>,
    /// Learnable gate; absent under FullyShared (alpha/r is used instead).
    pub lambda: Option<Param<T>>,
    pub hypernet: Hypernet<T>,
}

impl<T: Scalar> ColaPath<T> {
    pub fn lambda_value(&self) -> f64 {
        self.lambda
            .as_ref()
            .map_or(0.0, |l| l.value().data()[0].as_f64())
    }

    /// Replace the gate with a frozen zero, silencing this pathway.
    pub fn freeze_lambda_at_zero(&mut self) {
        if self.lambda.is_some() {
            self.lambda = Some(Param::frozen(Tensor::scalar(T::zero())));
        }
    }
}

/// Which pathways an injection point carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdapterKind {
    /// Frozen base only.
    Frozen,
    /// Intra-modal pathway only.
    LoraOnly,
    /// Both pathways (subject to the sharing mode).
    Cola,
}

/// A frozen base weight with optional adaptation pathways: the unit of
/// adapter injection.
#[derive(Debug, Clone)]
pub struct AdaptedLinear<T> {
    pub w0: Param<T>,
    pub b0: Option<Param<T>>,
    pub lora: Option<LoraPath<T>>,
    pub cola: Option<ColaPath<T>>,
    pub sharing: SharingMode,
    lora_scale: f64,
    d_in: usize,
    d_out: usize,
}

/// Build an injection point with freshly initialized pathways.
///
/// A factors are Kaiming-uniform, B factors zero (so the forward equals the
/// frozen forward at construction), lambda starts at `lambda_init`, and
/// hypernet linears are Xavier-uniform with zero biases. Sharing modes alias
/// storage between the pathways rather than copying it.
pub fn init_adapted_linear<T: Scalar>(
    w0: Param<T>,
    b0: Option<Param<T>>,
    d_c: usize,
    kind: AdapterKind,
    config: &AdapterConfig,
    rng: &mut impl Rng,
) -> Result<AdaptedLinear<T>> {
    let shape = w0.shape();
    if shape.len() != 2 {
        return Err(Error::shape(format!("base weight must be 2-D, got {shape:?}")));
    }
    let (d_out, d_in) = (shape[0], shape[1]);
    let mut al = AdaptedLinear {
        w0,
        b0,
        lora: None,
        cola: None,
        sharing: config.sharing,
        lora_scale: config.lora_scale(),
        d_in,
        d_out,
    };
    if kind == AdapterKind::Frozen {
        return Ok(al);
    }
    config.validate(d_in, d_out)?;
    let lora = LoraPath::init(d_in, d_out, config.rank, rng);
    if kind == AdapterKind::LoraOnly {
        al.lora = Some(lora);
        return Ok(al);
    }
    if d_c < config.gamma {
        return Err(Error::config(format!(
            "cross-modal dim {d_c} must be >= gamma {}",
            config.gamma
        )));
    }
    let (a_c, b_c) = match config.sharing {
        SharingMode::NonShared => (
            Param::trainable(Tensor::kaiming_uniform(vec![config.rank, d_in], d_in, rng)),
            Param::trainable(Tensor::zeros(vec![d_out, config.rank])),
        ),
        SharingMode::SharedA => (
            lora.a.clone(),
            Param::trainable(Tensor::zeros(vec![d_out, config.rank])),
        ),
        SharingMode::SharedB => (
            Param::trainable(Tensor::kaiming_uniform(vec![config.rank, d_in], d_in, rng)),
            lora.b.clone(),
        ),
        SharingMode::FullyShared => (lora.a.clone(), lora.b.clone()),
    };
    let hypernet = Hypernet::init(d_c, config.rank, config, rng)?;
    let lambda = match config.sharing {
        // single unified pass keeps the static scale, no learnable gate
        SharingMode::FullyShared => None,
        _ => Some(Param::trainable(Tensor::scalar(T::from_f64(
            config.lambda_init,
        )))),
    };
    al.cola = Some(ColaPath {
        a: a_c,
        b: b_c,
        lambda,
        hypernet,
    });
    // under FullyShared the unified pathway is the cola chain; there is no
    // separate intra-modal branch
    if config.sharing != SharingMode::FullyShared {
        al.lora = Some(lora);
    }
    Ok(al)
}

impl<T: Scalar> AdaptedLinear<T> {
    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_scale
    }

    /// `h = W0 x + b0 + (alpha/r) B_L A_L x + lambda B_C Phi(xbar_c) A_C x`,
    /// with the low-rank chains evaluated right to left. Sharing modes
    /// substitute aliased factors; FullyShared runs the single unified chain
    /// scaled by alpha/r.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        x: NodeId,
        xbar_c: Option<NodeId>,
    ) -> Result<NodeId> {
        let w0n = g.param(&self.w0);
        let mut h = g.linear(x, w0n)?;
        if let Some(b0) = &self.b0 {
            let b0n = g.param(b0);
            h = g.add_bias(h, b0n)?;
        }

        let mut lora_first_hop = None;
        if let Some(lora) = &self.lora {
            let an = g.param(&lora.a);
            let u = g.linear(x, an)?;
            lora_first_hop = Some(u);
            let bn = g.param(&lora.b);
            let v = g.linear(u, bn)?;
            let scaled = g.scale(v, self.lora_scale);
            h = g.add(h, scaled)?;
        }

        if let Some(cola) = &self.cola {
            match (xbar_c, &cola.lambda) {
                (Some(xbar), _) => {
                    let phi = cola.hypernet.forward(g, xbar)?;
                    let u = match (self.sharing, lora_first_hop) {
                        // shared A: the first hop is literally the same product
                        (SharingMode::SharedA, Some(u)) => u,
                        _ => {
                            let an = g.param(&cola.a);
                            g.linear(x, an)?
                        }
                    };
                    let t = g.linear(u, phi)?;
                    let bn = g.param(&cola.b);
                    let v = g.linear(t, bn)?;
                    let scaled = match &cola.lambda {
                        Some(lambda) => {
                            let ln = g.param(lambda);
                            g.scale_by(ln, v)?
                        }
                        None => g.scale(v, self.lora_scale),
                    };
                    h = g.add(h, scaled)?;
                }
                (None, Some(lambda)) if lambda.value().data()[0] == T::zero() => {
                    // gate is closed; the pathway contributes nothing and the
                    // pooled features are not required
                }
                (None, _) => {
                    return Err(Error::usage(
                        "inter-modal pathway is active but no pooled cross-modal \
                         features were provided",
                    ));
                }
            }
        }
        Ok(h)
    }

    /// Fold the intra-modal pathway into the frozen weight:
    /// `W0' = W0 + (alpha/r) B_L A_L`. The inter-modal pathway cannot be
    /// merged (its core depends on runtime cross-modal features) and is
    /// carried over unchanged.
    pub fn merge_intra(&self) -> Result<AdaptedLinear<T>> {
        let lora = self
            .lora
            .as_ref()
            .ok_or_else(|| Error::usage("merge_intra: no intra-modal pathway present"))?;
        let a = lora.a.value();
        let b = lora.b.value();
        let r = a.shape()[0];
        let delta = crate::graph::matmul_raw(b.data(), a.data(), self.d_out, r, self.d_in);
        let scale = T::from_f64(self.lora_scale);
        let w0 = self.w0.value();
        let merged: Vec<T> = w0
            .data()
            .iter()
            .zip(&delta)
            .map(|(&w, &d)| w + scale * d)
            .collect();
        Ok(AdaptedLinear {
            w0: Param::frozen(Tensor::new(vec![self.d_out, self.d_in], merged)?),
            b0: self.b0.clone(),
            lora: None,
            cola: self.cola.clone(),
            sharing: self.sharing,
            lora_scale: self.lora_scale,
            d_in: self.d_in,
            d_out: self.d_out,
        })
    }

    /// Numerical ranks (singular values above 1e-9 of the largest) of the
    /// materialized pathway deltas. The inter-modal delta depends on the
    /// pooled features generating its core.
    pub fn rank_of_delta(&self, xbar_c: Option<&Tensor<T>>) -> Result<DeltaRanks> {
        if self.lora.is_none() && self.cola.is_none() {
            return Err(Error::usage("rank_of_delta: no adaptation pathway present"));
        }
        let to_mat = |p: &Param<T>| {
            let v = p.value();
            Mat {
                rows: v.shape()[0],
                cols: v.shape()[1],
                data: v.to_f64_vec(),
            }
        };
        let intra = self.lora.as_ref().map(|lora| {
            let r = lora.a.value().shape()[0];
            let mut core = Mat::zeros(r, r);
            for i in 0..r {
                *core.at_mut(i, i) = self.lora_scale;
            }
            let sv = low_rank_singular_values(&to_mat(&lora.b), &core, &to_mat(&lora.a));
            numerical_rank(&sv, 1e-9)
        });
        let inter = match (&self.cola, xbar_c) {
            (Some(cola), Some(xbar)) => {
                let phi = cola.hypernet.forward_value(xbar)?;
                let r = cola.hypernet.rank();
                let gate = match &cola.lambda {
                    Some(l) => l.value().data()[0].as_f64(),
                    None => self.lora_scale,
                };
                let mut core = Mat::zeros(r, r);
                for i in 0..r {
                    for j in 0..r {
                        *core.at_mut(i, j) = gate * phi.at2(i, j).as_f64();
                    }
                }
                let sv = low_rank_singular_values(&to_mat(&cola.b), &core, &to_mat(&cola.a));
                Some(numerical_rank(&sv, 1e-9))
            }
            _ => None,
        };
        Ok(DeltaRanks { intra, inter })
    }

    /// Adapter tensors as `{path}/{tensor}` entries. Aliased factors appear
    /// under both pathway names.
    pub fn adapter_params(&self) -> Vec<(String, Param<T>)> {
        let mut out = Vec::new();
        if let Some(lora) = &self.lora {
            out.push(("lora/a".to_string(), lora.a.clone()));
            out.push(("lora/b".to_string(), lora.b.clone()));
        }
        if let Some(cola) = &self.cola {
            out.push(("cola/a".to_string(), cola.a.clone()));
            out.push(("cola/b".to_string(), cola.b.clone()));
            if let Some(lambda) = &cola.lambda {
                out.push(("cola/lambda".to_string(), lambda.clone()));
            }
            for (name, p) in cola.hypernet.params() {
                out.push((format!("cola/{name}"), (*p).clone()));
            }
        }
        out
    }

    /// Frozen base tensors as `{path}/{tensor}` entries.
    pub fn base_params(&self) -> Vec<(String, Param<T>)> {
        let mut out = vec![("base/w0".to_string(), self.w0.clone())];
        if let Some(b0) = &self.b0 {
            out.push(("base/b0".to_string(), b0.clone()));
        }
        out
    }

    /// Trainable parameter count, counting aliased storage once.
    pub fn trainable_param_count(&self) -> usize {
        let mut seen = std::collections::HashSet::new();
        self.adapter_params()
            .iter()
            .filter(|(_, p)| p.is_trainable() && seen.insert(p.ptr_id()))
            .map(|(_, p)| p.numel())
            .sum()
    }
}

/// Numerical ranks of the materialized pathway deltas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeltaRanks {
    pub intra: Option<usize>,
    pub inter: Option<usize>,
}
