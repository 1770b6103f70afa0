//! Single-head transformer encoder layer with six adapter injection points:
//! the q/k/v projections, the attention output projection, and the FFN up
//! and down projections. Residuals follow the attention-output and FFN
//! stages; layer norm placement is pre-norm or none.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{init_adapted_linear, AdaptedLinear, AdapterConfig, AdapterKind};
use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::{Param, Tensor};

pub const ENCODER_COMPONENTS: [Component; 6] = [
    Component::Q,
    Component::K,
    Component::V,
    Component::O,
    Component::Up,
    Component::Down,
];

/// The six adapted linears of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Component {
    Q,
    K,
    V,
    O,
    Up,
    Down,
}

impl Component {
    pub fn name(self) -> &'static str {
        match self {
            Component::Q => "q",
            Component::K => "k",
            Component::V => "v",
            Component::O => "o",
            Component::Up => "up",
            Component::Down => "down",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    Mean,
    Cls,
}

impl Pooling {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(Pooling::Mean),
            "cls" => Ok(Pooling::Cls),
            other => Err(Error::config(format!("unknown pooling mode '{other}'"))),
        }
    }
}

/// Layer norm placement. The formulation without norms matches the bare
/// attention/FFN equations and is used by the hand-computed oracles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LnPlacement {
    PreNorm,
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_ffn: usize,
    pub n_layers: usize,
    pub pooling: Pooling,
    pub ln_placement: LnPlacement,
}

impl EncoderConfig {
    /// Conventional dims: d_k = d_v = d_model, d_ffn = 4 * d_model.
    pub fn base(d_model: usize, n_layers: usize) -> Self {
        EncoderConfig {
            d_model,
            d_k: d_model,
            d_v: d_model,
            d_ffn: 4 * d_model,
            n_layers,
            pooling: Pooling::Mean,
            ln_placement: LnPlacement::PreNorm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_k == 0 || self.d_v == 0 || self.n_layers == 0 {
            return Err(Error::config("encoder dims and layer count must be >= 1"));
        }
        if self.d_ffn < self.d_model {
            return Err(Error::config(format!(
                "d_ffn {} must be >= d_model {}",
                self.d_ffn, self.d_model
            )));
        }
        Ok(())
    }

    /// (d_in, d_out) of each injection point.
    pub fn component_dims(&self, c: Component) -> (usize, usize) {
        match c {
            Component::Q | Component::K => (self.d_model, self.d_k),
            Component::V => (self.d_model, self.d_v),
            Component::O => (self.d_v, self.d_model),
            Component::Up => (self.d_model, self.d_ffn),
            Component::Down => (self.d_ffn, self.d_model),
        }
    }
}

/// Frozen layer-norm affine parameters (part of the backbone).
#[derive(Debug, Clone)]
pub struct FrozenLayerNorm<T> {
    pub gain: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> FrozenLayerNorm<T> {
    fn identity(d: usize) -> Self {
        FrozenLayerNorm {
            gain: Param::frozen(Tensor::full(vec![d], 1.0)),
            bias: Param::frozen(Tensor::zeros(vec![d])),
        }
    }

    fn apply(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        let gain = g.param(&self.gain);
        let bias = g.param(&self.bias);
        g.layer_norm(x, Some(gain), Some(bias), crate::adapters::LN_EPS)
    }
}

pub struct EncoderLayer<T> {
    pub wq: AdaptedLinear<T>,
    pub wk: AdaptedLinear<T>,
    pub wv: AdaptedLinear<T>,
    pub wo: AdaptedLinear<T>,
    pub w_up: AdaptedLinear<T>,
    pub w_down: AdaptedLinear<T>,
    pub ln1: FrozenLayerNorm<T>,
    pub ln2: FrozenLayerNorm<T>,
    pub ln_placement: LnPlacement,
    pub activation: Activation,
    d_k: usize,
}

/// Attention stage output: the value mix plus the attention matrix
/// (right-stochastic; exposed for diagnostics).
pub struct AttnOutput {
    pub out: NodeId,
    pub probs: NodeId,
}

impl<T: Scalar> EncoderLayer<T> {
    /// Fresh layer with a random frozen backbone standing in for pretrained
    /// weights; adapters per `kind`.
    pub fn init(
        cfg: &EncoderConfig,
        d_c: usize,
        kind: AdapterKind,
        adapter: &AdapterConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut make = |c: Component| -> Result<AdaptedLinear<T>> {
            let (d_in, d_out) = cfg.component_dims(c);
            let w0 = Param::frozen(Tensor::xavier_uniform(
                vec![d_out, d_in],
                d_in,
                d_out,
                rng,
            ));
            let b0 = Param::frozen(Tensor::uniform(vec![d_out], 0.02, rng));
            init_adapted_linear(w0, Some(b0), d_c, kind, adapter, rng)
        };
        Ok(EncoderLayer {
            wq: make(Component::Q)?,
            wk: make(Component::K)?,
            wv: make(Component::V)?,
            wo: make(Component::O)?,
            w_up: make(Component::Up)?,
            w_down: make(Component::Down)?,
            ln1: FrozenLayerNorm::identity(cfg.d_model),
            ln2: FrozenLayerNorm::identity(cfg.d_model),
            ln_placement: cfg.ln_placement,
            activation: adapter.activation,
            d_k: cfg.d_k,
        })
    }

    pub fn component(&self, c: Component) -> &AdaptedLinear<T> {
        match c {
            Component::Q => &self.wq,
            Component::K => &self.wk,
            Component::V => &self.wv,
            Component::O => &self.wo,
            Component::Up => &self.w_up,
            Component::Down => &self.w_down,
        }
    }

    pub fn component_mut(&mut self, c: Component) -> &mut AdaptedLinear<T> {
        match c {
            Component::Q => &mut self.wq,
            Component::K => &mut self.wk,
            Component::V => &mut self.wv,
            Component::O => &mut self.wo,
            Component::Up => &mut self.w_up,
            Component::Down => &mut self.w_down,
        }
    }

    /// `softmax(q k^T / sqrt(d_k)) v` with adapted q/k/v projections.
    pub fn attn_stage(
        &self,
        g: &mut Graph<T>,
        x: NodeId,
        xbar_c: Option<NodeId>,
    ) -> Result<AttnOutput> {
        let xin = match self.ln_placement {
            LnPlacement::PreNorm => self.ln1.apply(g, x)?,
            LnPlacement::None => x,
        };
        let q = self.wq.forward(g, xin, xbar_c)?;
        let k = self.wk.forward(g, xin, xbar_c)?;
        let v = self.wv.forward(g, xin, xbar_c)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scaled = g.scale(scores, 1.0 / (self.d_k as f64).sqrt());
        let probs = g.softmax_rows(scaled)?;
        let out = g.matmul(probs, v)?;
        Ok(AttnOutput { out, probs })
    }

    /// Adapted output projection plus the residual from the layer input.
    pub fn out_proj_stage(
        &self,
        g: &mut Graph<T>,
        attn: NodeId,
        xbar_c: Option<NodeId>,
        residual: NodeId,
    ) -> Result<NodeId> {
        let o = self.wo.forward(g, attn, xbar_c)?;
        g.add(o, residual)
    }

    /// Adapted two-layer FFN plus the residual from the stage input.
    pub fn ffn_stage(&self, g: &mut Graph<T>, o: NodeId, xbar_c: Option<NodeId>) -> Result<NodeId> {
        let oin = match self.ln_placement {
            LnPlacement::PreNorm => self.ln2.apply(g, o)?,
            LnPlacement::None => o,
        };
        let u = self.w_up.forward(g, oin, xbar_c)?;
        let h = g.activation(u, self.activation);
        let down = self.w_down.forward(g, h, xbar_c)?;
        g.add(down, o)
    }
}

/// Token-sequence summary used as the hypernetwork input.
pub fn pool<T: Scalar>(g: &mut Graph<T>, x: NodeId, mode: Pooling) -> Result<NodeId> {
    match mode {
        Pooling::Mean => g.mean_rows(x),
        Pooling::Cls => g.row(x, 0),
    }
}

/// Token-id lookup plus learned position table.
#[derive(Debug, Clone)]
pub struct Embedding<T> {
    pub tokens: Param<T>,
    pub positions: Param<T>,
}

impl<T: Scalar> Embedding<T> {
    pub fn init(vocab: usize, max_len: usize, d_model: usize, rng: &mut impl Rng) -> Self {
        Embedding {
            tokens: Param::trainable(Tensor::uniform(vec![vocab, d_model], 0.1, rng)),
            positions: Param::trainable(Tensor::uniform(vec![max_len, d_model], 0.1, rng)),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, ids: &[usize]) -> Result<NodeId> {
        let table = g.param(&self.tokens);
        let tok = g.gather_rows(table, ids)?;
        let ptable = g.param(&self.positions);
        let idx: Vec<usize> = (0..ids.len()).collect();
        let pos = g.gather_rows(ptable, &idx)?;
        g.add(tok, pos)
    }
}
