use rand::Rng;

use super::{AttentionMask, Graph, Group, Matrix, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::Scalar;

/// Fully connected layer computing `x W^T + b` with `W: out x in`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        group: Group,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), group, out_dim, in_dim, in_dim, rng);
        let bias = store.add_uniform(format!("{name}.bias"), group, 1, out_dim, in_dim, rng);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn zeros<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        group: Group,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), group, Matrix::zeros(out_dim, in_dim));
        let bias = store.add(format!("{name}.bias"), group, Matrix::zeros(1, out_dim));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let (r, c) = g.shape(x);
        if c != self.in_dim {
            return Err(Error::dim("dense", (r, c), (self.out_dim, self.in_dim)));
        }
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let xw = g.matmul_t(x, false, w, true)?;
        g.add_row(xw, b)
    }
}

/// GRU cell with gate order (reset, update, candidate):
///
/// ```text
/// r  = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
/// u  = sigmoid(x W_iu + b_iu + h W_hu + b_hu)
/// c  = tanh(x W_ic + b_ic + r * (h W_hc + b_hc))
/// h' = (1 - u) * c + u * h
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub input: Dense,
    pub hidden: Dense,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        group: Group,
        in_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        // PyTorch-style: every GRU tensor uses 1/sqrt(hidden) bounds.
        let mut mk = |suffix: &str, cols: usize| {
            let w = store.add_uniform(
                format!("{name}.{suffix}.weight"),
                group,
                3 * hidden_dim,
                cols,
                hidden_dim,
                rng,
            );
            let b = store.add_uniform(
                format!("{name}.{suffix}.bias"),
                group,
                1,
                3 * hidden_dim,
                hidden_dim,
                rng,
            );
            Dense {
                weight: w,
                bias: b,
                in_dim: cols,
                out_dim: 3 * hidden_dim,
            }
        };
        let input = mk("ih", in_dim);
        let hidden = mk("hh", hidden_dim);
        Self {
            input,
            hidden,
            hidden_dim,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var, h: Var) -> Result<Var> {
        let hs = g.shape(h);
        if hs.1 != self.hidden_dim || hs.0 != g.shape(x).0 {
            return Err(Error::dim("gru hidden", hs, (g.shape(x).0, self.hidden_dim)));
        }
        let n = self.hidden_dim;
        let gi = self.input.forward(g, x)?;
        let gh = self.hidden.forward(g, h)?;
        let (ir, iu, ic) = (g.slice_cols(gi, 0, n)?, g.slice_cols(gi, n, n)?, g.slice_cols(gi, 2 * n, n)?);
        let (hr, hu, hc) = (g.slice_cols(gh, 0, n)?, g.slice_cols(gh, n, n)?, g.slice_cols(gh, 2 * n, n)?);
        let r = g.add(ir, hr)?;
        let r = g.sigmoid(r);
        let u = g.add(iu, hu)?;
        let u = g.sigmoid(u);
        let rc = g.mul(r, hc)?;
        let c = g.add(ic, rc)?;
        let c = g.tanh(c);
        let keep = g.affine(u, -S::one(), S::one());
        let a = g.mul(keep, c)?;
        let b = g.mul(u, h)?;
        g.add(a, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, group: Group, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), group, Matrix::filled(1, dim, S::one()));
        let beta = store.add(format!("{name}.beta"), group, Matrix::zeros(1, dim));
        Self { gamma, beta, dim }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Multi-head self-attention with input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub output: Dense,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        group: Group,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model width {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Dense::new(store, &format!("{name}.q"), group, dim, dim, rng),
            key: Dense::new(store, &format!("{name}.k"), group, dim, dim, rng),
            value: Dense::new(store, &format!("{name}.v"), group, dim, dim, rng),
            output: Dense::new(store, &format!("{name}.out"), group, dim, dim, rng),
            heads,
            dim,
        })
    }

    pub fn param_count(dim: usize) -> usize {
        4 * Dense::param_count(dim, dim)
    }

    /// Self-attention over groups of `group` consecutive rows of `x`.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        x: Var,
        group: usize,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let a = g.attention(q, k, v, self.heads, group, mask)?;
        self.output.forward(g, a)
    }
}

/// Pre-normalization transformer encoder layer:
/// `X = H + Drop(Attn(LN1(H)))`, `Y = X + Drop(FFN(LN2(X)))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn_in: Dense,
    pub ffn_out: Dense,
    pub dropout: f64,
    /// Distinguishes this layer's dropout stream.
    pub key: u64,
}

impl EncoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        group: Group,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        dropout: f64,
        key: u64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.ln1"), group, dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), group, dim, heads, rng)?,
            norm_ffn: LayerNorm::new(store, &format!("{name}.ln2"), group, dim),
            ffn_in: Dense::new(store, &format!("{name}.ffn1"), group, dim, ffn_dim, rng),
            ffn_out: Dense::new(store, &format!("{name}.ffn2"), group, ffn_dim, dim, rng),
            dropout,
            key,
        })
    }

    pub fn param_count(dim: usize, ffn_dim: usize) -> usize {
        2 * 2 * dim
            + MultiHeadAttention::param_count(dim)
            + Dense::param_count(dim, ffn_dim)
            + Dense::param_count(ffn_dim, dim)
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        h: Var,
        group: usize,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let k = self.key * 4;
        let n1 = self.norm_attn.forward(g, h)?;
        let a = self.attn.forward(g, n1, group, mask)?;
        let a = g.dropout(a, self.dropout, k);
        let x = g.add(h, a)?;
        let n2 = self.norm_ffn.forward(g, x)?;
        let f = self.ffn_in.forward(g, n2)?;
        let f = g.relu(f);
        let f = g.dropout(f, self.dropout, k + 1);
        let f = self.ffn_out.forward(g, f)?;
        let f = g.dropout(f, self.dropout, k + 2);
        g.add(x, f)
    }
}
