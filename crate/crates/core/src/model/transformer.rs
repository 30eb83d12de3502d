//! Pre-norm transformer block shared by both generators.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::ParamSet;

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gain: usize,
    bias: usize,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        Self {
            gain: params.push_constant(format!("{name}.gain"), (1, dim), 1.0, true),
            bias: params.push_constant(format!("{name}.bias"), (1, dim), 0.0, true),
        }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, params: &'a ParamSet, x: Var) -> Var {
        let n = g.normalize(x);
        let gain = g.param(params, self.gain);
        let bias = g.param(params, self.bias);
        let scaled = g.mul_row(n, gain);
        g.add_row(scaled, bias)
    }
}

/// Dense layer `x · W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: usize,
    bias: Option<usize>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight =
            params.push_normal(format!("{name}.weight"), (fan_in, fan_out), std, true, rng);
        let bias =
            bias.then(|| params.push_constant(format!("{name}.bias"), (1, fan_out), 0.0, true));
        Self { weight, bias }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, params: &'a ParamSet, x: Var) -> Var {
        let w = g.param(params, self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(params, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn weight(&self) -> usize {
        self.weight
    }
}

#[derive(Debug, Clone)]
pub struct TransformerBlock {
    ln_attn: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    num_heads: usize,
    head_dim: usize,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        num_heads: usize,
        ff_dim: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        Self {
            ln_attn: LayerNorm::new(params, &format!("{name}.ln_attn"), dim),
            query: Linear::new(params, &format!("{name}.query"), dim, dim, false, std, rng),
            key: Linear::new(params, &format!("{name}.key"), dim, dim, false, std, rng),
            value: Linear::new(params, &format!("{name}.value"), dim, dim, false, std, rng),
            out: Linear::new(params, &format!("{name}.out"), dim, dim, true, std, rng),
            ln_ff: LayerNorm::new(params, &format!("{name}.ln_ff"), dim),
            ff_in: Linear::new(
                params,
                &format!("{name}.ff_in"),
                dim,
                ff_dim,
                true,
                std,
                rng,
            ),
            ff_out: Linear::new(
                params,
                &format!("{name}.ff_out"),
                ff_dim,
                dim,
                true,
                1.0 / (ff_dim as f64).sqrt(),
                rng,
            ),
            num_heads,
            head_dim: dim / num_heads,
        }
    }

    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        params: &'a ParamSet,
        h: Var,
        causal: bool,
    ) -> Var {
        let x = self.ln_attn.forward(g, params, h);
        let q = self.query.forward(g, params, x);
        let k = self.key.forward(g, params, x);
        let v = self.value.forward(g, params, x);
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.num_heads);
        for i in 0..self.num_heads {
            let start = i * self.head_dim;
            let qh = g.col_slice(q, start, self.head_dim);
            let kh = g.col_slice(k, start, self.head_dim);
            let vh = g.col_slice(v, start, self.head_dim);
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores, causal);
            heads.push(g.matmul(attn, vh));
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        };
        let attn_out = self.out.forward(g, params, merged);
        let h = g.add(h, attn_out);

        let x = self.ln_ff.forward(g, params, h);
        let f = self.ff_in.forward(g, params, x);
        let f = g.gelu(f);
        let f = self.ff_out.forward(g, params, f);
        g.add(h, f)
    }
}

/// Fixed sinusoidal features, `rows x dim`, for positions `offset..offset+rows`.
pub fn sinusoidal(rows: usize, dim: usize, offset: usize) -> ndarray::Array2<f64> {
    let half = dim / 2;
    ndarray::Array2::from_shape_fn((rows, dim), |(r, c)| {
        let pos = (r + offset) as f64;
        let i = if c < half { c } else { c - half };
        let freq = (-(10_000f64).ln() * i as f64 / half.max(1) as f64).exp();
        if c < half {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}
