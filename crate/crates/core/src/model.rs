//! Transformer encoder over (zone, cell) token sequences.
//!
//! Each input row is `zone_embed + cell_embed + te(minute)`, where `te` is a
//! fixed sinusoidal encoding of the minute of day. The rows go through a stack
//! of pre-norm self-attention blocks (full bidirectional attention), a final
//! layer norm, then two separate affine heads: mean pooling followed by the
//! representation head, and a per-token masked-cell-prediction head.
//!
//! Forward and backward passes are hand-written; `forward_batch` keeps the
//! activations that `backward_batch` needs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::TokenPair;
use crate::error::{Error, Result};
use crate::tensor::{
    gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, linear, linear_backward,
    softmax_rows, MatMut, MatRef, Tensor,
};

pub const MAX_MINUTE: u16 = 1440;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_hid: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub cell_vocab_size: usize,
    pub zone_vocab_size: usize,
}

impl ModelConfig {
    /// d_model 256, d_hid 1024, 8 layers of 8 heads.
    pub fn dagger(zone_vocab_size: usize, cell_vocab_size: usize) -> Self {
        Self {
            d_model: 256,
            d_hid: 1024,
            n_layers: 8,
            n_heads: 8,
            cell_vocab_size,
            zone_vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("d_hid", self.d_hid),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("cell_vocab_size", self.cell_vocab_size),
            ("zone_vocab_size", self.zone_vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be > 0")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config("d_model must be even for the sinusoid".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Sinusoid of an arbitrary position `j`: `sin(j / 10000^(2m/d))` at even
/// index `2m`, the matching cosine at `2m + 1`.
pub fn sinusoid(j: f64, d_model: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; d_model];
    for m in 0..d_model / 2 {
        let angle = j / 10000f64.powf(2.0 * m as f64 / d_model as f64);
        out[2 * m] = angle.sin() as f32;
        out[2 * m + 1] = angle.cos() as f32;
    }
    out
}

/// Minute-of-day encoding for `t` in `[1, 1440]`.
pub fn timestamp_encoding(t: u16, d_model: usize) -> Result<Vec<f32>> {
    if !(1..=MAX_MINUTE).contains(&t) {
        return Err(Error::invalid("t", format!("minute {t} outside [1, 1440]")));
    }
    Ok(sinusoid(t as f64, d_model))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

const LAYER_FIELDS: [&str; 16] = [
    "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b", "w1",
    "b1", "w2", "b2",
];

impl LayerParams {
    fn zeros(d: usize, h: usize) -> Self {
        Self {
            ln1_g: Tensor::zeros(&[d]),
            ln1_b: Tensor::zeros(&[d]),
            wq: Tensor::zeros(&[d, d]),
            bq: Tensor::zeros(&[d]),
            wk: Tensor::zeros(&[d, d]),
            bk: Tensor::zeros(&[d]),
            wv: Tensor::zeros(&[d, d]),
            bv: Tensor::zeros(&[d]),
            wo: Tensor::zeros(&[d, d]),
            bo: Tensor::zeros(&[d]),
            ln2_g: Tensor::zeros(&[d]),
            ln2_b: Tensor::zeros(&[d]),
            w1: Tensor::zeros(&[d, h]),
            b1: Tensor::zeros(&[h]),
            w2: Tensor::zeros(&[h, d]),
            b2: Tensor::zeros(&[d]),
        }
    }

    fn fields(&self) -> [&Tensor; 16] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv,
            &self.wo, &self.bo, &self.ln2_g, &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.wq, &mut self.bq, &mut self.wk,
            &mut self.bk, &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo,
            &mut self.ln2_g, &mut self.ln2_b, &mut self.w1, &mut self.b1, &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// All trainable tensors. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub zone_emb: Tensor,
    pub cell_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub rep_w: Tensor,
    pub rep_b: Tensor,
    pub mcp_w: Tensor,
    pub mcp_b: Tensor,
}

impl Params {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            zone_emb: Tensor::zeros(&[cfg.zone_vocab_size, d]),
            cell_emb: Tensor::zeros(&[cfg.cell_vocab_size, d]),
            layers: (0..cfg.n_layers).map(|_| LayerParams::zeros(d, cfg.d_hid)).collect(),
            lnf_g: Tensor::zeros(&[d]),
            lnf_b: Tensor::zeros(&[d]),
            rep_w: Tensor::zeros(&[d, d]),
            rep_b: Tensor::zeros(&[d]),
            mcp_w: Tensor::zeros(&[d, cfg.cell_vocab_size]),
            mcp_b: Tensor::zeros(&[cfg.cell_vocab_size]),
        }
    }

    /// Random initialization: N(0, 1) embeddings, Xavier-uniform attention
    /// projections with zero bias, U(+-1/sqrt(fan_in)) for the other linear
    /// maps, unit layer-norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(cfg);
        let normal = |t: &mut Tensor, rng: &mut ChaCha8Rng| {
            for x in t.data.iter_mut() {
                *x = StandardNormal.sample(rng);
            }
        };
        let uniform = |t: &mut Tensor, bound: f32, rng: &mut ChaCha8Rng| {
            for x in t.data.iter_mut() {
                *x = rng.gen_range(-bound..bound);
            }
        };
        let d = cfg.d_model as f32;
        let h = cfg.d_hid as f32;
        normal(&mut p.zone_emb, &mut rng);
        normal(&mut p.cell_emb, &mut rng);
        let xavier = (6.0 / (2.0 * d)).sqrt();
        for l in p.layers.iter_mut() {
            l.ln1_g.fill(1.0);
            l.ln2_g.fill(1.0);
            for w in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo] {
                uniform(w, xavier, &mut rng);
            }
            uniform(&mut l.w1, 1.0 / d.sqrt(), &mut rng);
            uniform(&mut l.b1, 1.0 / d.sqrt(), &mut rng);
            uniform(&mut l.w2, 1.0 / h.sqrt(), &mut rng);
            uniform(&mut l.b2, 1.0 / h.sqrt(), &mut rng);
        }
        p.lnf_g.fill(1.0);
        uniform(&mut p.rep_w, 1.0 / d.sqrt(), &mut rng);
        uniform(&mut p.rep_b, 1.0 / d.sqrt(), &mut rng);
        uniform(&mut p.mcp_w, 1.0 / d.sqrt(), &mut rng);
        uniform(&mut p.mcp_b, 1.0 / d.sqrt(), &mut rng);
        p
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|(_, t)| t.fill(0.0));
        z
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("zone_emb".into(), &self.zone_emb),
            ("cell_emb".into(), &self.cell_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_FIELDS.iter().zip(l.fields()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("rep_w".into(), &self.rep_w));
        out.push(("rep_b".into(), &self.rep_b));
        out.push(("mcp_w".into(), &self.mcp_w));
        out.push(("mcp_b".into(), &self.mcp_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("zone_emb".into(), &mut self.zone_emb),
            ("cell_emb".into(), &mut self.cell_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (name, t) in LAYER_FIELDS.iter().zip(l.fields_mut()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("lnf_g".into(), &mut self.lnf_g));
        out.push(("lnf_b".into(), &mut self.lnf_b));
        out.push(("rep_w".into(), &mut self.rep_w));
        out.push(("rep_b".into(), &mut self.rep_b));
        out.push(("mcp_w".into(), &mut self.mcp_w));
        out.push(("mcp_b".into(), &mut self.mcp_b));
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// One input sequence: tokens with the 1-based minute of each row.
#[derive(Debug, Clone, Copy)]
pub struct Sequence<'a> {
    pub tokens: &'a [TokenPair],
    pub minutes: &'a [u16],
}

struct LayerCache {
    xhat1: Vec<f32>,
    rstd1: Vec<f32>,
    h1: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    probs: Vec<f32>,
    attn: Vec<f32>,
    xhat2: Vec<f32>,
    rstd2: Vec<f32>,
    h2: Vec<f32>,
    u: Vec<f32>,
    g: Vec<f32>,
}

/// Activations of one batched forward pass.
pub struct BatchForward {
    /// Row offset and length of each sequence in the stacked buffers.
    pub spans: Vec<(usize, usize)>,
    tokens: Vec<TokenPair>,
    layers: Vec<LayerCache>,
    xhatf: Vec<f32>,
    rstdf: Vec<f32>,
    /// Token outputs `F`, `[rows, d_model]`.
    pub outputs: Vec<f32>,
    pooled: Vec<f32>,
    /// Representations, `[sequences, d_model]`.
    pub reps: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: ModelConfig,
    pub params: Params,
    /// Hash of the vocabulary the embedding tables were built for.
    pub vocab_hash: String,
    te: Vec<f32>,
}

impl Encoder {
    pub fn new(config: ModelConfig, vocab_hash: impl Into<String>, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, seed);
        Ok(Self::from_params(config, params, vocab_hash))
    }

    pub fn from_params(config: ModelConfig, params: Params, vocab_hash: impl Into<String>) -> Self {
        let d = config.d_model;
        let mut te = Vec::with_capacity((MAX_MINUTE as usize + 1) * d);
        for t in 0..=MAX_MINUTE {
            te.extend(sinusoid(t as f64, d));
        }
        Self {
            config,
            params,
            vocab_hash: vocab_hash.into(),
            te,
        }
    }

    fn te_row(&self, t: u16) -> &[f32] {
        let d = self.config.d_model;
        &self.te[t as usize * d..(t as usize + 1) * d]
    }

    fn check_tokens(&self, tokens: &[TokenPair], minutes: &[u16]) -> Result<()> {
        if tokens.len() != minutes.len() {
            return Err(Error::invalid("minutes", "one minute per token required"));
        }
        for t in tokens {
            if t.zone as usize >= self.config.zone_vocab_size {
                return Err(Error::invalid("zone_token", format!("{} out of range", t.zone)));
            }
            if t.cell as usize >= self.config.cell_vocab_size {
                return Err(Error::invalid("cell_token", format!("{} out of range", t.cell)));
            }
        }
        if let Some(m) = minutes.iter().find(|m| !(1..=MAX_MINUTE).contains(*m)) {
            return Err(Error::invalid("minute", format!("{m} outside [1, 1440]")));
        }
        Ok(())
    }

    /// Rows `zone_embed + cell_embed + te(minute)`.
    pub fn embed(&self, tokens: &[TokenPair], minutes: &[u16]) -> Result<Tensor> {
        self.check_tokens(tokens, minutes)?;
        let d = self.config.d_model;
        let mut out = Tensor::zeros(&[tokens.len(), d]);
        self.embed_into(tokens, minutes, &mut out.data);
        Ok(out)
    }

    fn embed_into(&self, tokens: &[TokenPair], minutes: &[u16], out: &mut [f32]) {
        let d = self.config.d_model;
        for (i, (tok, &m)) in tokens.iter().zip(minutes).enumerate() {
            let z = self.params.zone_emb.row(tok.zone as usize);
            let c = self.params.cell_emb.row(tok.cell as usize);
            let te = self.te_row(m);
            for (j, o) in out[i * d..(i + 1) * d].iter_mut().enumerate() {
                *o = z[j] + c[j] + te[j];
            }
        }
    }

    /// Embeds a sequence whose row `j` (0-based) sits at minute `start_t + j`.
    pub fn embed_sequence(&self, tokens: &[TokenPair], start_t: u16) -> Result<Tensor> {
        if start_t == 0 || start_t as usize + tokens.len() > MAX_MINUTE as usize + 1 {
            return Err(Error::invalid(
                "start_t",
                format!("rows {start_t}..{} leave [1, 1440]", start_t as usize + tokens.len()),
            ));
        }
        let minutes: Vec<u16> = (0..tokens.len() as u16).map(|j| start_t + j).collect();
        self.embed(tokens, &minutes)
    }

    /// Token outputs `F` of one embedded sequence.
    pub fn encode(&self, emb: &Tensor) -> Result<Tensor> {
        let d = self.config.d_model;
        if emb.cols() != d {
            return Err(Error::invalid("embedding", format!("expected width {d}")));
        }
        let rows = emb.rows();
        let (y, _) = self.run_layers(emb.data.clone(), &[(0, rows)], false)?;
        Ok(Tensor::from_vec(&[rows, d], y))
    }

    /// Mean over token outputs followed by the representation head.
    pub fn represent(&self, f: &Tensor) -> Result<Vec<f32>> {
        if f.is_empty() || f.rows() == 0 {
            return Err(Error::invalid("F", "no token outputs to pool"));
        }
        let d = self.config.d_model;
        let pooled = mean_rows(&f.data, d);
        let mut out = vec![0.0; d];
        linear(&pooled, 1, &self.params.rep_w, &self.params.rep_b, &mut out);
        Ok(out)
    }

    /// MCP logits for the 1-based positions in `delta`.
    pub fn mcp_logits(&self, f: &Tensor, delta: &[u8]) -> Result<Vec<(u8, Vec<f32>)>> {
        let rows = f.rows();
        let d = self.config.d_model;
        let c = self.config.cell_vocab_size;
        if let Some(bad) = delta.iter().find(|&&j| j == 0 || j as usize > rows) {
            return Err(Error::invalid("delta", format!("index {bad} outside [1, {rows}]")));
        }
        let gathered: Vec<f32> = delta
            .iter()
            .flat_map(|&j| f.row(j as usize - 1).iter().copied())
            .collect();
        let mut logits = vec![0.0; delta.len() * c];
        linear(&gathered, delta.len(), &self.params.mcp_w, &self.params.mcp_b, &mut logits);
        debug_assert_eq!(gathered.len(), delta.len() * d);
        Ok(delta
            .iter()
            .zip(logits.chunks_exact(c))
            .map(|(&j, l)| (j, l.to_vec()))
            .collect())
    }

    /// Representation of a full trajectory (no masking).
    pub fn representation(&self, tokens: &[TokenPair], minutes: &[u16]) -> Result<Vec<f32>> {
        let emb = self.embed(tokens, minutes)?;
        let f = self.encode(&emb)?;
        self.represent(&f)
    }

    /// Batched forward pass that keeps activations for [`Self::backward_batch`].
    pub fn forward_batch(&self, seqs: &[Sequence<'_>]) -> Result<BatchForward> {
        let d = self.config.d_model;
        let mut spans = Vec::with_capacity(seqs.len());
        let mut rows = 0;
        for s in seqs {
            self.check_tokens(s.tokens, s.minutes)?;
            if s.tokens.is_empty() {
                return Err(Error::invalid("sequence", "empty sequence in batch"));
            }
            spans.push((rows, s.tokens.len()));
            rows += s.tokens.len();
        }
        let mut x = vec![0.0f32; rows * d];
        let mut tokens = Vec::with_capacity(rows);
        for (s, &(off, len)) in seqs.iter().zip(&spans) {
            self.embed_into(s.tokens, s.minutes, &mut x[off * d..(off + len) * d]);
            tokens.extend_from_slice(s.tokens);
        }
        let (outputs, cache) = self.run_layers(x, &spans, true)?;
        let (layers, xhatf, rstdf) = cache.expect("cache requested");
        let mut pooled = vec![0.0f32; spans.len() * d];
        for (i, &(off, len)) in spans.iter().enumerate() {
            pooled[i * d..(i + 1) * d].copy_from_slice(&mean_rows(&outputs[off * d..(off + len) * d], d));
        }
        let mut reps = vec![0.0f32; spans.len() * d];
        linear(&pooled, spans.len(), &self.params.rep_w, &self.params.rep_b, &mut reps);
        Ok(BatchForward {
            spans,
            tokens,
            layers,
            xhatf,
            rstdf,
            outputs,
            pooled,
            reps,
        })
    }

    #[allow(clippy::type_complexity)]
    fn run_layers(
        &self,
        mut x: Vec<f32>,
        spans: &[(usize, usize)],
        keep: bool,
    ) -> Result<(Vec<f32>, Option<(Vec<LayerCache>, Vec<f32>, Vec<f32>)>)> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let dh = cfg.d_hid;
        let heads = cfg.n_heads;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f32).sqrt();
        let rows = x.len() / d;
        let mut caches = Vec::with_capacity(if keep { cfg.n_layers } else { 0 });

        for (li, lp) in self.params.layers.iter().enumerate() {
            let mut xhat1 = if keep { vec![0.0; rows * d] } else { Vec::new() };
            let mut rstd1 = if keep { vec![0.0; rows] } else { Vec::new() };
            let mut h1 = vec![0.0; rows * d];
            layer_norm(
                &x,
                d,
                &lp.ln1_g,
                &lp.ln1_b,
                &mut h1,
                keep.then_some((&mut xhat1[..], &mut rstd1[..])),
            );
            let mut q = vec![0.0; rows * d];
            let mut k = vec![0.0; rows * d];
            let mut v = vec![0.0; rows * d];
            linear(&h1, rows, &lp.wq, &lp.bq, &mut q);
            linear(&h1, rows, &lp.wk, &lp.bk, &mut k);
            linear(&h1, rows, &lp.wv, &lp.bv, &mut v);

            let prob_len: usize = spans.iter().map(|&(_, l)| l * l).sum::<usize>() * heads;
            let mut probs = if keep { vec![0.0; prob_len] } else { Vec::new() };
            let mut scratch = Vec::new();
            let mut attn = vec![0.0; rows * d];
            let mut pofs = 0;
            for &(off, len) in spans {
                for h in 0..heads {
                    let p: &mut [f32] = if keep {
                        &mut probs[pofs..pofs + len * len]
                    } else {
                        scratch.resize(len * len, 0.0);
                        &mut scratch[..]
                    };
                    gemm(
                        scale,
                        MatRef::block(&q, d, off, len, h * hd, hd),
                        MatRef::block(&k, d, off, len, h * hd, hd).t(),
                        0.0,
                        MatMut::new(p, len, len),
                    );
                    softmax_rows(p, len);
                    gemm(
                        1.0,
                        MatRef::new(p, len, len),
                        MatRef::block(&v, d, off, len, h * hd, hd),
                        0.0,
                        MatMut::block(&mut attn, d, off, len, h * hd, hd),
                    );
                    pofs += len * len;
                }
            }
            let mut a = vec![0.0; rows * d];
            linear(&attn, rows, &lp.wo, &lp.bo, &mut a);
            for (xi, ai) in x.iter_mut().zip(&a) {
                *xi += ai;
            }
            drop(a);

            let mut xhat2 = if keep { vec![0.0; rows * d] } else { Vec::new() };
            let mut rstd2 = if keep { vec![0.0; rows] } else { Vec::new() };
            let mut h2 = vec![0.0; rows * d];
            layer_norm(
                &x,
                d,
                &lp.ln2_g,
                &lp.ln2_b,
                &mut h2,
                keep.then_some((&mut xhat2[..], &mut rstd2[..])),
            );
            let mut u = vec![0.0; rows * dh];
            linear(&h2, rows, &lp.w1, &lp.b1, &mut u);
            let g: Vec<f32> = u.iter().map(|&z| gelu(z)).collect();
            let mut f = vec![0.0; rows * d];
            linear(&g, rows, &lp.w2, &lp.b2, &mut f);
            for (xi, fi) in x.iter_mut().zip(&f) {
                *xi += fi;
            }
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    location: format!("encoder layer {li}"),
                });
            }
            if keep {
                caches.push(LayerCache {
                    xhat1,
                    rstd1,
                    h1,
                    q,
                    k,
                    v,
                    probs,
                    attn,
                    xhat2,
                    rstd2,
                    h2,
                    u,
                    g,
                });
            }
        }
        let mut y = vec![0.0; rows * d];
        let mut xhatf = if keep { vec![0.0; rows * d] } else { Vec::new() };
        let mut rstdf = if keep { vec![0.0; rows] } else { Vec::new() };
        layer_norm(
            &x,
            d,
            &self.params.lnf_g,
            &self.params.lnf_b,
            &mut y,
            keep.then_some((&mut xhatf[..], &mut rstdf[..])),
        );
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                location: "final layer norm".into(),
            });
        }
        Ok((y, keep.then_some((caches, xhatf, rstdf))))
    }

    /// Backpropagates `d_reps` (gradient w.r.t. each representation) and
    /// `d_outputs` (gradient w.r.t. the token outputs, e.g. from the MCP head)
    /// through the network, accumulating into `grads`.
    pub fn backward_batch(
        &self,
        fwd: &BatchForward,
        d_reps: &[f32],
        mut d_outputs: Vec<f32>,
        grads: &mut Params,
    ) {
        let cfg = &self.config;
        let d = cfg.d_model;
        let dh = cfg.d_hid;
        let heads = cfg.n_heads;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f32).sqrt();
        let n_seq = fwd.spans.len();
        let rows = fwd.outputs.len() / d;
        assert_eq!(d_reps.len(), n_seq * d);
        assert_eq!(d_outputs.len(), rows * d);

        // representation head and mean pooling
        let mut d_pooled = vec![0.0; n_seq * d];
        linear_backward(
            &fwd.pooled,
            n_seq,
            &self.params.rep_w,
            d_reps,
            &mut grads.rep_w,
            &mut grads.rep_b,
            Some(&mut d_pooled),
        );
        for (i, &(off, len)) in fwd.spans.iter().enumerate() {
            let inv = 1.0 / len as f32;
            let dp = &d_pooled[i * d..(i + 1) * d];
            for r in off..off + len {
                for (o, g) in d_outputs[r * d..(r + 1) * d].iter_mut().zip(dp) {
                    *o += g * inv;
                }
            }
        }

        let mut dx = vec![0.0; rows * d];
        layer_norm_backward(
            &d_outputs,
            &fwd.xhatf,
            &fwd.rstdf,
            d,
            &self.params.lnf_g,
            &mut grads.lnf_g,
            &mut grads.lnf_b,
            &mut dx,
        );

        for (li, c) in fwd.layers.iter().enumerate().rev() {
            let lp = &self.params.layers[li];
            let gl = &mut grads.layers[li];

            // feed-forward branch: x_out = x1 + W2 gelu(W1 LN2(x1))
            let mut dg = vec![0.0; rows * dh];
            linear_backward(&c.g, rows, &lp.w2, &dx, &mut gl.w2, &mut gl.b2, Some(&mut dg));
            for (g, &u) in dg.iter_mut().zip(&c.u) {
                *g *= gelu_grad(u);
            }
            let mut dh2 = vec![0.0; rows * d];
            linear_backward(&c.h2, rows, &lp.w1, &dg, &mut gl.w1, &mut gl.b1, Some(&mut dh2));
            drop(dg);
            // dx now holds d(x1) from the residual; add the LN2 path
            layer_norm_backward(
                &dh2, &c.xhat2, &c.rstd2, d, &lp.ln2_g, &mut gl.ln2_g, &mut gl.ln2_b, &mut dx,
            );

            // attention branch: x1 = x + Wo attn(LN1(x))
            let mut dattn = vec![0.0; rows * d];
            linear_backward(&c.attn, rows, &lp.wo, &dx, &mut gl.wo, &mut gl.bo, Some(&mut dattn));
            let mut dq = vec![0.0; rows * d];
            let mut dk = vec![0.0; rows * d];
            let mut dv = vec![0.0; rows * d];
            let mut dp_buf = Vec::new();
            let mut pofs = 0;
            for &(off, len) in &fwd.spans {
                for h in 0..heads {
                    let p = &c.probs[pofs..pofs + len * len];
                    // dP = dO V^T
                    dp_buf.resize(len * len, 0.0);
                    gemm(
                        1.0,
                        MatRef::block(&dattn, d, off, len, h * hd, hd),
                        MatRef::block(&c.v, d, off, len, h * hd, hd).t(),
                        0.0,
                        MatMut::new(&mut dp_buf, len, len),
                    );
                    // dV = P^T dO
                    gemm(
                        1.0,
                        MatRef::new(p, len, len).t(),
                        MatRef::block(&dattn, d, off, len, h * hd, hd),
                        0.0,
                        MatMut::block(&mut dv, d, off, len, h * hd, hd),
                    );
                    // softmax backward, in place: dS = P * (dP - rowsum(dP * P))
                    for (dpr, pr) in dp_buf.chunks_exact_mut(len).zip(p.chunks_exact(len)) {
                        let dot: f32 = dpr.iter().zip(pr).map(|(a, b)| a * b).sum();
                        for (x, &pv) in dpr.iter_mut().zip(pr) {
                            *x = pv * (*x - dot);
                        }
                    }
                    // dQ = scale dS K ; dK = scale dS^T Q
                    gemm(
                        scale,
                        MatRef::new(&dp_buf, len, len),
                        MatRef::block(&c.k, d, off, len, h * hd, hd),
                        0.0,
                        MatMut::block(&mut dq, d, off, len, h * hd, hd),
                    );
                    gemm(
                        scale,
                        MatRef::new(&dp_buf, len, len).t(),
                        MatRef::block(&c.q, d, off, len, h * hd, hd),
                        0.0,
                        MatMut::block(&mut dk, d, off, len, h * hd, hd),
                    );
                    pofs += len * len;
                }
            }
            drop(dattn);
            let mut dh1 = vec![0.0; rows * d];
            let mut tmp = vec![0.0; rows * d];
            linear_backward(&c.h1, rows, &lp.wq, &dq, &mut gl.wq, &mut gl.bq, Some(&mut dh1));
            linear_backward(&c.h1, rows, &lp.wk, &dk, &mut gl.wk, &mut gl.bk, Some(&mut tmp));
            dh1.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
            linear_backward(&c.h1, rows, &lp.wv, &dv, &mut gl.wv, &mut gl.bv, Some(&mut tmp));
            dh1.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
            layer_norm_backward(
                &dh1, &c.xhat1, &c.rstd1, d, &lp.ln1_g, &mut gl.ln1_g, &mut gl.ln1_b, &mut dx,
            );
        }

        // embeddings
        for (r, tok) in fwd.tokens.iter().enumerate() {
            let g = &dx[r * d..(r + 1) * d];
            for (a, b) in grads.zone_emb.row_mut(tok.zone as usize).iter_mut().zip(g) {
                *a += b;
            }
            for (a, b) in grads.cell_emb.row_mut(tok.cell as usize).iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    /// MCP logits for stacked rows `[n, d_model]`.
    pub fn mcp_forward(&self, rows: &[f32], n: usize) -> Vec<f32> {
        let mut logits = vec![0.0; n * self.config.cell_vocab_size];
        linear(rows, n, &self.params.mcp_w, &self.params.mcp_b, &mut logits);
        logits
    }

    /// Backward of [`Self::mcp_forward`]; returns the gradient w.r.t. the rows.
    pub fn mcp_backward(&self, rows: &[f32], n: usize, d_logits: &[f32], grads: &mut Params) -> Vec<f32> {
        let mut d_rows = vec![0.0; n * self.config.d_model];
        linear_backward(
            rows,
            n,
            &self.params.mcp_w,
            d_logits,
            &mut grads.mcp_w,
            &mut grads.mcp_b,
            Some(&mut d_rows),
        );
        d_rows
    }
}

fn mean_rows(x: &[f32], d: usize) -> Vec<f32> {
    let n = x.len() / d;
    let mut acc = vec![0.0f64; d];
    for r in x.chunks_exact(d) {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += *v as f64;
        }
    }
    acc.into_iter().map(|a| (a / n as f64) as f32).collect()
}
