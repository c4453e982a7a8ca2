//! Neural building blocks: linear layers, two-layer MLPs, layer norm
//! parameters, multi-head attention, and the transformer decoder block the
//! enhancement and fusion stages are assembled from.
//!
//! Parameter structs own plain tensors. `bind` attaches a parameter set to a
//! tape before a differentiable forward pass; the trainer reads gradients
//! back through the bound copy. Every struct reports its tensors through
//! [`ParamSet::visit`] in a fixed order, which is the canonical order for
//! checkpoints and optimizer state.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{concat, stack, Precision, Tape, Tensor};

/// Deterministic generator used for every random draw in the crate.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn xavier_uniform(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng, p: Precision) -> Tensor {
    let bound = (6.0 / (d_in + d_out) as f64).sqrt();
    let data = (0..d_in * d_out)
        .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound)
        .collect();
    Tensor::from_vec_p(&[d_in, d_out], data, p).expect("init shape")
}

/// Visitor over a parameter set's tensors in canonical order.
pub trait ParamSet {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    /// Re-registers every tensor as a leaf on `tape` so gradients can be
    /// read back after a backward pass.
    fn bind(&mut self, tape: &Tape) {
        self.visit_mut("", &mut |_, t| *t = tape.var(t));
    }
}

/// Affine map `x[n, d_in] -> x W + b` with `W: [d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    /// Xavier-uniform weight in `[-sqrt(6/(d_in+d_out)), +...]`, zero bias.
    pub fn init(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng, p: Precision) -> Self {
        LinearParams {
            weight: xavier_uniform(d_in, d_out, rng, p),
            bias: Tensor::zeros_p(&[d_out], p),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add_bias(&self.bias)
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl ParamSet for LinearParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Two affine layers with a ReLU between them.
#[derive(Clone, Debug)]
pub struct MlpParams {
    pub hidden: LinearParams,
    pub out: LinearParams,
}

impl MlpParams {
    pub fn init(
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
        p: Precision,
    ) -> Self {
        MlpParams {
            hidden: LinearParams::init(d_in, d_hidden, rng, p),
            out: LinearParams::init(d_hidden, d_out, rng, p),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.out.forward(&self.hidden.forward(x)?.relu()?)
    }
}

impl ParamSet for MlpParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.hidden.visit(&format!("{prefix}.hidden"), f);
        self.out.visit(&format!("{prefix}.out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.hidden.visit_mut(&format!("{prefix}.hidden"), f);
        self.out.visit_mut(&format!("{prefix}.out"), f);
    }
}

/// Scale/shift for layer normalization over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn init(d: usize, p: Precision) -> Self {
        LayerNormParams {
            gamma: Tensor::from_vec_p(&[d], vec![1.0; d], p).expect("init shape"),
            beta: Tensor::zeros_p(&[d], p),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, self.eps)
    }
}

impl ParamSet for LayerNormParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }
}

/// Multi-head attention projections. Full `[d, d]` query/key/value maps;
/// head `h` reads columns `h*d/H .. (h+1)*d/H` of each projection.
#[derive(Clone, Debug)]
pub struct MhaParams {
    pub wq: LinearParams,
    pub wk: LinearParams,
    pub wv: LinearParams,
    pub wo: LinearParams,
    pub heads: usize,
}

impl MhaParams {
    pub fn init(d: usize, heads: usize, rng: &mut ChaCha8Rng, p: Precision) -> Self {
        assert!(heads > 0 && d % heads == 0, "head count must divide width");
        MhaParams {
            wq: LinearParams::init(d, d, rng, p),
            wk: LinearParams::init(d, d, rng, p),
            wv: LinearParams::init(d, d, rng, p),
            wo: LinearParams::init(d, d, rng, p),
            heads,
        }
    }

    pub fn width(&self) -> usize {
        self.wq.d_in()
    }
}

impl ParamSet for MhaParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.wq.visit(&format!("{prefix}.wq"), f);
        self.wk.visit(&format!("{prefix}.wk"), f);
        self.wv.visit(&format!("{prefix}.wv"), f);
        self.wo.visit(&format!("{prefix}.wo"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.wq.visit_mut(&format!("{prefix}.wq"), f);
        self.wk.visit_mut(&format!("{prefix}.wk"), f);
        self.wv.visit_mut(&format!("{prefix}.wv"), f);
        self.wo.visit_mut(&format!("{prefix}.wo"), f);
    }
}

pub struct MhaOutput {
    /// `[n_q, d]` attended and output-projected values.
    pub out: Tensor,
    /// `[heads, n_q, n_k]` post-softmax attention weights.
    pub attn: Tensor,
}

/// Scaled dot-product multi-head attention. Scores are `Q K^T / sqrt(d/H)`,
/// softmax over keys, per head on column slices of the projections.
pub fn mha(p: &MhaParams, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<MhaOutput> {
    let d = p.width();
    for (name, t) in [("q", q), ("k", k), ("v", v)] {
        if t.rank() != 2 || t.shape()[1] != d {
            return Err(Error::InvalidArgument {
                op: "mha",
                what: format!("{name} must be [n, {d}], got {:?}", t.shape()),
            });
        }
    }
    if k.shape()[0] != v.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "mha",
            left: k.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    }
    if k.shape()[0] == 0 {
        return Err(Error::EmptyInput { op: "mha" });
    }
    let qp = p.wq.forward(q)?;
    let kp = p.wk.forward(k)?;
    let vp = p.wv.forward(v)?;
    let dh = d / p.heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(p.heads);
    let mut attns = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = qp.narrow(1, h * dh, dh)?;
        let kh = kp.narrow(1, h * dh, dh)?;
        let vh = vp.narrow(1, h * dh, dh)?;
        let a = qh.matmul_nt(&kh)?.scale(inv_sqrt)?.softmax(1)?;
        outs.push(a.matmul(&vh)?);
        attns.push(a);
    }
    let out_refs: Vec<&Tensor> = outs.iter().collect();
    let attn_refs: Vec<&Tensor> = attns.iter().collect();
    Ok(MhaOutput {
        out: p.wo.forward(&concat(&out_refs, 1)?)?,
        attn: stack(&attn_refs, 0)?,
    })
}

/// Transformer decoder block: attention with residual and norm, then an MLP
/// with residual and norm, then a final linear map.
#[derive(Clone, Debug)]
pub struct TdParams {
    pub attn: MhaParams,
    pub norm_attn: LayerNormParams,
    pub mlp: MlpParams,
    pub norm_mlp: LayerNormParams,
    pub out: LinearParams,
}

impl TdParams {
    pub fn init(
        d: usize,
        heads: usize,
        d_mlp_hidden: usize,
        rng: &mut ChaCha8Rng,
        p: Precision,
    ) -> Self {
        TdParams {
            attn: MhaParams::init(d, heads, rng, p),
            norm_attn: LayerNormParams::init(d, p),
            mlp: MlpParams::init(d, d_mlp_hidden, d, rng, p),
            norm_mlp: LayerNormParams::init(d, p),
            out: LinearParams::init(d, d, rng, p),
        }
    }
}

impl ParamSet for TdParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.norm_attn.visit(&format!("{prefix}.norm_attn"), f);
        self.mlp.visit(&format!("{prefix}.mlp"), f);
        self.norm_mlp.visit(&format!("{prefix}.norm_mlp"), f);
        self.out.visit(&format!("{prefix}.out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.norm_attn.visit_mut(&format!("{prefix}.norm_attn"), f);
        self.mlp.visit_mut(&format!("{prefix}.mlp"), f);
        self.norm_mlp.visit_mut(&format!("{prefix}.norm_mlp"), f);
        self.out.visit_mut(&format!("{prefix}.out"), f);
    }
}

/// `Q = LN(Attention(q, k, v) + q); out = Linear(LN(MLP(Q) + Q))`.
pub fn td(p: &TdParams, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let attended = mha(&p.attn, q, k, v)?;
    let q1 = p.norm_attn.forward(&attended.out.add(q)?)?;
    let q2 = p.norm_mlp.forward(&p.mlp.forward(&q1)?.add(&q1)?)?;
    p.out.forward(&q2)
}

/// The decoder block with the input attending to itself.
pub fn self_attention_block(p: &TdParams, x: &Tensor) -> Result<Tensor> {
    td(p, x, x, x)
}
