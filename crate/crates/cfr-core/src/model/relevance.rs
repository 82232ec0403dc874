//! Relevance propagation from the target logit back to the attention
//! matrices.
//!
//! Rules: ε-stabilized proportional redistribution through linear layers
//! (bias terms absorb no relevance), identity pass-through for layer norms
//! and GELU, proportional elementwise splits at residual joins, and
//! attention-weighted row mass at each attention-value mixing step. The
//! relevance recorded for A^(b)_h at entry (i,j) is the attention weight
//! times the total relevance arriving at output row i of that head.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{slice_cols, ActivationCache, ModelConfig, ModelParams};

/// Per-block, per-head gradient and relevance stacks for the fusion step.
#[derive(Debug, Clone)]
pub struct AttributionInputs {
    pub gradients: Vec<Vec<Tensor>>,
    pub relevance: Vec<Vec<Tensor>>,
}

impl AttributionInputs {
    pub fn new(gradients: Vec<Vec<Tensor>>, relevance: Vec<Vec<Tensor>>) -> Result<Self> {
        if gradients.len() != relevance.len() {
            return Err(Error::Dimension(
                "gradient and relevance block counts differ".into(),
            ));
        }
        for (gb, rb) in gradients.iter().zip(&relevance) {
            if gb.len() != rb.len() {
                return Err(Error::Dimension(
                    "gradient and relevance head counts differ".into(),
                ));
            }
            for (g, r) in gb.iter().zip(rb) {
                if g.dims() != r.dims() {
                    return Err(Error::Dimension(
                        "gradient and relevance tensor shapes differ".into(),
                    ));
                }
                if !g.data().iter().all(|v| v.is_finite())
                    || !r.data().iter().all(|v| v.is_finite())
                {
                    return Err(Error::Input(
                        "attribution tensors must be finite".into(),
                    ));
                }
            }
        }
        Ok(AttributionInputs {
            gradients,
            relevance,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RelevanceResult {
    /// R^(n_b)_h per block, per head; T×T each.
    pub per_block: Vec<Vec<Tensor>>,
    /// Total relevance arriving at the token embedding layer.
    pub input_total: f64,
    /// The target logit value used as the relevance seed.
    pub seed_value: f64,
}

fn stabilize(x: f64, epsilon: f64) -> f64 {
    if x >= 0.0 {
        x + epsilon
    } else {
        x - epsilon
    }
}

/// ε-rule through y = x·Wᵀ + b: relevance on y flows back to x proportional
/// to each term x_j·w_oj of the pre-bias sum.
fn eps_linear(r_out: &Tensor, input: &Tensor, w: &Tensor, epsilon: f64) -> Tensor {
    let mut r_in = Tensor::zeros(vec![input.rows(), input.cols()]);
    for t in 0..input.rows() {
        let x = input.row(t);
        for o in 0..w.rows() {
            let wrow = w.row(o);
            let pre: f64 = x.iter().zip(wrow).map(|(a, b)| a * b).sum();
            let factor = r_out.at(t, o) / stabilize(pre, epsilon);
            let r_row = r_in.row_mut(t);
            for j in 0..x.len() {
                r_row[j] += x[j] * wrow[j] * factor;
            }
        }
    }
    r_in
}

/// Proportional elementwise split of relevance on s = a + b.
fn split_residual(r: &Tensor, a: &Tensor, b: &Tensor, epsilon: f64) -> (Tensor, Tensor) {
    let mut ra = Tensor::zeros(a.dims().to_vec());
    let mut rb = Tensor::zeros(b.dims().to_vec());
    for i in 0..r.len() {
        let denom = stabilize(a.data()[i] + b.data()[i], epsilon);
        ra.data_mut()[i] = r.data()[i] * a.data()[i] / denom;
        rb.data_mut()[i] = r.data()[i] * b.data()[i] / denom;
    }
    (ra, rb)
}

/// Relevance of the target logit propagated back to every post-softmax
/// attention matrix.
pub fn lrp_relevance(
    params: &ModelParams,
    config: &ModelConfig,
    cache: &ActivationCache,
    target_class: usize,
    epsilon: f64,
) -> Result<RelevanceResult> {
    cache.check_valid(params)?;
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::Parameter(format!("epsilon must be positive, got {epsilon}")));
    }
    if target_class >= config.num_classes {
        return Err(Error::Index(format!(
            "target class {target_class} out of range for {} classes",
            config.num_classes
        )));
    }
    let d = config.embed_dim;
    let t = config.num_tokens();
    let hd = config.head_dim();
    let seed_value = cache.logits[target_class];

    // Head: distribute the target logit over the CLS embedding.
    let z = &cache.cls_embedding;
    let wrow = params.head_w.row(target_class);
    let pre: f64 = z.iter().zip(wrow).map(|(a, b)| a * b).sum();
    let factor = seed_value / stabilize(pre, epsilon);
    let mut r = Tensor::zeros(vec![t, d]);
    for j in 0..d {
        r.row_mut(0)[j] = z[j] * wrow[j] * factor;
    }
    // Final layer norm passes relevance through unchanged.

    let mut per_block: Vec<Vec<Tensor>> = vec![Vec::new(); config.num_blocks];
    for (b, blk) in params.blocks.iter().enumerate().rev() {
        let cb = &cache.blocks[b];

        // x_out = x_mid + mlp_out.
        let (r_mid_res, r_mlp) = split_residual(&r, &cb.x_mid, &cb.mlp_out, epsilon);
        // MLP: GELU and layer norm pass through.
        let r_act = eps_linear(&r_mlp, &cb.mlp_act, &blk.w2, epsilon);
        let r_h2 = eps_linear(&r_act, &cb.ln2_out, &blk.w1, epsilon);
        let mut r_mid = r_mid_res;
        for (dst, src) in r_mid.data_mut().iter_mut().zip(r_h2.data()) {
            *dst += src;
        }

        // x_mid = x_in + attn_out.
        let (r_in_res, r_attn) = split_residual(&r_mid, &cb.x_in, &cb.attn_out, epsilon);
        let r_ctx = eps_linear(&r_attn, &cb.context, &blk.wo, epsilon);

        let mut r_v = Tensor::zeros(vec![t, d]);
        let mut heads = Vec::with_capacity(config.num_heads);
        for h in 0..config.num_heads {
            let r_ctx_h = slice_cols(&r_ctx, h * hd, hd);
            let vh = slice_cols(&cb.v, h * hd, hd);
            let a = &cb.attention[h];

            // Attention record: row mass weighted by attention.
            let mut r_a = Tensor::zeros(vec![t, t]);
            for i in 0..t {
                let mass: f64 = r_ctx_h.row(i).iter().sum();
                let r_a_row = r_a.row_mut(i);
                for j in 0..t {
                    r_a_row[j] = a.at(i, j) * mass;
                }
            }
            heads.push(r_a);

            // Continue the stream through the value path: ctx_h = A·v_h.
            for i in 0..t {
                for k in 0..hd {
                    let ctx_ik: f64 = (0..t).map(|j| a.at(i, j) * vh.at(j, k)).sum();
                    let factor = r_ctx_h.at(i, k) / stabilize(ctx_ik, epsilon);
                    for j in 0..t {
                        *r_v.at_mut(j, h * hd + k) += a.at(i, j) * vh.at(j, k) * factor;
                    }
                }
            }
        }
        per_block[b] = heads;

        let r_h1 = eps_linear(&r_v, &cb.ln1_out, &blk.wv, epsilon);
        r = r_in_res;
        for (dst, src) in r.data_mut().iter_mut().zip(r_h1.data()) {
            *dst += src;
        }
    }

    Ok(RelevanceResult {
        per_block,
        input_total: r.sum(),
        seed_value,
    })
}

/// Degenerate baseline provider: relevance equals the attention weights.
pub fn attention_as_relevance(cache: &ActivationCache) -> Vec<Vec<Tensor>> {
    cache
        .blocks
        .iter()
        .map(|b| b.attention.clone())
        .collect()
}
