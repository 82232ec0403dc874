//! Manual backward pass.
//!
//! One engine drives both uses: seeded with softmax−onehot it yields the
//! cross-entropy parameter gradients, seeded with onehot(target) it yields
//! the target-logit gradients. In both cases the gradient flowing into each
//! post-softmax attention matrix is recorded before the pass continues
//! through the softmax, which is exactly the quantity a finite difference on
//! the attention matrix itself measures.

use crate::error::{Error, Result};
use crate::tensor::{matmul, softmax_vec, Tensor};

use super::{
    gelu_prime, paste_cols, slice_cols, ActivationCache, ModelConfig, ModelParams,
};

pub struct BackwardOutputs {
    pub grads: ModelParams,
    pub attention_grads: Vec<Vec<Tensor>>,
}

/// Stable cross-entropy loss and its logit gradient (softmax − onehot).
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let loss = lse - logits[label];
    let mut dlogits = softmax_vec(logits);
    dlogits[label] -= 1.0;
    (loss, dlogits)
}

fn colsum(t: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; t.cols()];
    for i in 0..t.rows() {
        for (o, v) in out.iter_mut().zip(t.row(i)) {
            *o += v;
        }
    }
    out
}

fn add_into(dst: &mut Tensor, src: &Tensor) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

fn add_vec(dst: &mut Tensor, src: &[f64]) {
    for (d, s) in dst.data_mut().iter_mut().zip(src) {
        *d += s;
    }
}

/// Backward through one row-wise layer norm. Accumulates scale/offset
/// gradients and returns the input gradient.
fn layer_norm_backward(
    dy: &Tensor,
    x: &Tensor,
    means: &[f64],
    inv_stds: &[f64],
    scale: &Tensor,
    gscale: &mut Tensor,
    goffset: &mut Tensor,
) -> Tensor {
    let d = x.cols();
    let mut dx = Tensor::zeros(vec![x.rows(), d]);
    for i in 0..x.rows() {
        let dy_row = dy.row(i);
        let x_row = x.row(i);
        let inv_std = inv_stds[i];
        let mean = means[i];
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        let mut dxhat = vec![0.0; d];
        for j in 0..d {
            let xhat = (x_row[j] - mean) * inv_std;
            goffset.data_mut()[j] += dy_row[j];
            gscale.data_mut()[j] += dy_row[j] * xhat;
            dxhat[j] = dy_row[j] * scale.data()[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xhat;
        }
        m1 /= d as f64;
        m2 /= d as f64;
        let dx_row = dx.row_mut(i);
        for j in 0..d {
            let xhat = (x_row[j] - mean) * inv_std;
            dx_row[j] = inv_std * (dxhat[j] - m1 - xhat * m2);
        }
    }
    dx
}

/// Gradient of Σ_c dlogits[c]·logit[c] w.r.t. every parameter, plus the
/// recorded gradient on each post-softmax attention matrix.
pub(crate) fn backward_from_seed(
    params: &ModelParams,
    config: &ModelConfig,
    cache: &ActivationCache,
    dlogits: &[f64],
) -> Result<BackwardOutputs> {
    cache.check_valid(params)?;
    if cache.blocks.len() != config.num_blocks || dlogits.len() != config.num_classes {
        return Err(Error::Dimension(
            "cache or seed shape does not match config".into(),
        ));
    }
    let d = config.embed_dim;
    let t = config.num_tokens();
    let hd = config.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut grads = params.zeros_like();
    let mut attention_grads: Vec<Vec<Tensor>> = Vec::with_capacity(config.num_blocks);

    // Classifier head.
    let z = &cache.cls_embedding;
    let mut dz = vec![0.0; d];
    for c in 0..config.num_classes {
        grads.head_b.data_mut()[c] += dlogits[c];
        for j in 0..d {
            grads.head_w.data_mut()[c * d + j] += dlogits[c] * z[j];
            dz[j] += params.head_w.at(c, j) * dlogits[c];
        }
    }

    // Final layer norm; only the CLS row carries gradient.
    let mut dfinal = Tensor::zeros(vec![t, d]);
    dfinal.row_mut(0).copy_from_slice(&dz);
    let final_in = cache
        .blocks
        .last()
        .map(|b| &b.x_out)
        .unwrap_or(&cache.tokens0);
    let mut dx = layer_norm_backward(
        &dfinal,
        final_in,
        &cache.final_mean,
        &cache.final_inv_std,
        &params.final_scale,
        &mut grads.final_scale,
        &mut grads.final_offset,
    );

    for (b, blk) in params.blocks.iter().enumerate().rev() {
        let cb = &cache.blocks[b];
        let gb = &mut grads.blocks[b];

        // MLP branch of x_out = x_mid + mlp_out.
        let dm = &dx;
        add_into(&mut gb.w2, &matmul(&dm.transposed(), &cb.mlp_act)?);
        add_vec(&mut gb.b2, &colsum(dm));
        let dg = matmul(dm, &blk.w2)?;
        let mut du = dg;
        for (v, u) in du.data_mut().iter_mut().zip(cb.mlp_pre.data()) {
            *v *= gelu_prime(*u);
        }
        add_into(&mut gb.w1, &matmul(&du.transposed(), &cb.ln2_out)?);
        add_vec(&mut gb.b1, &colsum(&du));
        let dh2 = matmul(&du, &blk.w1)?;
        let dx_mid_ln = layer_norm_backward(
            &dh2,
            &cb.x_mid,
            &cb.ln2_mean,
            &cb.ln2_inv_std,
            &blk.ln2_scale,
            &mut gb.ln2_scale,
            &mut gb.ln2_offset,
        );
        let mut dx_mid = dx;
        add_into(&mut dx_mid, &dx_mid_ln);

        // Attention branch of x_mid = x_in + attn_out.
        let dattn_out = &dx_mid;
        add_into(&mut gb.wo, &matmul(&dattn_out.transposed(), &cb.context)?);
        add_vec(&mut gb.bo, &colsum(dattn_out));
        let dctx = matmul(dattn_out, &blk.wo)?;

        let mut dq = Tensor::zeros(vec![t, d]);
        let mut dk = Tensor::zeros(vec![t, d]);
        let mut dv = Tensor::zeros(vec![t, d]);
        let mut head_grads = Vec::with_capacity(config.num_heads);
        for h in 0..config.num_heads {
            let dctx_h = slice_cols(&dctx, h * hd, hd);
            let vh = slice_cols(&cb.v, h * hd, hd);
            let kh = slice_cols(&cb.k, h * hd, hd);
            let qh = slice_cols(&cb.q, h * hd, hd);
            let a = &cb.attention[h];

            // Gradient on the attention matrix itself, before softmax.
            let da = matmul(&dctx_h, &vh.transposed())?;
            paste_cols(&mut dv, &matmul(&a.transposed(), &dctx_h)?, h * hd);

            // Softmax backward per row.
            let mut ds = Tensor::zeros(vec![t, t]);
            for i in 0..t {
                let dot: f64 = da.row(i).iter().zip(a.row(i)).map(|(g, p)| g * p).sum();
                let ds_row = ds.row_mut(i);
                for j in 0..t {
                    ds_row[j] = a.at(i, j) * (da.at(i, j) - dot);
                }
            }
            paste_cols(&mut dq, &matmul(&ds, &kh)?.scale(scale), h * hd);
            paste_cols(&mut dk, &matmul(&ds.transposed(), &qh)?.scale(scale), h * hd);
            head_grads.push(da);
        }
        attention_grads.push(head_grads);

        add_into(&mut gb.wq, &matmul(&dq.transposed(), &cb.ln1_out)?);
        add_vec(&mut gb.bq, &colsum(&dq));
        add_into(&mut gb.wk, &matmul(&dk.transposed(), &cb.ln1_out)?);
        add_vec(&mut gb.bk, &colsum(&dk));
        add_into(&mut gb.wv, &matmul(&dv.transposed(), &cb.ln1_out)?);
        add_vec(&mut gb.bv, &colsum(&dv));

        let mut dh1 = matmul(&dq, &blk.wq)?;
        add_into(&mut dh1, &matmul(&dk, &blk.wk)?);
        add_into(&mut dh1, &matmul(&dv, &blk.wv)?);
        let dx_in_ln = layer_norm_backward(
            &dh1,
            &cb.x_in,
            &cb.ln1_mean,
            &cb.ln1_inv_std,
            &blk.ln1_scale,
            &mut gb.ln1_scale,
            &mut gb.ln1_offset,
        );
        dx = dx_mid;
        add_into(&mut dx, &dx_in_ln);
    }
    attention_grads.reverse();

    // Token embedding layer.
    add_into(&mut grads.pos_embed, &dx);
    for (g, v) in grads.cls_token.row_mut(0).iter_mut().zip(dx.row(0)) {
        *g += v;
    }
    let p = config.num_patches();
    let mut dproj = Tensor::zeros(vec![p, d]);
    for i in 0..p {
        dproj.row_mut(i).copy_from_slice(dx.row(i + 1));
    }
    add_into(&mut grads.patch_proj, &matmul(&dproj.transposed(), &cache.patches)?);
    add_vec(&mut grads.patch_bias, &colsum(&dproj));

    Ok(BackwardOutputs {
        grads,
        attention_grads,
    })
}

/// Cross-entropy gradients for every parameter.
pub fn backward_params(
    params: &ModelParams,
    config: &ModelConfig,
    cache: &ActivationCache,
    label: usize,
) -> Result<ModelParams> {
    if label >= config.num_classes {
        return Err(Error::Index(format!(
            "label {label} out of range for {} classes",
            config.num_classes
        )));
    }
    let (_, dlogits) = cross_entropy(&cache.logits, label);
    Ok(backward_from_seed(params, config, cache, &dlogits)?.grads)
}

/// ∂logit[target] / ∂A for every block and head, A taken post-softmax and
/// treated as an independent intermediate.
pub fn attention_gradients(
    params: &ModelParams,
    config: &ModelConfig,
    cache: &ActivationCache,
    target_class: usize,
) -> Result<Vec<Vec<Tensor>>> {
    if target_class >= config.num_classes {
        return Err(Error::Index(format!(
            "target class {target_class} out of range for {} classes",
            config.num_classes
        )));
    }
    let mut dlogits = vec![0.0; config.num_classes];
    dlogits[target_class] = 1.0;
    Ok(backward_from_seed(params, config, cache, &dlogits)?.attention_grads)
}

#[cfg(test)]
mod tests {
    use super::super::{forward, forward_with_attention_override, test_image, tiny_config};
    use super::*;

    fn loss_of(
        params: &ModelParams,
        config: &ModelConfig,
        image: &Tensor,
        label: usize,
    ) -> f64 {
        let (logits, _) = forward(image, params, config).unwrap();
        cross_entropy(&logits, label).0
    }

    #[test]
    fn zero_weight_head_gives_closed_form_bias_gradient() {
        let config = tiny_config();
        let mut params = ModelParams::init(&config).unwrap();
        params.head_w.data_mut().fill(0.0);
        params.head_b.data_mut().copy_from_slice(&[0.3, -0.2]);
        let image = test_image(&config, 1);
        let (logits, cache) = forward(&image, &params, &config).unwrap();
        let grads = backward_params(&params, &config, &cache, 1).unwrap();
        let mut expected = softmax_vec(&logits);
        expected[1] -= 1.0;
        for (g, e) in grads.head_b.data().iter().zip(&expected) {
            assert!((g - e).abs() < 1e-14);
        }
    }

    #[test]
    fn saturated_loss_has_vanishing_gradient() {
        let config = tiny_config();
        let mut params = ModelParams::init(&config).unwrap();
        params.head_w.data_mut().fill(0.0);
        params.head_b.data_mut().copy_from_slice(&[40.0, 0.0]);
        let image = test_image(&config, 2);
        let (_, cache) = forward(&image, &params, &config).unwrap();
        let grads = backward_params(&params, &config, &cache, 0).unwrap();
        let norm: f64 = grads
            .named_tensors()
            .iter()
            .flat_map(|(_, t)| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!(norm < 1e-6, "gradient norm {norm}");
    }

    #[test]
    fn stale_cache_is_rejected() {
        let config = tiny_config();
        let mut params = ModelParams::init(&config).unwrap();
        let image = test_image(&config, 3);
        let (_, cache) = forward(&image, &params, &config).unwrap();
        *params.blocks[0].wq.at_mut(0, 0) += 0.5;
        assert!(matches!(
            backward_params(&params, &config, &cache, 0),
            Err(Error::CacheInvalid(_))
        ));
        assert!(matches!(
            attention_gradients(&params, &config, &cache, 0),
            Err(Error::CacheInvalid(_))
        ));
    }

    #[test]
    fn label_out_of_range_is_an_index_error() {
        let config = tiny_config();
        let params = ModelParams::init(&config).unwrap();
        let image = test_image(&config, 3);
        let (_, cache) = forward(&image, &params, &config).unwrap();
        assert!(matches!(
            backward_params(&params, &config, &cache, 2),
            Err(Error::Index(_))
        ));
        assert!(matches!(
            attention_gradients(&params, &config, &cache, 5),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let config = tiny_config();
        let params = ModelParams::init(&config).unwrap();
        let image = test_image(&config, 4);
        let label = 1;
        let (_, cache) = forward(&image, &params, &config).unwrap();
        let grads = backward_params(&params, &config, &cache, label).unwrap();

        let step = 1e-5;
        let probes = [
            ("patch_proj", 3),
            ("cls_token", 1),
            ("pos_embed", 7),
            ("block0.wq", 5),
            ("block0.wk", 2),
            ("block0.wv", 9),
            ("block0.wo", 0),
            ("block0.bq", 1),
            ("block0.ln1_scale", 2),
            ("block0.ln2_offset", 3),
            ("block0.w1", 11),
            ("block0.b1", 4),
            ("block0.w2", 6),
            ("block0.b2", 0),
            ("final_scale", 1),
            ("head_w", 3),
            ("head_b", 0),
        ];
        for (name, idx) in probes {
            let analytic = grads
                .named_tensors()
                .into_iter()
                .find(|(n, _)| n == name)
                .unwrap()
                .1
                .data()[idx];
            let mut plus = params.clone();
            plus.tensors_mut()
                .into_iter()
                .find(|(n, _)| n == name)
                .unwrap()
                .1
                .data_mut()[idx] += step;
            let mut minus = params.clone();
            minus
                .tensors_mut()
                .into_iter()
                .find(|(n, _)| n == name)
                .unwrap()
                .1
                .data_mut()[idx] -= step;
            let fd = (loss_of(&plus, &config, &image, label)
                - loss_of(&minus, &config, &image, label))
                / (2.0 * step);
            let denom = analytic.abs().max(fd.abs());
            if denom > 1e-6 {
                let rel = (analytic - fd).abs() / denom;
                assert!(rel < 1e-4, "{name}[{idx}]: analytic {analytic}, fd {fd}");
            } else {
                assert!((analytic - fd).abs() < 1e-8, "{name}[{idx}]");
            }
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences_on_a() {
        let config = tiny_config();
        let params = ModelParams::init(&config).unwrap();
        let image = test_image(&config, 6);
        let target = 0;
        let (_, cache) = forward(&image, &params, &config).unwrap();
        let da = attention_gradients(&params, &config, &cache, target).unwrap();

        let step = 1e-5;
        let t = config.num_tokens();
        for &(i, j) in &[(0, 0), (0, 2), (1, 1), (2, 4), (4, 0)] {
            assert!(i < t && j < t);
            let base = &cache.blocks[0].attention[0];
            let mut plus = base.clone();
            *plus.at_mut(i, j) += step;
            let mut minus = base.clone();
            *minus.at_mut(i, j) -= step;
            let (lp, _) =
                forward_with_attention_override(&image, &params, &config, 0, 0, &plus).unwrap();
            let (lm, _) =
                forward_with_attention_override(&image, &params, &config, 0, 0, &minus).unwrap();
            let fd = (lp[target] - lm[target]) / (2.0 * step);
            let analytic = da[0][0].at(i, j);
            let denom = analytic.abs().max(fd.abs());
            if denom > 1e-6 {
                assert!(
                    (analytic - fd).abs() / denom < 1e-4,
                    "A[{i},{j}]: analytic {analytic}, fd {fd}"
                );
            } else {
                assert!((analytic - fd).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn attention_gradients_are_linear_in_the_logit_seed() {
        let config = tiny_config();
        let params = ModelParams::init(&config).unwrap();
        let image = test_image(&config, 8);
        let (_, cache) = forward(&image, &params, &config).unwrap();
        let da0 = attention_gradients(&params, &config, &cache, 0).unwrap();
        let da1 = attention_gradients(&params, &config, &cache, 1).unwrap();
        let sum = backward_from_seed(&params, &config, &cache, &[1.0, 1.0])
            .unwrap()
            .attention_grads;
        for b in 0..da0.len() {
            for h in 0..da0[b].len() {
                for idx in 0..da0[b][h].len() {
                    let lhs = da0[b][h].data()[idx] + da1[b][h].data()[idx];
                    let rhs = sum[b][h].data()[idx];
                    assert!((lhs - rhs).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn zeroed_value_path_kills_attention_gradients() {
        let config = tiny_config();
        let mut params = ModelParams::init(&config).unwrap();
        params.blocks[0].wv.data_mut().fill(0.0);
        params.blocks[0].bv.data_mut().fill(0.0);
        let image = test_image(&config, 9);
        let (_, cache) = forward(&image, &params, &config).unwrap();
        let da = attention_gradients(&params, &config, &cache, 1).unwrap();
        for h in &da[0] {
            assert!(h.data().iter().all(|&v| v == 0.0));
        }
    }
}
