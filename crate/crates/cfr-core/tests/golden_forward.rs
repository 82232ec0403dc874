//! Cross-check of the encoder forward pass against a from-scratch
//! re-implementation, plus frozen golden logits for the pinned seed.
//!
//! The oracle below deliberately shares no code with the crate's forward
//! path: plain nested vectors, its own patch extraction, layer norm,
//! attention, and MLP. Agreement ties the fast path to the written spec of
//! the architecture rather than to itself.

use cfr_core::model::{forward, ModelConfig, ModelParams};
use cfr_core::rng::DetRng;
use cfr_core::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

fn golden_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 4,
        num_channels: 1,
        num_blocks: 1,
        num_heads: 1,
        embed_dim: 4,
        mlp_dim: 8,
        num_classes: 2,
        seed: 7,
    }
}

fn golden_image() -> Tensor {
    let mut rng = DetRng::from_seed_stream(13, 9);
    Tensor::new(vec![1, 8, 8], (0..64).map(|_| rng.uniform_f64()).collect()).unwrap()
}

type Mat = Vec<Vec<f64>>;

/// y = x·Wᵀ + b, one row at a time.
fn affine(x: &Mat, w: &Tensor, b: &Tensor) -> Mat {
    x.iter()
        .map(|row| {
            (0..w.rows())
                .map(|o| {
                    let mut s = b.data()[o];
                    for (xi, wi) in row.iter().zip(w.row(o)) {
                        s += xi * wi;
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Mat, scale: &Tensor, offset: &Tensor) -> Mat {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * scale.data()[j] + offset.data()[j])
                .collect()
        })
        .collect()
}

fn gelu(v: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh())
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

fn oracle_forward(image: &Tensor, params: &ModelParams, config: &ModelConfig) -> Vec<f64> {
    let s = config.image_size;
    let p = config.patch_size;
    let per_side = s / p;
    let d = config.embed_dim;
    let hd = d / config.num_heads;

    let mut patches: Mat = Vec::new();
    for pr in 0..per_side {
        for pc in 0..per_side {
            let mut row = Vec::with_capacity(p * p);
            for y in 0..p {
                for x in 0..p {
                    row.push(image.data()[(pr * p + y) * s + (pc * p + x)]);
                }
            }
            patches.push(row);
        }
    }

    let projected = affine(&patches, &params.patch_proj, &params.patch_bias);
    let mut x: Mat = vec![params.cls_token.row(0).to_vec()];
    x.extend(projected);
    for (i, row) in x.iter_mut().enumerate() {
        for (v, pe) in row.iter_mut().zip(params.pos_embed.row(i)) {
            *v += pe;
        }
    }
    let t = x.len();

    for blk in &params.blocks {
        let ln1 = layer_norm(&x, &blk.ln1_scale, &blk.ln1_offset);
        let q = affine(&ln1, &blk.wq, &blk.bq);
        let k = affine(&ln1, &blk.wk, &blk.bk);
        let v = affine(&ln1, &blk.wv, &blk.bv);
        let mut context = vec![vec![0.0; d]; t];
        for h in 0..config.num_heads {
            let lo = h * hd;
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|j| {
                        let mut s = 0.0;
                        for c in lo..lo + hd {
                            s += q[i][c] * k[j][c];
                        }
                        s / (hd as f64).sqrt()
                    })
                    .collect();
                let attn = softmax(&scores);
                for (j, a) in attn.iter().enumerate() {
                    for c in lo..lo + hd {
                        context[i][c] += a * v[j][c];
                    }
                }
            }
        }
        let attn_out = affine(&context, &blk.wo, &blk.bo);
        let x_mid: Mat = x
            .iter()
            .zip(&attn_out)
            .map(|(a, b)| a.iter().zip(b).map(|(u, w)| u + w).collect())
            .collect();
        let ln2 = layer_norm(&x_mid, &blk.ln2_scale, &blk.ln2_offset);
        let hidden = affine(&ln2, &blk.w1, &blk.b1);
        let activated: Mat = hidden
            .iter()
            .map(|row| row.iter().map(|&v| gelu(v)).collect())
            .collect();
        let mlp_out = affine(&activated, &blk.w2, &blk.b2);
        x = x_mid
            .iter()
            .zip(&mlp_out)
            .map(|(a, b)| a.iter().zip(b).map(|(u, w)| u + w).collect())
            .collect();
    }

    let final_ln = layer_norm(&x, &params.final_scale, &params.final_offset);
    let cls = vec![final_ln[0].clone()];
    affine(&cls, &params.head_w, &params.head_b)[0].clone()
}

#[test]
fn forward_matches_independent_reimplementation() {
    let config = golden_config();
    let params = ModelParams::init(&config).unwrap();
    let image = golden_image();
    let (logits, _) = forward(&image, &params, &config).unwrap();
    let oracle = oracle_forward(&image, &params, &config);
    assert_eq!(logits.len(), oracle.len());
    for (a, b) in logits.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12, "forward {a:?} vs oracle {b:?}");
    }
}

#[test]
fn forward_matches_frozen_golden_logits() {
    let config = golden_config();
    let params = ModelParams::init(&config).unwrap();
    let (logits, _) = forward(&golden_image(), &params, &config).unwrap();
    // Frozen from the first verified run, cross-checked against the oracle.
    let golden: [f64; 2] = [-1.6421427623731824, -0.6187031568984152];
    for (a, g) in logits.iter().zip(&golden) {
        assert!((a - g).abs() < 1e-12, "logit {a:?} drifted from golden {g:?}");
    }
}

#[test]
fn wider_config_also_matches_the_oracle() {
    let config = ModelConfig {
        image_size: 8,
        patch_size: 2,
        num_channels: 1,
        num_blocks: 3,
        num_heads: 2,
        embed_dim: 6,
        mlp_dim: 12,
        num_classes: 3,
        seed: 23,
    };
    let params = ModelParams::init(&config).unwrap();
    let mut rng = DetRng::from_seed_stream(29, 9);
    let image = Tensor::new(vec![1, 8, 8], (0..64).map(|_| rng.uniform_f64()).collect()).unwrap();
    let (logits, _) = forward(&image, &params, &config).unwrap();
    let oracle = oracle_forward(&image, &params, &config);
    for (a, b) in logits.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12, "forward {a:?} vs oracle {b:?}");
    }
}
