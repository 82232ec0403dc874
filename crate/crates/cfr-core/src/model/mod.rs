//! Desk-scale transformer encoder classifier.
//!
//! Pre-norm blocks over a patch-token sequence with a learned CLS token at
//! index 0; the classifier head reads only the CLS position. The forward
//! pass caches every intermediate, so the manual backward pass and the
//! relevance pass can replay it without recomputation.

mod backward;
mod relevance;
mod train;

pub use backward::{attention_gradients, backward_params, cross_entropy, BackwardOutputs};
pub use relevance::{attention_as_relevance, lrp_relevance, AttributionInputs, RelevanceResult};
pub use train::{accuracy, smooth, train, TrainHyper, TrainOutcome};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_tensors, write_tensors};
use crate::error::{Error, Result};
use crate::rng::DetRng;
use crate::tensor::{matmul, matvec, softmax_rows, Tensor};

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub num_channels: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub embed_dim: usize,
    pub mlp_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.image_size,
            self.patch_size,
            self.num_channels,
            self.num_blocks,
            self.num_heads,
            self.embed_dim,
            self.mlp_dim,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(Error::Parameter("model dimensions must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Parameter("need at least 2 classes".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Dimension(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Dimension(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    /// Sequence length: patches plus the CLS token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.num_channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_scale: Tensor,
    pub ln1_offset: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_scale: Tensor,
    pub ln2_offset: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// All learned parameters. Weight matrices are stored [out_dim, in_dim] and
/// applied as y = x·Wᵀ + b.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub patch_proj: Tensor,
    pub patch_bias: Tensor,
    pub cls_token: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_scale: Tensor,
    pub final_offset: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

fn glorot(rng: &mut DetRng, out_dim: usize, in_dim: usize) -> Tensor {
    let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let data = (0..out_dim * in_dim).map(|_| rng.range_f64(-a, a)).collect();
    Tensor::new(vec![out_dim, in_dim], data).expect("well-formed init tensor")
}

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![1.0; n]).expect("well-formed")
}

impl ModelParams {
    /// Seeded uniform(−a, a) init with a = sqrt(6/(fan_in+fan_out)); biases
    /// and layer-norm offsets start at zero, layer-norm scales at one.
    pub fn init(config: &ModelConfig) -> Result<ModelParams> {
        config.validate()?;
        let d = config.embed_dim;
        let t = config.num_tokens();
        let mut rng = DetRng::from_seed_stream(config.seed, 100);
        let blocks = (0..config.num_blocks)
            .map(|_| BlockParams {
                ln1_scale: ones(d),
                ln1_offset: Tensor::zeros(vec![d]),
                wq: glorot(&mut rng, d, d),
                bq: Tensor::zeros(vec![d]),
                wk: glorot(&mut rng, d, d),
                bk: Tensor::zeros(vec![d]),
                wv: glorot(&mut rng, d, d),
                bv: Tensor::zeros(vec![d]),
                wo: glorot(&mut rng, d, d),
                bo: Tensor::zeros(vec![d]),
                ln2_scale: ones(d),
                ln2_offset: Tensor::zeros(vec![d]),
                w1: glorot(&mut rng, config.mlp_dim, d),
                b1: Tensor::zeros(vec![config.mlp_dim]),
                w2: glorot(&mut rng, d, config.mlp_dim),
                b2: Tensor::zeros(vec![d]),
            })
            .collect();
        Ok(ModelParams {
            patch_proj: glorot(&mut rng, d, config.patch_dim()),
            patch_bias: Tensor::zeros(vec![d]),
            cls_token: glorot(&mut rng, 1, d),
            pos_embed: glorot(&mut rng, t, d),
            blocks,
            final_scale: ones(d),
            final_offset: Tensor::zeros(vec![d]),
            head_w: glorot(&mut rng, config.num_classes, d),
            head_b: Tensor::zeros(vec![config.num_classes]),
        })
    }

    /// Zero-filled parameter set with the same shapes; gradient accumulator.
    pub fn zeros_like(&self) -> ModelParams {
        let mut out = self.clone();
        for (_, t) in out.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        out
    }

    /// Parameters in a fixed, documented order. Names double as the tensor
    /// container keys.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch_proj".into(), &self.patch_proj),
            ("patch_bias".into(), &self.patch_bias),
            ("cls_token".into(), &self.cls_token),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (b, blk) in self.blocks.iter().enumerate() {
            for (suffix, t) in [
                ("ln1_scale", &blk.ln1_scale),
                ("ln1_offset", &blk.ln1_offset),
                ("wq", &blk.wq),
                ("bq", &blk.bq),
                ("wk", &blk.wk),
                ("bk", &blk.bk),
                ("wv", &blk.wv),
                ("bv", &blk.bv),
                ("wo", &blk.wo),
                ("bo", &blk.bo),
                ("ln2_scale", &blk.ln2_scale),
                ("ln2_offset", &blk.ln2_offset),
                ("w1", &blk.w1),
                ("b1", &blk.b1),
                ("w2", &blk.w2),
                ("b2", &blk.b2),
            ] {
                out.push((format!("block{b}.{suffix}"), t));
            }
        }
        out.push(("final_scale".into(), &self.final_scale));
        out.push(("final_offset".into(), &self.final_offset));
        out.push(("head_w".into(), &self.head_w));
        out.push(("head_b".into(), &self.head_b));
        out
    }

    /// Mutable view in the same order as [`named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("patch_proj".into(), &mut self.patch_proj),
            ("patch_bias".into(), &mut self.patch_bias),
            ("cls_token".into(), &mut self.cls_token),
            ("pos_embed".into(), &mut self.pos_embed),
        ];
        for (b, blk) in self.blocks.iter_mut().enumerate() {
            for (suffix, t) in [
                ("ln1_scale", &mut blk.ln1_scale),
                ("ln1_offset", &mut blk.ln1_offset),
                ("wq", &mut blk.wq),
                ("bq", &mut blk.bq),
                ("wk", &mut blk.wk),
                ("bk", &mut blk.bk),
                ("wv", &mut blk.wv),
                ("bv", &mut blk.bv),
                ("wo", &mut blk.wo),
                ("bo", &mut blk.bo),
                ("ln2_scale", &mut blk.ln2_scale),
                ("ln2_offset", &mut blk.ln2_offset),
                ("w1", &mut blk.w1),
                ("b1", &mut blk.b1),
                ("w2", &mut blk.w2),
                ("b2", &mut blk.b2),
            ] {
                out.push((format!("block{b}.{suffix}"), t));
            }
        }
        out.push(("final_scale".into(), &mut self.final_scale));
        out.push(("final_offset".into(), &mut self.final_offset));
        out.push(("head_w".into(), &mut self.head_w));
        out.push(("head_b".into(), &mut self.head_b));
        out
    }

    /// FNV-1a over names, dims and f64 bit patterns; ties a cache to the
    /// exact parameter values it was computed from.
    pub fn hash64(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for (name, t) in self.named_tensors() {
            for b in name.as_bytes() {
                eat(*b);
            }
            for &dim in t.dims() {
                for b in (dim as u64).to_le_bytes() {
                    eat(b);
                }
            }
            for &v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        let d = config.embed_dim;
        if self.blocks.len() != config.num_blocks {
            return Err(Error::Dimension(format!(
                "params carry {} blocks, config expects {}",
                self.blocks.len(),
                config.num_blocks
            )));
        }
        let expect: Vec<(&str, &Tensor, Vec<usize>)> = {
            let mut v: Vec<(&str, &Tensor, Vec<usize>)> = vec![
                ("patch_proj", &self.patch_proj, vec![d, config.patch_dim()]),
                ("patch_bias", &self.patch_bias, vec![d]),
                ("cls_token", &self.cls_token, vec![1, d]),
                ("pos_embed", &self.pos_embed, vec![config.num_tokens(), d]),
                ("final_scale", &self.final_scale, vec![d]),
                ("final_offset", &self.final_offset, vec![d]),
                ("head_w", &self.head_w, vec![config.num_classes, d]),
                ("head_b", &self.head_b, vec![config.num_classes]),
            ];
            for blk in &self.blocks {
                v.push(("wq", &blk.wq, vec![d, d]));
                v.push(("wk", &blk.wk, vec![d, d]));
                v.push(("wv", &blk.wv, vec![d, d]));
                v.push(("wo", &blk.wo, vec![d, d]));
                v.push(("bq", &blk.bq, vec![d]));
                v.push(("bk", &blk.bk, vec![d]));
                v.push(("bv", &blk.bv, vec![d]));
                v.push(("bo", &blk.bo, vec![d]));
                v.push(("w1", &blk.w1, vec![config.mlp_dim, d]));
                v.push(("w2", &blk.w2, vec![d, config.mlp_dim]));
                v.push(("ln1_scale", &blk.ln1_scale, vec![d]));
                v.push(("ln1_offset", &blk.ln1_offset, vec![d]));
                v.push(("ln2_scale", &blk.ln2_scale, vec![d]));
                v.push(("ln2_offset", &blk.ln2_offset, vec![d]));
                v.push(("b1", &blk.b1, vec![config.mlp_dim]));
                v.push(("b2", &blk.b2, vec![d]));
            }
            v
        };
        for (name, t, dims) in expect {
            if t.dims() != dims.as_slice() {
                return Err(Error::Dimension(format!(
                    "{name} has dims {:?}, expected {dims:?}",
                    t.dims()
                )));
            }
        }
        for (name, t) in self.named_tensors() {
            if !t.data().iter().all(|v| v.is_finite()) {
                return Err(Error::Input(format!("{name} contains non-finite values")));
            }
        }
        Ok(())
    }
}

/// Save params to the tensor container plus a JSON config sidecar at
/// `<path>.json`.
pub fn save_model(path: &Path, params: &ModelParams, config: &ModelConfig) -> Result<()> {
    params.validate(config)?;
    let entries: Vec<(String, Tensor)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    write_tensors(path, &entries)?;
    let sidecar = sidecar_path(path);
    let json = serde_json::to_string_pretty(config)
        .map_err(|e| Error::Format(format!("config serialization: {e}")))?;
    std::fs::write(sidecar, json + "\n")?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(ModelParams, ModelConfig)> {
    let sidecar = sidecar_path(path);
    let json = std::fs::read_to_string(&sidecar)?;
    let config: ModelConfig = serde_json::from_str(&json)
        .map_err(|e| Error::Format(format!("config sidecar {}: {e}", sidecar.display())))?;
    config.validate()?;
    let entries = read_tensors(path)?;
    let find = |name: &str| -> Result<Tensor> {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Format(format!("model file lacks tensor {name:?}")))
    };
    let blocks = (0..config.num_blocks)
        .map(|b| {
            Ok(BlockParams {
                ln1_scale: find(&format!("block{b}.ln1_scale"))?,
                ln1_offset: find(&format!("block{b}.ln1_offset"))?,
                wq: find(&format!("block{b}.wq"))?,
                bq: find(&format!("block{b}.bq"))?,
                wk: find(&format!("block{b}.wk"))?,
                bk: find(&format!("block{b}.bk"))?,
                wv: find(&format!("block{b}.wv"))?,
                bv: find(&format!("block{b}.bv"))?,
                wo: find(&format!("block{b}.wo"))?,
                bo: find(&format!("block{b}.bo"))?,
                ln2_scale: find(&format!("block{b}.ln2_scale"))?,
                ln2_offset: find(&format!("block{b}.ln2_offset"))?,
                w1: find(&format!("block{b}.w1"))?,
                b1: find(&format!("block{b}.b1"))?,
                w2: find(&format!("block{b}.w2"))?,
                b2: find(&format!("block{b}.b2"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let params = ModelParams {
        patch_proj: find("patch_proj")?,
        patch_bias: find("patch_bias")?,
        cls_token: find("cls_token")?,
        pos_embed: find("pos_embed")?,
        blocks,
        final_scale: find("final_scale")?,
        final_offset: find("final_offset")?,
        head_w: find("head_w")?,
        head_b: find("head_b")?,
    };
    params.validate(&config)?;
    Ok((params, config))
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    path.with_file_name(name)
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    pub x_in: Tensor,
    pub ln1_out: Tensor,
    pub ln1_mean: Vec<f64>,
    pub ln1_inv_std: Vec<f64>,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub scores: Vec<Tensor>,
    pub attention: Vec<Tensor>,
    pub context: Tensor,
    pub attn_out: Tensor,
    pub x_mid: Tensor,
    pub ln2_out: Tensor,
    pub ln2_mean: Vec<f64>,
    pub ln2_inv_std: Vec<f64>,
    pub mlp_pre: Tensor,
    pub mlp_act: Tensor,
    pub mlp_out: Tensor,
    pub x_out: Tensor,
}

#[derive(Debug, Clone)]
pub struct ActivationCache {
    pub image: Tensor,
    pub patches: Tensor,
    pub tokens0: Tensor,
    pub blocks: Vec<BlockCache>,
    pub final_ln_out: Tensor,
    pub final_mean: Vec<f64>,
    pub final_inv_std: Vec<f64>,
    pub cls_embedding: Vec<f64>,
    pub logits: Vec<f64>,
    pub params_hash: u64,
}

impl ActivationCache {
    pub(crate) fn check_valid(&self, params: &ModelParams) -> Result<()> {
        if self.params_hash != params.hash64() {
            return Err(Error::CacheInvalid(
                "parameters changed since this cache was built".into(),
            ));
        }
        Ok(())
    }
}

/// Flatten the image into per-patch vectors, channel-major within a patch,
/// patches in row-major grid order.
pub fn patchify(image: &Tensor, config: &ModelConfig) -> Result<Tensor> {
    let (c, s, p) = (config.num_channels, config.image_size, config.patch_size);
    if image.dims() != [c, s, s] {
        return Err(Error::Dimension(format!(
            "image dims {:?}, config expects [{c}, {s}, {s}]",
            image.dims()
        )));
    }
    let per_side = s / p;
    let mut out = Tensor::zeros(vec![per_side * per_side, config.patch_dim()]);
    for pr in 0..per_side {
        for pc in 0..per_side {
            let row = out.row_mut(pr * per_side + pc);
            let mut idx = 0;
            for ch in 0..c {
                for y in 0..p {
                    for x in 0..p {
                        row[idx] = image.data()[ch * s * s + (pr * p + y) * s + (pc * p + x)];
                        idx += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// y = x·Wᵀ + b applied per row.
pub(crate) fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut y = matmul(x, &w.transposed())?;
    for i in 0..y.rows() {
        for (yv, bv) in y.row_mut(i).iter_mut().zip(b.data()) {
            *yv += bv;
        }
    }
    Ok(y)
}

/// Row-wise layer norm; returns (output, means, inverse stds).
pub(crate) fn layer_norm(
    x: &Tensor,
    scale: &Tensor,
    offset: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let d = x.cols();
    let mut out = Tensor::zeros(vec![x.rows(), d]);
    let mut means = Vec::with_capacity(x.rows());
    let mut inv_stds = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv_std = 1.0 / (var + LN_EPS).sqrt();
        let out_row = out.row_mut(i);
        for j in 0..d {
            out_row[j] = (row[j] - mean) * inv_std * scale.data()[j] + offset.data()[j];
        }
        means.push(mean);
        inv_stds.push(inv_std);
    }
    (out, means, inv_stds)
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn slice_cols(x: &Tensor, start: usize, len: usize) -> Tensor {
    let mut out = Tensor::zeros(vec![x.rows(), len]);
    for i in 0..x.rows() {
        out.row_mut(i).copy_from_slice(&x.row(i)[start..start + len]);
    }
    out
}

pub(crate) fn paste_cols(dst: &mut Tensor, src: &Tensor, start: usize) {
    for i in 0..src.rows() {
        dst.row_mut(i)[start..start + src.cols()].copy_from_slice(src.row(i));
    }
}

pub fn forward(
    image: &Tensor,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<(Vec<f64>, ActivationCache)> {
    forward_impl(image, params, config, None)
}

/// Forward pass that substitutes the given matrix for the softmax output of
/// one (block, head) pair; the downstream half then consumes the override.
/// Backs the finite-difference check of the attention gradients.
pub fn forward_with_attention_override(
    image: &Tensor,
    params: &ModelParams,
    config: &ModelConfig,
    block: usize,
    head: usize,
    attention: &Tensor,
) -> Result<(Vec<f64>, ActivationCache)> {
    if block >= config.num_blocks || head >= config.num_heads {
        return Err(Error::Index(format!(
            "override target block {block} head {head} out of range"
        )));
    }
    let t = config.num_tokens();
    if attention.dims() != [t, t] {
        return Err(Error::Dimension(format!(
            "override attention dims {:?}, expected [{t}, {t}]",
            attention.dims()
        )));
    }
    forward_impl(image, params, config, Some((block, head, attention)))
}

fn forward_impl(
    image: &Tensor,
    params: &ModelParams,
    config: &ModelConfig,
    override_attn: Option<(usize, usize, &Tensor)>,
) -> Result<(Vec<f64>, ActivationCache)> {
    params.validate(config)?;
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Input("pixel values must lie in [0,1]".into()));
    }
    let patches = patchify(image, config)?;
    let d = config.embed_dim;
    let t = config.num_tokens();
    let hd = config.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut x = Tensor::zeros(vec![t, d]);
    x.row_mut(0).copy_from_slice(params.cls_token.row(0));
    let projected = linear(&patches, &params.patch_proj, &params.patch_bias)?;
    for i in 0..patches.rows() {
        x.row_mut(i + 1).copy_from_slice(projected.row(i));
    }
    for i in 0..t {
        for (xv, pv) in x.row_mut(i).iter_mut().zip(params.pos_embed.row(i)) {
            *xv += pv;
        }
    }
    let tokens0 = x.clone();

    let mut blocks = Vec::with_capacity(config.num_blocks);
    for (b, blk) in params.blocks.iter().enumerate() {
        let x_in = x.clone();
        let (ln1_out, ln1_mean, ln1_inv_std) = layer_norm(&x_in, &blk.ln1_scale, &blk.ln1_offset);
        let q = linear(&ln1_out, &blk.wq, &blk.bq)?;
        let k = linear(&ln1_out, &blk.wk, &blk.bk)?;
        let v = linear(&ln1_out, &blk.wv, &blk.bv)?;

        let mut scores = Vec::with_capacity(config.num_heads);
        let mut attention = Vec::with_capacity(config.num_heads);
        let mut context = Tensor::zeros(vec![t, d]);
        for h in 0..config.num_heads {
            let qh = slice_cols(&q, h * hd, hd);
            let kh = slice_cols(&k, h * hd, hd);
            let vh = slice_cols(&v, h * hd, hd);
            let s = matmul(&qh, &kh.transposed())?.scale(scale);
            let a = match override_attn {
                Some((ob, oh, over)) if ob == b && oh == h => over.clone(),
                _ => softmax_rows(&s)?,
            };
            let ctx_h = matmul(&a, &vh)?;
            paste_cols(&mut context, &ctx_h, h * hd);
            scores.push(s);
            attention.push(a);
        }
        let attn_out = linear(&context, &blk.wo, &blk.bo)?;
        let x_mid = x_in.add(&attn_out)?;

        let (ln2_out, ln2_mean, ln2_inv_std) = layer_norm(&x_mid, &blk.ln2_scale, &blk.ln2_offset);
        let mlp_pre = linear(&ln2_out, &blk.w1, &blk.b1)?;
        let mut mlp_act = mlp_pre.clone();
        for v in mlp_act.data_mut() {
            *v = gelu(*v);
        }
        let mlp_out = linear(&mlp_act, &blk.w2, &blk.b2)?;
        let x_out = x_mid.add(&mlp_out)?;

        x = x_out.clone();
        blocks.push(BlockCache {
            x_in,
            ln1_out,
            ln1_mean,
            ln1_inv_std,
            q,
            k,
            v,
            scores,
            attention,
            context,
            attn_out,
            x_mid,
            ln2_out,
            ln2_mean,
            ln2_inv_std,
            mlp_pre,
            mlp_act,
            mlp_out,
            x_out,
        });
    }

    let (final_ln_out, final_mean, final_inv_std) =
        layer_norm(&x, &params.final_scale, &params.final_offset);
    let cls_embedding = final_ln_out.row(0).to_vec();
    let mut logits = matvec(&params.head_w, &cls_embedding)?;
    for (l, b) in logits.iter_mut().zip(params.head_b.data()) {
        *l += b;
    }

    let cache = ActivationCache {
        image: image.clone(),
        patches,
        tokens0,
        blocks,
        final_ln_out,
        final_mean,
        final_inv_std,
        cls_embedding,
        logits: logits.clone(),
        params_hash: params.hash64(),
    };
    Ok((logits, cache))
}

#[cfg(test)]
pub(crate) fn tiny_config() -> ModelConfig {
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

#[cfg(test)]
pub(crate) fn test_image(config: &ModelConfig, seed: u64) -> Tensor {
    let mut rng = DetRng::from_seed_stream(seed, 9);
    let n = config.num_channels * config.image_size * config.image_size;
    let data = (0..n).map(|_| rng.uniform_f64()).collect();
    Tensor::new(vec![config.num_channels, config.image_size, config.image_size], data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_attention_projections_give_uniform_rows() {
        let config = tiny_config();
        let mut params = ModelParams::init(&config).unwrap();
        for blk in &mut params.blocks {
            blk.wq.data_mut().fill(0.0);
            blk.wk.data_mut().fill(0.0);
        }
        let image = Tensor::zeros(vec![1, 8, 8]);
        let (_, cache) = forward(&image, &params, &config).unwrap();
        let t = config.num_tokens();
        for blk in &cache.blocks {
            for a in &blk.attention {
                for i in 0..t {
                    for j in 0..t {
                        assert!((a.at(i, j) - 1.0 / t as f64).abs() < 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let config = tiny_config();
        let params = ModelParams::init(&config).unwrap();
        let image = test_image(&config, 3);
        let (l1, c1) = forward(&image, &params, &config).unwrap();
        let (l2, c2) = forward(&image, &params, &config).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(c1.cls_embedding, c2.cls_embedding);
        for (b1, b2) in c1.blocks.iter().zip(&c2.blocks) {
            assert_eq!(b1.x_out.data(), b2.x_out.data());
            for (a1, a2) in b1.attention.iter().zip(&b2.attention) {
                assert_eq!(a1.data(), a2.data());
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let config = ModelConfig {
            num_blocks: 2,
            num_heads: 2,
            embed_dim: 8,
            ..tiny_config()
        };
        let params = ModelParams::init(&config).unwrap();
        let image = test_image(&config, 11);
        let (_, cache) = forward(&image, &params, &config).unwrap();
        for blk in &cache.blocks {
            for a in &blk.attention {
                for i in 0..a.rows() {
                    let s: f64 = a.row(i).iter().sum();
                    assert!((s - 1.0).abs() <= 1e-10, "row sum {s}");
                }
            }
        }
    }

    #[test]
    fn cls_embedding_is_encoder_row_zero() {
        let config = tiny_config();
        let params = ModelParams::init(&config).unwrap();
        let image = test_image(&config, 5);
        let (_, cache) = forward(&image, &params, &config).unwrap();
        assert_eq!(cache.cls_embedding.as_slice(), cache.final_ln_out.row(0));
    }

    #[test]
    fn patch_permutation_with_pos_embed_swap_preserves_logits() {
        let config = tiny_config();
        let mut params = ModelParams::init(&config).unwrap();
        let image = test_image(&config, 13);
        let (base, _) = forward(&image, &params, &config).unwrap();

        // Swap patches 0 and 3 in the image and the matching pos embeddings.
        let patches = patchify(&image, &config).unwrap();
        let mut swapped = patches.clone();
        let r0 = patches.row(0).to_vec();
        let r3 = patches.row(3).to_vec();
        swapped.row_mut(0).copy_from_slice(&r3);
        swapped.row_mut(3).copy_from_slice(&r0);
        let mut image2 = Tensor::zeros(vec![1, 8, 8]);
        let per_side = 2;
        for pr in 0..per_side {
            for pc in 0..per_side {
                let row = swapped.row(pr * per_side + pc);
                let mut idx = 0;
                for y in 0..4 {
                    for x in 0..4 {
                        image2.data_mut()[(pr * 4 + y) * 8 + (pc * 4 + x)] = row[idx];
                        idx += 1;
                    }
                }
            }
        }
        let p1 = params.pos_embed.row(1).to_vec();
        let p4 = params.pos_embed.row(4).to_vec();
        params.pos_embed.row_mut(1).copy_from_slice(&p4);
        params.pos_embed.row_mut(4).copy_from_slice(&p1);

        let (permuted, _) = forward(&image2, &params, &config).unwrap();
        for (a, b) in base.iter().zip(&permuted) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let config = tiny_config();
        let params = ModelParams::init(&config).unwrap();
        let image = Tensor::zeros(vec![1, 4, 4]);
        assert!(matches!(
            forward(&image, &params, &config),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn params_round_trip_through_container() {
        let config = tiny_config();
        let params = ModelParams::init(&config).unwrap();
        let dir = std::env::temp_dir().join("cfr-model-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.cfrt");
        save_model(&path, &params, &config).unwrap();
        let (back, back_config) = load_model(&path).unwrap();
        assert_eq!(back_config, config);
        // Container stores f32; compare at that precision.
        for ((_, a), (_, b)) in params.named_tensors().iter().zip(back.named_tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn hash_tracks_parameter_changes() {
        let config = tiny_config();
        let mut params = ModelParams::init(&config).unwrap();
        let h0 = params.hash64();
        *params.blocks[0].wq.at_mut(0, 0) += 1e-12;
        assert_ne!(h0, params.hash64());
    }

    #[test]
    fn gelu_prime_matches_finite_differences() {
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.2, 1.5, 4.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_prime(x)).abs() < 1e-8, "x={x}");
        }
    }
}
