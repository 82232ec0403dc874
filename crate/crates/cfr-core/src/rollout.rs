//! Attention fusion and rollout.
//!
//! Per block: Ā = I + (1/H)·Σ_h max(∇A_h ⊙ R_h, 0). Across blocks: the
//! ordered matrix product M = Ā^(1)·Ā^(2)·…·Ā^(B), whose CLS row read out
//! over patch tokens becomes a pixel-level relevance map by nearest
//! replication of each patch value over its footprint.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};

/// Relevance-adjusted attention Ā for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockFusion {
    pub abar: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    Raw,
    MinMax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    pub width: usize,
    pub height: usize,
    pub values: Tensor,
    pub normalization: Normalization,
}

impl RelevanceMap {
    pub fn total(&self) -> f64 {
        self.values.sum()
    }
}

/// Ā = I + (1/H)·Σ_h max(grad_h ⊙ rel_h, 0).
pub fn fuse_block(a: &[Tensor], grad: &[Tensor], rel: &[Tensor]) -> Result<BlockFusion> {
    if a.is_empty() || a.len() != grad.len() || a.len() != rel.len() {
        return Err(Error::Dimension(format!(
            "head stacks disagree: attention {}, grad {}, rel {}",
            a.len(),
            grad.len(),
            rel.len()
        )));
    }
    let t = a[0].rows();
    for (name, stack) in [("attention", a), ("grad", grad), ("rel", rel)] {
        for m in stack.iter() {
            if m.dims() != [t, t] {
                return Err(Error::Dimension(format!(
                    "{name} head has dims {:?}, expected [{t}, {t}]",
                    m.dims()
                )));
            }
        }
    }
    let heads = a.len() as f64;
    let mut abar = Tensor::identity(t);
    for h in 0..a.len() {
        for idx in 0..t * t {
            let prod = grad[h].data()[idx] * rel[h].data()[idx];
            if prod > 0.0 {
                abar.data_mut()[idx] += prod / heads;
            }
        }
    }
    Ok(BlockFusion { abar })
}

/// M = Ā^(1)·Ā^(2)·…·Ā^(B), block 1 first.
pub fn rollout_chain(blocks: &[BlockFusion]) -> Result<Tensor> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::Input("rollout needs at least one block".into()))?;
    let mut m = first.abar.clone();
    for b in &blocks[1..] {
        m = matmul(&m, &b.abar)?;
    }
    Ok(m)
}

/// Row `cls_index` of M with the CLS column removed: relevance of each patch
/// token to the classification token.
pub fn extract_patch_relevance(m: &Tensor, cls_index: usize) -> Result<Tensor> {
    if !m.is_matrix() || m.rows() != m.cols() {
        return Err(Error::Dimension(format!(
            "rollout matrix must be square, got {:?}",
            m.dims()
        )));
    }
    if cls_index >= m.rows() {
        return Err(Error::Index(format!(
            "cls_index {cls_index} out of range for {} tokens",
            m.rows()
        )));
    }
    let mut out = Vec::with_capacity(m.cols() - 1);
    for (j, v) in m.row(cls_index).iter().enumerate() {
        if j != cls_index {
            out.push(*v);
        }
    }
    Tensor::new(vec![out.len()], out)
}

/// Replicate each patch value over its patch_size × patch_size footprint.
pub fn to_pixel_map(
    patch_rel: &Tensor,
    image_size: usize,
    patch_size: usize,
    normalize: bool,
) -> Result<RelevanceMap> {
    if patch_size == 0 || image_size == 0 || image_size % patch_size != 0 {
        return Err(Error::Dimension(format!(
            "patch_size {patch_size} incompatible with image_size {image_size}"
        )));
    }
    let per_side = image_size / patch_size;
    if patch_rel.len() != per_side * per_side {
        return Err(Error::Dimension(format!(
            "{} patch values, expected {}",
            patch_rel.len(),
            per_side * per_side
        )));
    }
    if patch_rel.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Input(
            "patch relevance must be finite and non-negative".into(),
        ));
    }
    let mut values = Tensor::zeros(vec![image_size, image_size]);
    for y in 0..image_size {
        for x in 0..image_size {
            let p = (y / patch_size) * per_side + x / patch_size;
            *values.at_mut(y, x) = patch_rel.data()[p];
        }
    }
    let normalization = if normalize {
        let min = values.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max > min {
            for v in values.data_mut() {
                *v = (*v - min) / (max - min);
            }
        } else {
            values.data_mut().fill(0.0);
        }
        Normalization::MinMax
    } else {
        Normalization::Raw
    };
    Ok(RelevanceMap {
        width: image_size,
        height: image_size,
        values,
        normalization,
    })
}

/// 8-bit binary PGM, min-max scaled; constant maps render black.
pub fn write_pgm(path: &Path, map: &RelevanceMap) -> Result<()> {
    let min = map.values.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = map.values.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut bytes = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    for &v in map.values.data() {
        let g = if max > min {
            ((v - min) / (max - min) * 255.0).round() as u8
        } else {
            0
        };
        bytes.push(g);
    }
    std::fs::write(path, bytes)?;
    Ok(())
}
