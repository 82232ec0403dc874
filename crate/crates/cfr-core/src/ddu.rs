//! Gaussian discriminant uncertainty over CLS embeddings.
//!
//! Class-conditional Gaussians share one pooled covariance. A sample's
//! epistemic uncertainty is its minimum Mahalanobis distance over class
//! centers; lower means more confident. Distances go through the cached
//! Cholesky factor, never an explicit inverse.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{cholesky_spd, forward_substitute, Tensor};

#[derive(Debug, Clone)]
pub struct GaussianDiscriminant {
    pub class_means: Tensor,
    pub shared_covariance: Tensor,
    pub cholesky_factor: Tensor,
    pub ridge_lambda: f64,
    pub embed_dim: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyScore {
    pub sample_id: String,
    pub u: f64,
    pub nearest_class: usize,
}

/// Fit per-class means and the pooled within-class covariance
/// Σ = (1/(N−K))·Σ_c Σ_{i∈c} dev·devᵀ, ridged to Σ + λ·(trace(Σ)/d)·I
/// (λ·I when the trace is zero).
///
/// Samples are accumulated in a canonical order (class, then embedding bytes)
/// so the result is bit-identical under input permutation.
pub fn fit(embeddings: &Tensor, labels: &[usize], ridge_lambda: f64) -> Result<GaussianDiscriminant> {
    if !embeddings.is_matrix() {
        return Err(Error::Dimension(format!(
            "embeddings must be a matrix, got dims {:?}",
            embeddings.dims()
        )));
    }
    let n = embeddings.rows();
    let d = embeddings.cols();
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "{n} embeddings but {} labels",
            labels.len()
        )));
    }
    if !(ridge_lambda >= 0.0) || !ridge_lambda.is_finite() {
        return Err(Error::Parameter(format!(
            "ridge lambda must be finite and non-negative, got {ridge_lambda}"
        )));
    }
    let k = labels.iter().max().map(|m| m + 1).unwrap_or(0);
    if k < 1 {
        return Err(Error::InsufficientData("no samples".into()));
    }
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    if let Some((c, _)) = counts.iter().enumerate().find(|(_, &cnt)| cnt < 2) {
        return Err(Error::InsufficientData(format!(
            "class {c} has fewer than 2 samples"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        labels[a].cmp(&labels[b]).then_with(|| {
            embeddings
                .row(a)
                .iter()
                .zip(embeddings.row(b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });

    let mut means = Tensor::zeros(vec![k, d]);
    for &i in &order {
        let row = embeddings.row(i);
        let m = means.row_mut(labels[i]);
        for (mv, rv) in m.iter_mut().zip(row) {
            *mv += rv;
        }
    }
    for c in 0..k {
        let cnt = counts[c] as f64;
        for v in means.row_mut(c) {
            *v /= cnt;
        }
    }

    let mut cov = Tensor::zeros(vec![d, d]);
    for &i in &order {
        let row = embeddings.row(i);
        let mean = means.row(labels[i]);
        let dev: Vec<f64> = row.iter().zip(mean).map(|(x, m)| x - m).collect();
        for a in 0..d {
            for b in 0..d {
                *cov.at_mut(a, b) += dev[a] * dev[b];
            }
        }
    }
    let denom = (n - k) as f64;
    if denom <= 0.0 {
        return Err(Error::InsufficientData(format!(
            "need more samples than classes, got {n} samples for {k} classes"
        )));
    }
    for v in cov.data_mut() {
        *v /= denom;
    }

    let trace: f64 = (0..d).map(|i| cov.at(i, i)).sum();
    let ridge = if trace > 0.0 {
        ridge_lambda * trace / d as f64
    } else {
        ridge_lambda
    };
    for i in 0..d {
        *cov.at_mut(i, i) += ridge;
    }

    let cholesky_factor = cholesky_spd(&cov).map_err(|e| match e {
        Error::NotPositiveDefinite(msg) => Error::NotPositiveDefinite(format!(
            "{msg}; increase the ridge lambda (current {ridge_lambda})"
        )),
        other => other,
    })?;
    Ok(GaussianDiscriminant {
        class_means: means,
        shared_covariance: cov,
        cholesky_factor,
        ridge_lambda,
        embed_dim: d,
        num_classes: k,
    })
}

/// D_c(z) = ‖L⁻¹(z − μ_c)‖₂ where LLᵀ = Σ.
pub fn mahalanobis(gd: &GaussianDiscriminant, z: &[f64], c: usize) -> Result<f64> {
    if c >= gd.num_classes {
        return Err(Error::Index(format!(
            "class {c} out of range for {} classes",
            gd.num_classes
        )));
    }
    if z.len() != gd.embed_dim {
        return Err(Error::Dimension(format!(
            "embedding has dim {}, model expects {}",
            z.len(),
            gd.embed_dim
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("embedding contains non-finite values".into()));
    }
    let dev: Vec<f64> = z
        .iter()
        .zip(gd.class_means.row(c))
        .map(|(x, m)| x - m)
        .collect();
    let whitened = forward_substitute(&gd.cholesky_factor, &dev)?;
    Ok(whitened.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// u(z) = min_c D_c(z); ties go to the lowest class index.
pub fn uncertainty(gd: &GaussianDiscriminant, sample_id: &str, z: &[f64]) -> Result<UncertaintyScore> {
    let mut best = (0usize, f64::INFINITY);
    for c in 0..gd.num_classes {
        let dist = mahalanobis(gd, z, c)?;
        if dist < best.1 {
            best = (c, dist);
        }
    }
    Ok(UncertaintyScore {
        sample_id: sample_id.to_string(),
        u: best.1,
        nearest_class: best.0,
    })
}

/// Ascending by u, ties by sample id. Output order is independent of input
/// order.
pub fn rank_by_confidence(scores: &[UncertaintyScore]) -> Vec<UncertaintyScore> {
    let mut out = scores.to_vec();
    out.sort_by(|a, b| a.u.total_cmp(&b.u).then_with(|| a.sample_id.cmp(&b.sample_id)));
    out
}

/// Expected calibration error over equal-width confidence bins on (0,1].
pub fn ece(probabilities: &Tensor, labels: &[usize], num_bins: usize) -> Result<f64> {
    if !probabilities.is_matrix() {
        return Err(Error::Dimension("probabilities must be a matrix".into()));
    }
    if num_bins == 0 {
        return Err(Error::Parameter("need at least one bin".into()));
    }
    let n = probabilities.rows();
    let k = probabilities.cols();
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "{n} probability rows but {} labels",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::Input("no samples".into()));
    }
    let mut bin_count = vec![0usize; num_bins];
    let mut bin_conf = vec![0.0; num_bins];
    let mut bin_acc = vec![0.0; num_bins];
    for i in 0..n {
        let row = probabilities.row(i);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&p| !(0.0..=1.0 + 1e-9).contains(&p)) {
            return Err(Error::Input(format!(
                "probability row {i} is not a distribution (sum {sum})"
            )));
        }
        if labels[i] >= k {
            return Err(Error::Index(format!(
                "label {} out of range for {k} classes",
                labels[i]
            )));
        }
        let (pred, conf) = row
            .iter()
            .cloned()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |acc, (j, p)| {
                if p > acc.1 {
                    (j, p)
                } else {
                    acc
                }
            });
        let bin = (((conf * num_bins as f64).ceil() as usize).max(1) - 1).min(num_bins - 1);
        bin_count[bin] += 1;
        bin_conf[bin] += conf;
        bin_acc[bin] += f64::from(pred == labels[i]);
    }
    let mut total = 0.0;
    for b in 0..num_bins {
        if bin_count[b] == 0 {
            continue;
        }
        let cnt = bin_count[b] as f64;
        total += cnt / n as f64 * (bin_acc[b] / cnt - bin_conf[b] / cnt).abs();
    }
    Ok(total)
}

/// Serialize to the tensor container plus a `<path>.meta` text line carrying
/// d, K and λ.
pub fn save_discriminant(path: &Path, gd: &GaussianDiscriminant) -> Result<()> {
    let entries = vec![
        ("means".to_string(), gd.class_means.clone()),
        ("covariance".to_string(), gd.shared_covariance.clone()),
        ("cholesky".to_string(), gd.cholesky_factor.clone()),
        (
            "lambda".to_string(),
            Tensor::new(vec![1], vec![gd.ridge_lambda])?,
        ),
    ];
    crate::data::write_tensors(path, &entries)?;
    let meta = format!("d={} classes={} lambda={}\n", gd.embed_dim, gd.num_classes, gd.ridge_lambda);
    std::fs::write(meta_path(path), meta)?;
    Ok(())
}

pub fn load_discriminant(path: &Path) -> Result<GaussianDiscriminant> {
    let meta = std::fs::read_to_string(meta_path(path))?;
    let mut d = None;
    let mut k = None;
    let mut lambda = None;
    for field in meta.trim().split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad metadata field {field:?}")))?;
        match key {
            "d" => d = value.parse::<usize>().ok(),
            "classes" => k = value.parse::<usize>().ok(),
            "lambda" => lambda = value.parse::<f64>().ok(),
            _ => {}
        }
    }
    let (d, k, lambda) = match (d, k, lambda) {
        (Some(d), Some(k), Some(l)) => (d, k, l),
        _ => return Err(Error::Format("metadata line lacks d, classes or lambda".into())),
    };
    let entries = crate::data::read_tensors(path)?;
    let find = |name: &str| -> Result<Tensor> {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Format(format!("discriminant file lacks tensor {name:?}")))
    };
    let class_means = find("means")?;
    let shared_covariance = find("covariance")?;
    let cholesky_factor = find("cholesky")?;
    if class_means.dims() != [k, d]
        || shared_covariance.dims() != [d, d]
        || cholesky_factor.dims() != [d, d]
    {
        return Err(Error::Format(
            "discriminant tensor shapes disagree with metadata".into(),
        ));
    }
    Ok(GaussianDiscriminant {
        class_means,
        shared_covariance,
        cholesky_factor,
        ridge_lambda: lambda,
        embed_dim: d,
        num_classes: k,
    })
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta");
    path.with_file_name(name)
}
