//! Plain-text digest of a summary.json.

use std::path::Path;

use cfr_core::{Error, Result};

fn field<'a>(v: &'a serde_json::Value, name: &str) -> Result<&'a serde_json::Value> {
    v.get(name)
        .ok_or_else(|| Error::Format(format!("summary lacks {name:?}")))
}

pub fn print_digest(out_dir: &Path) -> Result<()> {
    let path = out_dir.join("summary.json");
    let text = std::fs::read_to_string(&path)?;
    let summary: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;

    let num_samples = field(&summary, "num_samples")?;
    let test_accuracy = field(&summary, "test_accuracy")?.as_f64().unwrap_or(f64::NAN);
    let ece = field(&summary, "ece")?.as_f64().unwrap_or(f64::NAN);
    let ece_bins = field(&summary, "ece_bins")?;
    println!("samples        {num_samples}");
    println!("test accuracy  {test_accuracy:.3}");
    println!("ece            {ece:.4} ({ece_bins} bins)");
    if let Some(name) = summary.get("external_index").and_then(|v| v.as_str()) {
        println!("external index {name}");
    }
    println!();
    println!("{:>9}  {:>6}  {:>8}  {:>8}", "threshold", "size", "entropy", "pearson");
    let thresholds = field(&summary, "thresholds")?
        .as_array()
        .ok_or_else(|| Error::Format("thresholds is not a list".into()))?;
    for t in thresholds {
        let threshold = field(t, "threshold")?.as_f64().unwrap_or(f64::NAN);
        let size = field(t, "subset_size")?.as_u64().unwrap_or(0);
        let entropy = field(t, "entropy")?.as_f64().unwrap_or(f64::NAN);
        let pearson = t
            .get("pearson")
            .and_then(|v| v.as_f64())
            .map(|r| format!("{r:.4}"))
            .unwrap_or_else(|| "-".into());
        println!("{threshold:>8}%  {size:>6}  {entropy:>8.4}  {pearson:>8}");
    }
    for t in thresholds {
        let threshold = field(t, "threshold")?.as_f64().unwrap_or(f64::NAN);
        let mut classes: Vec<(String, f64)> = field(t, "classes")?
            .as_array()
            .map(|rows| {
                rows.iter()
                    .filter_map(|row| {
                        Some((
                            row.get("class_name")?.as_str()?.to_string(),
                            row.get("mean_relevance")?.as_f64()?,
                        ))
                    })
                    .collect()
            })
            .unwrap_or_default();
        classes.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let top: Vec<String> = classes
            .iter()
            .take(3)
            .map(|(name, mean)| format!("{name} {mean:.5}"))
            .collect();
        println!("top classes at {threshold}%: {}", top.join(", "));
    }
    Ok(())
}
