//! Confidence-filtered aggregation and the class-level statistics behind it.
//!
//! Samples ranked by uncertainty are cut into nested percentile subsets; raw
//! relevance maps are summed over land-cover classes per subset; profiles
//! yield pixel-weighted class means, their Shannon entropy, and Pearson
//! correlation against an external per-class index.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::LabelRaster;
use crate::ddu::UncertaintyScore;
use crate::error::{Error, Result};
use crate::rollout::{Normalization, RelevanceMap};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceSubset {
    pub threshold: f64,
    pub sample_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStat {
    pub total_relevance: f64,
    pub total_pixels: u64,
    pub mean_relevance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRelevanceProfile {
    pub threshold: f64,
    pub per_class: BTreeMap<u16, ClassStat>,
}

impl ClassRelevanceProfile {
    pub fn covered_classes(&self) -> Vec<u16> {
        self.per_class
            .iter()
            .filter(|(_, s)| s.total_pixels > 0)
            .map(|(c, _)| *c)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalIndex {
    pub name: String,
    pub values: BTreeMap<u16, f64>,
}

impl ExternalIndex {
    pub fn new(name: &str, values: BTreeMap<u16, f64>) -> Result<ExternalIndex> {
        if values.len() < 2 {
            return Err(Error::Input(
                "external index needs at least 2 classes".into(),
            ));
        }
        if values.values().any(|v| !v.is_finite()) {
            return Err(Error::Input("external index values must be finite".into()));
        }
        Ok(ExternalIndex {
            name: name.to_string(),
            values,
        })
    }

    /// Plain `class_id,value` lines; the index is named after the file stem.
    pub fn from_csv(path: &Path) -> Result<ExternalIndex> {
        let text = std::fs::read_to_string(path)?;
        let mut values = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (id, value) = line.split_once(',').ok_or_else(|| {
                Error::Format(format!("index line {} lacks a comma", lineno + 1))
            })?;
            let id: u16 = id.trim().parse().map_err(|_| {
                Error::Format(format!("index line {}: bad class id {id:?}", lineno + 1))
            })?;
            let value: f64 = value.trim().parse().map_err(|_| {
                Error::Format(format!("index line {}: bad value {value:?}", lineno + 1))
            })?;
            if values.insert(id, value).is_some() {
                return Err(Error::Format(format!("index repeats class id {id}")));
            }
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "index".to_string());
        ExternalIndex::new(&name, values)
    }
}

/// Number of samples in the top t% cut: ceil(t/100 · n).
fn subset_size(threshold: f64, n: usize) -> usize {
    if threshold.fract() == 0.0 {
        let t = threshold as u64;
        ((t * n as u64).div_ceil(100)) as usize
    } else {
        (threshold * n as f64 / 100.0).ceil() as usize
    }
}

/// Cut the ranked scores at each percentile threshold; subsets are prefixes
/// of the ranking, so they nest.
pub fn partition(
    scores: &[UncertaintyScore],
    thresholds: &[f64],
) -> Result<Vec<ConfidenceSubset>> {
    if scores.is_empty() {
        return Err(Error::Input("no scores to partition".into()));
    }
    for w in scores.windows(2) {
        let ord = w[0]
            .u
            .total_cmp(&w[1].u)
            .then_with(|| w[0].sample_id.cmp(&w[1].sample_id));
        if ord.is_gt() {
            return Err(Error::Input(
                "scores must be ranked ascending by uncertainty".into(),
            ));
        }
    }
    let mut prev = f64::NEG_INFINITY;
    for &t in thresholds {
        if !(t > 0.0 && t <= 100.0) {
            return Err(Error::Parameter(format!(
                "threshold {t} outside (0, 100]"
            )));
        }
        if t <= prev {
            return Err(Error::Parameter(
                "thresholds must be strictly increasing".into(),
            ));
        }
        prev = t;
    }
    Ok(thresholds
        .iter()
        .map(|&t| {
            let size = subset_size(t, scores.len()).min(scores.len());
            ConfidenceSubset {
                threshold: t,
                sample_ids: scores[..size].iter().map(|s| s.sample_id.clone()).collect(),
            }
        })
        .collect())
}

/// Per-class relevance sum and pixel count over one raw map.
pub fn aggregate_by_class(
    map: &RelevanceMap,
    raster: &LabelRaster,
) -> Result<BTreeMap<u16, (f64, u64)>> {
    if map.normalization != Normalization::Raw {
        return Err(Error::Input(
            "aggregation consumes raw maps, not normalized ones".into(),
        ));
    }
    if map.width != raster.width as usize || map.height != raster.height as usize {
        return Err(Error::Dimension(format!(
            "map is {}x{}, raster is {}x{}",
            map.width, map.height, raster.width, raster.height
        )));
    }
    let mut out: BTreeMap<u16, (f64, u64)> = BTreeMap::new();
    for y in 0..map.height {
        for x in 0..map.width {
            let entry = out.entry(raster.class_at(y, x)).or_insert((0.0, 0));
            entry.0 += map.values.at(y, x);
            entry.1 += 1;
        }
    }
    Ok(out)
}

/// Merge per-image aggregates over a subset into pixel-weighted class means.
pub fn profile(
    subset: &ConfidenceSubset,
    aggregates: &BTreeMap<String, BTreeMap<u16, (f64, u64)>>,
) -> Result<ClassRelevanceProfile> {
    let mut merged: BTreeMap<u16, (f64, u64)> = BTreeMap::new();
    for id in &subset.sample_ids {
        let agg = aggregates
            .get(id)
            .ok_or_else(|| Error::Input(format!("no aggregate for sample {id:?}")))?;
        for (&class, &(sum, count)) in agg {
            let entry = merged.entry(class).or_insert((0.0, 0));
            entry.0 += sum;
            entry.1 += count;
        }
    }
    let per_class = merged
        .into_iter()
        .map(|(class, (total_relevance, total_pixels))| {
            let mean_relevance = if total_pixels > 0 {
                total_relevance / total_pixels as f64
            } else {
                0.0
            };
            (
                class,
                ClassStat {
                    total_relevance,
                    total_pixels,
                    mean_relevance,
                },
            )
        })
        .collect();
    Ok(ClassRelevanceProfile {
        threshold: subset.threshold,
        per_class,
    })
}

/// Shannon entropy (nats) of the normalized class-mean distribution.
pub fn relevance_entropy(p: &ClassRelevanceProfile) -> Result<f64> {
    let means: Vec<f64> = p
        .per_class
        .values()
        .filter(|s| s.total_pixels > 0)
        .map(|s| s.mean_relevance)
        .collect();
    if means.is_empty() {
        return Err(Error::Input("profile covers no classes".into()));
    }
    if means.iter().any(|&m| m < 0.0) {
        return Err(Error::Input("negative mean relevance".into()));
    }
    let total: f64 = means.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateDistribution(
            "all class means are zero".into(),
        ));
    }
    Ok(means
        .iter()
        .filter(|&&m| m > 0.0)
        .map(|&m| {
            let q = m / total;
            -q * q.ln()
        })
        .sum())
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation between class mean relevance and an external index
/// over the classes both sides cover. With `use_ranks` both sides are
/// rank-transformed first (average ranks on ties).
pub fn pearson(
    p: &ClassRelevanceProfile,
    idx: &ExternalIndex,
    use_ranks: bool,
) -> Result<f64> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (class, stat) in &p.per_class {
        if stat.total_pixels == 0 {
            continue;
        }
        if let Some(&v) = idx.values.get(class) {
            xs.push(stat.mean_relevance);
            ys.push(v);
        }
    }
    if xs.len() < 2 {
        return Err(Error::Input(format!(
            "only {} classes shared between profile and index",
            xs.len()
        )));
    }
    let (xs, ys) = if use_ranks {
        (average_ranks(&xs), average_ranks(&ys))
    } else {
        (xs, ys)
    };
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "one side has zero variance".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;
    use crate::rollout::to_pixel_map;
    use crate::tensor::Tensor;

    fn score(id: &str, u: f64) -> UncertaintyScore {
        UncertaintyScore {
            sample_id: id.into(),
            u,
            nearest_class: 0,
        }
    }

    fn ranked(n: usize) -> Vec<UncertaintyScore> {
        (0..n).map(|i| score(&format!("{i:03}"), i as f64)).collect()
    }

    #[test]
    fn partition_sizes_follow_ceil_arithmetic() {
        let subsets = partition(&ranked(10), &[10.0, 30.0, 100.0]).unwrap();
        let sizes: Vec<usize> = subsets.iter().map(|s| s.sample_ids.len()).collect();
        assert_eq!(sizes, [1, 3, 10]);
    }

    #[test]
    fn threshold_100_takes_everything() {
        let subsets = partition(&ranked(7), &[100.0]).unwrap();
        assert_eq!(subsets[0].sample_ids.len(), 7);
    }

    #[test]
    fn subsets_nest_for_random_scores() {
        let mut rng = DetRng::from_seed_stream(31, 0);
        for _ in 0..20 {
            let n = 1 + rng.below(40);
            let scores: Vec<UncertaintyScore> = (0..n)
                .map(|i| score(&format!("{i:03}"), rng.uniform_f64()))
                .collect();
            let ranked = crate::ddu::rank_by_confidence(&scores);
            let subsets = partition(&ranked, &[10.0, 30.0, 50.0, 100.0]).unwrap();
            for w in subsets.windows(2) {
                let small: std::collections::BTreeSet<_> = w[0].sample_ids.iter().collect();
                let large: std::collections::BTreeSet<_> = w[1].sample_ids.iter().collect();
                assert!(small.is_subset(&large));
            }
        }
    }

    #[test]
    fn partition_rejects_bad_inputs() {
        assert!(matches!(partition(&[], &[50.0]), Err(Error::Input(_))));
        assert!(matches!(
            partition(&ranked(3), &[0.0]),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            partition(&ranked(3), &[120.0]),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            partition(&ranked(3), &[30.0, 30.0]),
            Err(Error::Parameter(_))
        ));
        let unsorted = vec![score("a", 2.0), score("b", 1.0)];
        assert!(matches!(
            partition(&unsorted, &[100.0]),
            Err(Error::Input(_))
        ));
    }

    fn half_raster() -> LabelRaster {
        // Left half class 0, right half class 1 on a 4x4 grid.
        let ids = (0..16).map(|i| u16::from(i % 4 >= 2)).collect();
        LabelRaster::new(4, 4, ids).unwrap()
    }

    fn uniform_map(v: f64) -> RelevanceMap {
        let patch = Tensor::new(vec![4], vec![v; 4]).unwrap();
        to_pixel_map(&patch, 4, 2, false).unwrap()
    }

    #[test]
    fn aggregate_uniform_map_splits_evenly() {
        let agg = aggregate_by_class(&uniform_map(1.0), &half_raster()).unwrap();
        assert_eq!(agg[&0], (8.0, 8));
        assert_eq!(agg[&1], (8.0, 8));
    }

    #[test]
    fn aggregate_zero_map_gives_zero_sums() {
        let agg = aggregate_by_class(&uniform_map(0.0), &half_raster()).unwrap();
        assert_eq!(agg[&0], (0.0, 8));
        assert_eq!(agg[&1], (0.0, 8));
    }

    #[test]
    fn aggregate_matches_per_pixel_oracle() {
        let mut rng = DetRng::from_seed_stream(32, 0);
        for _ in 0..20 {
            let patch = Tensor::new(vec![16], (0..16).map(|_| rng.uniform_f64()).collect())
                .unwrap();
            let map = to_pixel_map(&patch, 8, 2, false).unwrap();
            let ids: Vec<u16> = (0..64).map(|_| rng.below(3) as u16).collect();
            let raster = LabelRaster::new(8, 8, ids.clone()).unwrap();
            let agg = aggregate_by_class(&map, &raster).unwrap();
            for class in 0u16..3 {
                let mut sum = 0.0;
                let mut count = 0u64;
                for y in 0..8 {
                    for x in 0..8 {
                        if ids[y * 8 + x] == class {
                            sum += map.values.at(y, x);
                            count += 1;
                        }
                    }
                }
                if count == 0 {
                    assert!(!agg.contains_key(&class));
                } else {
                    assert_eq!(agg[&class], (sum, count));
                }
            }
        }
    }

    #[test]
    fn aggregate_rejects_mismatched_dims_and_normalized_maps() {
        let raster = LabelRaster::new(8, 8, vec![0; 64]).unwrap();
        assert!(matches!(
            aggregate_by_class(&uniform_map(1.0), &raster),
            Err(Error::Dimension(_))
        ));
        let patch = Tensor::new(vec![4], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let normalized = to_pixel_map(&patch, 4, 2, true).unwrap();
        assert!(matches!(
            aggregate_by_class(&normalized, &half_raster()),
            Err(Error::Input(_))
        ));
    }

    fn subset(ids: &[&str]) -> ConfidenceSubset {
        ConfidenceSubset {
            threshold: 100.0,
            sample_ids: ids.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn single_image_profile_equals_its_means() {
        let mut aggregates = BTreeMap::new();
        aggregates.insert(
            "a".to_string(),
            BTreeMap::from([(0u16, (6.0, 3)), (2u16, (1.0, 2))]),
        );
        let p = profile(&subset(&["a"]), &aggregates).unwrap();
        assert_eq!(p.per_class[&0].mean_relevance, 2.0);
        assert_eq!(p.per_class[&2].mean_relevance, 0.5);
        assert_eq!(p.covered_classes(), vec![0, 2]);
    }

    #[test]
    fn disjoint_classes_union_untouched() {
        let mut aggregates = BTreeMap::new();
        aggregates.insert("a".to_string(), BTreeMap::from([(0u16, (6.0, 3))]));
        aggregates.insert("b".to_string(), BTreeMap::from([(5u16, (10.0, 4))]));
        let p = profile(&subset(&["a", "b"]), &aggregates).unwrap();
        assert_eq!(p.per_class[&0].mean_relevance, 2.0);
        assert_eq!(p.per_class[&5].mean_relevance, 2.5);
    }

    #[test]
    fn duplicated_member_leaves_means_unchanged() {
        let mut aggregates = BTreeMap::new();
        aggregates.insert(
            "a".to_string(),
            BTreeMap::from([(0u16, (6.0, 3)), (1u16, (2.0, 8))]),
        );
        let once = profile(&subset(&["a"]), &aggregates).unwrap();
        let twice = profile(&subset(&["a", "a"]), &aggregates).unwrap();
        for c in [0u16, 1] {
            assert_eq!(once.per_class[&c].mean_relevance, twice.per_class[&c].mean_relevance);
        }
    }

    #[test]
    fn missing_aggregate_names_the_sample() {
        let aggregates = BTreeMap::new();
        let err = profile(&subset(&["ghost"]), &aggregates).unwrap_err();
        assert!(err.to_string().contains("ghost"));
    }

    fn profile_from_means(means: &[f64]) -> ClassRelevanceProfile {
        ClassRelevanceProfile {
            threshold: 100.0,
            per_class: means
                .iter()
                .enumerate()
                .map(|(c, &m)| {
                    (
                        c as u16,
                        ClassStat {
                            total_relevance: m * 10.0,
                            total_pixels: 10,
                            mean_relevance: m,
                        },
                    )
                })
                .collect(),
        }
    }

    #[test]
    fn entropy_hand_cases() {
        assert_eq!(relevance_entropy(&profile_from_means(&[3.0])).unwrap(), 0.0);
        let uniform = relevance_entropy(&profile_from_means(&[1.0; 4])).unwrap();
        assert!((uniform - 4.0f64.ln()).abs() < 1e-12);
        let skewed = relevance_entropy(&profile_from_means(&[2.0, 1.0, 1.0])).unwrap();
        assert!((skewed - 1.5 * 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_rejects_all_zero_means() {
        assert!(matches!(
            relevance_entropy(&profile_from_means(&[0.0, 0.0])),
            Err(Error::DegenerateDistribution(_))
        ));
    }

    fn index_of(values: &[f64]) -> ExternalIndex {
        ExternalIndex::new(
            "test",
            values
                .iter()
                .enumerate()
                .map(|(c, &v)| (c as u16, v))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn pearson_hand_cases() {
        let p = profile_from_means(&[1.0, 2.0, 3.0]);
        assert!((pearson(&p, &index_of(&[1.0, 2.0, 3.0]), false).unwrap() - 1.0).abs() < 1e-12);
        assert!(
            (pearson(&p, &index_of(&[-1.0, -2.0, -3.0]), false).unwrap() + 1.0).abs() < 1e-12
        );
        let r = pearson(&p, &index_of(&[10.0, 30.0, 20.0]), false).unwrap();
        assert!((r - 0.5).abs() < 1e-12, "r = {r}");
    }

    #[test]
    fn pearson_is_affine_invariant_and_sign_flips() {
        let p = profile_from_means(&[0.3, 1.2, 0.9, 2.2]);
        let idx = index_of(&[4.0, 1.0, 3.0, 2.0]);
        let base = pearson(&p, &idx, false).unwrap();
        let scaled = index_of(&[4.0 * 7.0 + 3.0, 1.0 * 7.0 + 3.0, 3.0 * 7.0 + 3.0, 2.0 * 7.0 + 3.0]);
        assert!((pearson(&p, &scaled, false).unwrap() - base).abs() < 1e-12);
        let negated = index_of(&[-4.0, -1.0, -3.0, -2.0]);
        assert!((pearson(&p, &negated, false).unwrap() + base).abs() < 1e-12);
    }

    #[test]
    fn rank_switch_uses_spearman_style_ranks() {
        let p = profile_from_means(&[1.0, 2.0, 10.0]);
        let idx = index_of(&[10.0, 30.0, 20.0]);
        let raw = pearson(&p, &idx, false).unwrap();
        let ranked = pearson(&p, &idx, true).unwrap();
        assert!((ranked - 0.5).abs() < 1e-12);
        assert!((raw - ranked).abs() > 1e-3);
    }

    #[test]
    fn pearson_error_paths() {
        let p = profile_from_means(&[1.0, 2.0]);
        assert!(matches!(
            pearson(&p, &index_of(&[5.0, 5.0]), false),
            Err(Error::UndefinedCorrelation(_))
        ));
        let constant = profile_from_means(&[3.0, 3.0]);
        assert!(matches!(
            pearson(&constant, &index_of(&[1.0, 2.0]), false),
            Err(Error::UndefinedCorrelation(_))
        ));
        let few = ExternalIndex {
            name: "few".into(),
            values: BTreeMap::from([(9u16, 1.0), (10u16, 2.0)]),
        };
        assert!(matches!(pearson(&p, &few, false), Err(Error::Input(_))));
    }

    #[test]
    fn external_index_csv_round_trip() {
        let dir = std::env::temp_dir().join("cfr-analysis-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("hii.csv");
        std::fs::write(&path, "0,0.9\n1,0.2\n3,0.5\n").unwrap();
        let idx = ExternalIndex::from_csv(&path).unwrap();
        assert_eq!(idx.name, "hii");
        assert_eq!(idx.values[&3], 0.5);
        std::fs::write(&path, "0,0.9\n0,0.2\n").unwrap();
        assert!(ExternalIndex::from_csv(&path).is_err());
    }
}
