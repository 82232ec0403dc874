//! Dataset plumbing: the binary tensor container, label rasters with their
//! class manifest, the seeded synthetic dataset generator, and dataset splits.

mod raster;
mod synthetic;
mod tensor_file;

pub use raster::{read_manifest, read_raster, write_manifest, write_raster, LabelRaster};
pub use synthetic::{
    default_class_names, generate_synthetic, read_dataset, render_sample, write_dataset,
    LoadedSample, SyntheticDataset, SyntheticSpec,
};
pub use tensor_file::{read_tensors, write_tensors};

use crate::error::{Error, Result};
use crate::rng::DetRng;

/// Seeded three-way split with largest-remainder rounding.
///
/// Returns disjoint, exhaustive index sets in (train, val, test) order.
pub fn split(
    n: usize,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let fs = [fractions.0, fractions.1, fractions.2];
    if fs.iter().any(|&f| f <= 0.0 || !f.is_finite()) {
        return Err(Error::Input(format!("fractions must be positive: {fs:?}")));
    }
    if (fs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Input(format!("fractions must sum to 1: {fs:?}")));
    }
    if n == 0 {
        return Err(Error::Input("empty dataset".into()));
    }
    let mut sizes = [0usize; 3];
    let mut remainders = [0.0f64; 3];
    for (i, f) in fs.iter().enumerate() {
        let exact = f * n as f64;
        sizes[i] = exact.floor() as usize;
        remainders[i] = exact - exact.floor();
    }
    let mut leftover = n - sizes.iter().sum::<usize>();
    // Hand leftover slots to the largest remainders; ties go to the earlier
    // split so the outcome is deterministic.
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| remainders[b].partial_cmp(&remainders[a]).unwrap().then(a.cmp(&b)));
    for &i in &order {
        if leftover == 0 {
            break;
        }
        sizes[i] += 1;
        leftover -= 1;
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::Input(format!(
            "split of {n} samples leaves an empty part: sizes {sizes:?}"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = DetRng::from_seed_stream(seed, 0);
    rng.shuffle(&mut indices);
    let train = indices[..sizes[0]].to_vec();
    let val = indices[sizes[0]..sizes[0] + sizes[1]].to_vec();
    let test = indices[sizes[0] + sizes[1]..].to_vec();
    Ok((train, val, test))
}
