//! Dataset acquisition: build overlay datasets from IDX sources, with a
//! binary cache so repeated runs skip the pairing work.

use std::fs;
use std::path::{Path, PathBuf};

use mtvib_core::data::{build_dataset, source_paths, Dataset, Source};

use crate::error::{HarnessError, Result};

fn cache_path(data_dir: &Path, source: Source, n: usize, seed: u64, split: &str) -> PathBuf {
    data_dir
        .join("cache")
        .join(format!("{}-{n}-s{seed}-{split}.mtvb", source.as_str()))
}

/// Train and test overlay datasets for `source`, built from the IDX files
/// under `data_dir` (or loaded from cache when already built once).
pub fn load_pair_datasets(
    data_dir: &Path,
    source: Source,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let train_path = cache_path(data_dir, source, n_train, seed, "train");
    let test_path = cache_path(data_dir, source, n_test, seed, "test");
    if train_path.is_file() && test_path.is_file() {
        let train = Dataset::read_cache(&train_path)?;
        let test = Dataset::read_cache(&test_path)?;
        return Ok((train, test));
    }

    for p in source_paths(data_dir, source) {
        if !p.is_file() {
            return Err(HarnessError::Config(format!(
                "missing source file {} — run `mtvib synth --data-dir {}` to generate a \
                 corpus, or drop the standard IDX files there",
                p.display(),
                data_dir.display()
            )));
        }
    }

    let (train, test) = build_dataset(data_dir, source, n_train, n_test, seed)?;

    let cache_dir = data_dir.join("cache");
    fs::create_dir_all(&cache_dir).map_err(|e| HarnessError::io(&cache_dir, e))?;
    train.write_cache(&train_path)?;
    test.write_cache(&test_path)?;
    Ok((train, test))
}
