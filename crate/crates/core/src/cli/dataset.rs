//! Dataset directory: `dataset.json`, `splits.json`, `cubes/<id>/` and `history/<location>/`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::HistoryStack;
use crate::binio::{create_dir, read_json, write_json};
use crate::error::{ensure, Error, Result};
use crate::hashing::config_hash;
use crate::minicube::{generate_dataset, load_minicube, save_minicube, Dataset, Split, SplitSpec, SyntheticWorldParams};

pub const DATASET_FORMAT: &str = "dataset/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub hash: String,
    pub world: SyntheticWorldParams,
    pub splits: SplitSpec,
    pub counts: BTreeMap<Split, usize>,
}

/// Lowers subset counts so they sum to at most `total`, taking one cube from each
/// subset in turn.
pub fn cap_counts(spec: &SplitSpec, total: usize) -> SplitSpec {
    let mut out = spec.clone();
    let mut counts = vec![0; spec.subsets.len()];
    let mut left = total;
    while left > 0 {
        let mut progressed = false;
        for (i, s) in spec.subsets.iter().enumerate() {
            if left > 0 && counts[i] < s.count {
                counts[i] += 1;
                left -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    for (s, c) in out.subsets.iter_mut().zip(counts) {
        s.count = c;
    }
    out
}

pub fn dataset_hash(world: &SyntheticWorldParams, splits: &SplitSpec) -> String {
    config_hash(&(DATASET_FORMAT, world, splits))
}

/// Generates the benchmark and writes it under `dir`.
pub fn write_dataset(dir: &Path, world: &SyntheticWorldParams, splits: &SplitSpec) -> Result<(DatasetManifest, Dataset)> {
    world.validate()?;
    splits.validate()?;
    let ds = generate_dataset(world, splits)?;
    create_dir(dir)?;
    let mut by_split: BTreeMap<Split, Vec<String>> = BTreeMap::new();
    for cube in &ds.cubes {
        save_minicube(cube, &dir.join("cubes").join(&cube.id))?;
        by_split.entry(cube.split).or_default().push(cube.id.clone());
    }
    for (loc, h) in &ds.histories {
        h.save(&dir.join("history").join(loc))?;
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        hash: dataset_hash(world, splits),
        world: world.clone(),
        splits: splits.clone(),
        counts: by_split.iter().map(|(k, v)| (*k, v.len())).collect(),
    };
    write_json(&dir.join("splits.json"), &by_split)?;
    write_json(&dir.join("dataset.json"), &manifest)?;
    Ok((manifest, ds))
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Dataset)> {
    let mpath = dir.join("dataset.json");
    let manifest: DatasetManifest = read_json(&mpath)?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::format(&mpath, "format", format!("expected {DATASET_FORMAT}, found {}", manifest.format)));
    }
    let by_split: BTreeMap<Split, Vec<String>> = read_json(&dir.join("splits.json"))?;
    let mut cubes = Vec::new();
    let mut histories = BTreeMap::new();
    for (split, ids) in &by_split {
        for id in ids {
            let cdir = dir.join("cubes").join(id);
            let cube = load_minicube(&cdir)?;
            if cube.split != *split {
                return Err(Error::format(&cdir, "split", format!("cube is tagged {} but listed under {split}", cube.split)));
            }
            if !histories.contains_key(&cube.location_id) {
                let h = HistoryStack::load(&dir.join("history").join(&cube.location_id))?;
                histories.insert(cube.location_id.clone(), h);
            }
            cubes.push(cube);
        }
    }
    ensure!(!cubes.is_empty(), "dataset at {} has no cubes", dir.display());
    Ok((manifest, Dataset { cubes, histories }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn caps_are_spread_over_splits() {
        let capped = cap_counts(&SplitSpec::desk(), 10);
        assert_eq!(capped.subsets.iter().map(|s| s.count).collect::<Vec<_>>(), vec![2; 5]);
        let capped = cap_counts(&SplitSpec::desk(), 10_000);
        assert_eq!(capped, SplitSpec::desk());
    }

    #[test]
    fn written_dataset_reads_back_identically() {
        let mut w = SyntheticWorldParams::desk(3);
        w.height = 8;
        w.width = 8;
        let spec = cap_counts(&SplitSpec::desk(), 5);
        let dir = tempfile::tempdir().unwrap();
        let (m, ds) = write_dataset(dir.path(), &w, &spec).unwrap();
        let (m2, back) = read_dataset(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(ds.cubes.len(), 5);
        let ids = |d: &Dataset| d.cubes.iter().map(|c| c.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&ds), ids(&back));
        for (a, b) in ds.cubes.iter().zip(&back.cubes) {
            let bits = |c: &crate::minicube::Minicube| c.ndvi.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(ds.histories.keys().collect::<Vec<_>>(), back.histories.keys().collect::<Vec<_>>());
    }
}
