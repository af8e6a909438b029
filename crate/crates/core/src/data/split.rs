//! Index-level train/val/test splits and nested low-data subsamples.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::descriptor::TaskKind;
use super::registry::Dataset;
use crate::error::{Error, Result};

pub const DEFAULT_RATIOS: [f64; 3] = [0.7, 0.1, 0.2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    pub ratios: [f64; 3],
}

impl DataSplit {
    pub fn parts(&self) -> [&[usize]; 3] {
        [&self.train, &self.val, &self.test]
    }

    /// Checks that the parts are pairwise disjoint and cover `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut owner: Vec<Option<usize>> = vec![None; n];
        const NAMES: [&str; 3] = ["train", "val", "test"];
        for (p, part) in self.parts().iter().enumerate() {
            for &i in part.iter() {
                let slot = owner.get_mut(i).ok_or_else(|| {
                    Error::SplitIntegrity(format!("{} lists index {i}, dataset has {n} items", NAMES[p]))
                })?;
                if let Some(q) = slot {
                    return Err(Error::SplitIntegrity(format!(
                        "index {i} appears in both {} and {}",
                        NAMES[*q], NAMES[p]
                    )));
                }
                *slot = Some(p);
            }
        }
        if let Some(missing) = owner.iter().position(Option::is_none) {
            let count = owner.iter().filter(|o| o.is_none()).count();
            return Err(Error::SplitIntegrity(format!(
                "{count} indices are in no part (first: {missing})"
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<DataSplit> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

/// Part sizes from cumulative boundaries: `round(r0 N)`, `round((r0+r1) N)`.
pub fn part_sizes(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let b1 = round_half_up(ratios[0] * n as f64).min(n);
    let b2 = round_half_up((ratios[0] + ratios[1]) * n as f64).clamp(b1, n);
    [b1, b2 - b1, n - b2]
}

fn check_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::Argument(format!("split ratios {ratios:?} must be non-negative")));
    }
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!("split ratios {ratios:?} must sum to 1")));
    }
    Ok(())
}

/// Splits `make_splits` for a dataset.
///
/// Errors for datasets that ship their own partition.
pub fn make_splits(handle: &Dataset, ratios: [f64; 3], seed: u64, stratified: bool) -> Result<DataSplit> {
    if handle.descriptor().has_predefined_splits {
        return Err(Error::PredefinedSplits(handle.name().to_string()));
    }
    let strata = stratified.then(|| handle.strata());
    split_indices(handle.len(), strata.as_deref(), ratios, seed)
}

/// Stratification default: on for binary data, off for multilabel.
pub fn default_stratified(kind: TaskKind) -> bool {
    kind == TaskKind::Binary
}

/// Core splitter over `0..n`, optionally stratified by `strata[i]`.
///
/// Part totals always follow [`part_sizes`]. With strata, each class gets
/// the floor or ceiling of its proportional share in every part.
pub fn split_indices(n: usize, strata: Option<&[usize]>, ratios: [f64; 3], seed: u64) -> Result<DataSplit> {
    check_ratios(ratios)?;
    if n == 0 {
        return Err(Error::Argument("cannot split an empty dataset".into()));
    }
    let totals = part_sizes(n, ratios);
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    match strata {
        Some(s) if s.len() != n => return Err(Error::Argument(format!("{} strata for {n} items", s.len()))),
        Some(s) => s
            .iter()
            .enumerate()
            .for_each(|(i, &c)| groups.entry(c).or_default().push(i)),
        None => {
            groups.insert(0, (0..n).collect());
        }
    }
    let counts: Vec<usize> = groups.values().map(Vec::len).collect();
    let alloc = controlled_rounding(&counts, ratios, totals);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (members, a) in groups.into_values().zip(alloc) {
        let mut members = members;
        members.shuffle(&mut rng);
        parts[0].extend_from_slice(&members[..a[0]]);
        parts[1].extend_from_slice(&members[a[0]..a[0] + a[1]]);
        parts[2].extend_from_slice(&members[a[0] + a[1]..]);
    }
    for p in parts.iter_mut() {
        p.sort_unstable();
    }
    let [train, val, test] = parts;
    Ok(DataSplit {
        train,
        val,
        test,
        seed,
        ratios,
    })
}

/// Rounds the table `counts[c] * ratios[p]` to integers so that each entry
/// is its floor or ceiling, rows sum to `counts[c]` and columns to `totals`.
///
/// Solved as a small max-flow over the fractional entries; if the column
/// totals are not reachable, falls back to per-row cumulative rounding.
fn controlled_rounding(counts: &[usize], ratios: [f64; 3], totals: [usize; 3]) -> Vec<[usize; 3]> {
    let k = counts.len();
    let exact: Vec<[f64; 3]> = counts.iter().map(|&n| ratios.map(|r| r * n as f64)).collect();
    let floor = |x: f64| (x + 1e-9).floor().max(0.0) as usize;
    let mut alloc: Vec<[usize; 3]> = exact.iter().map(|e| e.map(floor)).collect();
    let row_need: Vec<usize> = (0..k).map(|c| counts[c] - alloc[c].iter().sum::<usize>()).collect();
    let col_have: Vec<usize> = (0..3).map(|p| alloc.iter().map(|a| a[p]).sum()).collect();
    if (0..3).any(|p| col_have[p] > totals[p]) {
        return counts.iter().map(|&n| part_sizes(n, ratios)).collect();
    }
    let col_need: Vec<usize> = (0..3).map(|p| totals[p] - col_have[p]).collect();
    // nodes: 0 = source, 1..=k rows, k+1..=k+3 parts, k+4 sink
    let sink = k + 4;
    let mut cap = vec![vec![0usize; k + 5]; k + 5];
    for c in 0..k {
        cap[0][c + 1] = row_need[c];
        for p in 0..3 {
            if exact[c][p] - alloc[c][p] as f64 > 1e-9 {
                cap[c + 1][k + 1 + p] = 1;
            }
        }
    }
    for p in 0..3 {
        cap[k + 1 + p][sink] = col_need[p];
    }
    let mut flow = vec![vec![0isize; k + 5]; k + 5];
    let mut total = 0;
    while let Some(path) = augmenting_path(&cap, &flow, sink) {
        for w in path.windows(2) {
            flow[w[0]][w[1]] += 1;
            flow[w[1]][w[0]] -= 1;
        }
        total += 1;
    }
    if total != row_need.iter().sum::<usize>() || total != col_need.iter().sum::<usize>() {
        return counts.iter().map(|&n| part_sizes(n, ratios)).collect();
    }
    for c in 0..k {
        for p in 0..3 {
            if flow[c + 1][k + 1 + p] > 0 {
                alloc[c][p] += 1;
            }
        }
    }
    alloc
}

fn augmenting_path(cap: &[Vec<usize>], flow: &[Vec<isize>], sink: usize) -> Option<Vec<usize>> {
    let n = cap.len();
    let mut prev = vec![usize::MAX; n];
    prev[0] = 0;
    let mut queue = std::collections::VecDeque::from([0usize]);
    while let Some(u) = queue.pop_front() {
        for v in 0..n {
            if prev[v] == usize::MAX && (cap[u][v] as isize - flow[u][v]) > 0 {
                prev[v] = u;
                if v == sink {
                    let mut path = vec![sink];
                    let mut at = sink;
                    while at != 0 {
                        at = prev[at];
                        path.push(at);
                    }
                    path.reverse();
                    return Some(path);
                }
                queue.push_back(v);
            }
        }
    }
    None
}

/// Where each part of a predefined partition is listed: one entry per line,
/// either a manifest row index or an image path from the manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitFiles {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
}

pub fn load_predefined_splits(handle: &Dataset, files: &SplitFiles) -> Result<DataSplit> {
    let read = |p: &Path| -> Result<Vec<String>> {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect())
    };
    predefined_from_lists(handle, [read(&files.train)?, read(&files.val)?, read(&files.test)?])
}

/// Resolves part lists (indices or manifest paths) into a validated split.
pub fn predefined_from_lists(handle: &Dataset, parts: [Vec<String>; 3]) -> Result<DataSplit> {
    if !handle.descriptor().has_predefined_splits {
        return Err(Error::Argument(format!("`{}` has no predefined splits", handle.name())));
    }
    let by_path: std::collections::HashMap<&str, usize> = handle
        .items()
        .iter()
        .enumerate()
        .map(|(i, it)| (it.path.as_str(), i))
        .collect();
    let resolve = |entry: &String| -> Result<usize> {
        if let Some(&i) = by_path.get(entry.as_str()) {
            return Ok(i);
        }
        entry
            .parse::<usize>()
            .map_err(|_| Error::SplitIntegrity(format!("`{entry}` is neither an index nor a manifest path")))
    };
    let mut resolved: [Vec<usize>; 3] = Default::default();
    for (out, part) in resolved.iter_mut().zip(&parts) {
        *out = part.iter().map(resolve).collect::<Result<_>>()?;
    }
    let n = handle.len() as f64;
    let ratios = [0, 1, 2].map(|p| resolved[p].len() as f64 / n);
    let [train, val, test] = resolved;
    let split = DataSplit {
        train,
        val,
        test,
        seed: 0,
        ratios,
    };
    split.validate(handle.len())?;
    Ok(DataSplit {
        train: sorted(split.train),
        val: sorted(split.val),
        test: sorted(split.test),
        ..split
    })
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

pub fn subsample_size(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 + 1e-9).floor() as usize).clamp(1, n.max(1))
}

/// Keeps `max(1, floor(fraction * |train|))` training items; val and test
/// are untouched. For a fixed seed, smaller fractions give subsets of larger
/// ones because every fraction takes a prefix of the same ordering.
pub fn subsample_training(split: &DataSplit, fraction: f64, seed: u64, strata: Option<&[usize]>) -> Result<DataSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!(
            "training fraction {fraction} is outside (0, 1]"
        )));
    }
    if split.train.is_empty() {
        return Err(Error::Argument("split has no training items".into()));
    }
    let order = training_order(&split.train, seed, strata)?;
    let keep = subsample_size(fraction, split.train.len());
    Ok(DataSplit {
        train: sorted(order[..keep].to_vec()),
        ..split.clone()
    })
}

/// Seeded ordering of the training items. With strata, items are interleaved
/// so every prefix holds each class close to its proportional share.
pub fn training_order(train: &[usize], seed: u64, strata: Option<&[usize]>) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = train.to_vec();
    order.shuffle(&mut rng);
    let Some(strata) = strata else { return Ok(order) };
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in &order {
        let c = *strata
            .get(i)
            .ok_or_else(|| Error::Argument(format!("no stratum for item {i}")))?;
        groups.entry(c).or_default().push(i);
    }
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(order.len());
    for (c, members) in &groups {
        let n = members.len() as f64;
        keyed.extend(members.iter().enumerate().map(|(j, &i)| ((j as f64 + 0.5) / n, *c, i)));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(keyed.into_iter().map(|(_, _, i)| i).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowDataPlan {
    pub fractions: Vec<f64>,
    pub seed: u64,
}

impl Default for LowDataPlan {
    fn default() -> Self {
        LowDataPlan {
            fractions: vec![0.05, 0.10, 0.20, 0.50, 1.00],
            seed: 0,
        }
    }
}

impl LowDataPlan {
    pub fn validate(&self) -> Result<()> {
        if self.fractions.is_empty() {
            return Err(Error::Argument("low-data plan lists no fractions".into()));
        }
        if let Some(f) = self.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::Argument(format!("training fraction {f} is outside (0, 1]")));
        }
        if self.fractions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Argument(format!(
                "fractions {:?} must be strictly increasing",
                self.fractions
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::descriptor::{inspection_dataset, DatasetDescriptor, Source};
    use crate::data::manifest::ManifestRow;
    use crate::data::registry::register_dataset;

    fn plain(n: usize) -> Dataset {
        let d = DatasetDescriptor {
            name: "plain".into(),
            task_kind: TaskKind::Binary,
            class_names: vec!["no".into(), "yes".into()],
            item_count: n,
            source: Source::Inline,
            has_predefined_splits: false,
            alternate_counts: vec![],
        };
        let rows: Vec<_> = (0..n)
            .map(|i| ManifestRow::new(format!("{i}.png"), &[if i % 3 == 0 { "yes" } else { "no" }]))
            .collect();
        (*register_dataset(d, &rows).unwrap()).clone()
    }

    #[test]
    fn cumulative_rounding_sizes() {
        assert_eq!(part_sizes(1027, DEFAULT_RATIOS), [719, 103, 205]);
        assert_eq!(part_sizes(10, DEFAULT_RATIOS), [7, 1, 2]);
        let s = make_splits(&plain(1027), DEFAULT_RATIOS, 7, false).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (719, 103, 205));
        s.validate(1027).unwrap();
        let s = make_splits(&plain(1027), DEFAULT_RATIOS, 7, true).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (719, 103, 205));
        for seed in 0..5 {
            let s = make_splits(&plain(10), DEFAULT_RATIOS, seed, false).unwrap();
            assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
        }
    }

    #[test]
    fn predefined_datasets_refuse_random_splits() {
        let mut d = inspection_dataset("ICCD").unwrap();
        d.item_count = 4;
        let rows: Vec<_> = (0..4).map(|i| ManifestRow::new(format!("{i}"), &["crack"])).collect();
        let h = register_dataset(d, &rows).unwrap();
        assert!(matches!(
            make_splits(&h, DEFAULT_RATIOS, 1, true),
            Err(Error::PredefinedSplits(_))
        ));
    }

    #[test]
    fn predefined_lists_checked() {
        let mut d = inspection_dataset("CODEBRIM").unwrap();
        d.item_count = 5;
        let rows: Vec<_> = (0..5)
            .map(|i| ManifestRow::new(format!("img{i}.png"), &["background"]))
            .collect();
        let h = register_dataset(d, &rows).unwrap();
        let lists = |a: &[&str], b: &[&str], c: &[&str]| [a, b, c].map(|p| p.iter().map(|s| s.to_string()).collect());
        let s = predefined_from_lists(&h, lists(&["0", "img1.png", "2"], &["3"], &["img4.png"])).unwrap();
        assert_eq!(s.train, vec![0, 1, 2]);
        assert!(matches!(
            predefined_from_lists(&h, lists(&["0", "1", "2"], &["2"], &["3", "4"])),
            Err(Error::SplitIntegrity(_))
        ));
        assert!(matches!(
            predefined_from_lists(&h, lists(&["0", "1"], &["2"], &["3"])),
            Err(Error::SplitIntegrity(_))
        ));
    }

    #[test]
    fn controlled_rounding_many_strata() {
        let counts = [3, 5, 7, 11, 1, 1, 2];
        let n: usize = counts.iter().sum();
        let totals = part_sizes(n, DEFAULT_RATIOS);
        let alloc = controlled_rounding(&counts, DEFAULT_RATIOS, totals);
        for p in 0..3 {
            assert_eq!(alloc.iter().map(|a| a[p]).sum::<usize>(), totals[p]);
        }
        for (a, &c) in alloc.iter().zip(&counts) {
            assert_eq!(a.iter().sum::<usize>(), c);
            for p in 0..3 {
                assert!((a[p] as f64 - DEFAULT_RATIOS[p] * c as f64).abs() < 1.0);
            }
        }
    }

    #[test]
    fn subsample_sizes_and_identity() {
        let base = DataSplit {
            train: (0..719).collect(),
            val: vec![],
            test: vec![],
            seed: 0,
            ratios: DEFAULT_RATIOS,
        };
        assert_eq!(subsample_training(&base, 0.05, 3, None).unwrap().train.len(), 35);
        assert_eq!(subsample_training(&base, 1.0, 3, None).unwrap(), base);
        let small = DataSplit {
            train: (0..10).collect(),
            ..base.clone()
        };
        assert_eq!(subsample_training(&small, 0.05, 3, None).unwrap().train.len(), 1);
        assert!(subsample_training(&base, 0.0, 3, None).is_err());
        assert!(subsample_training(&base, 1.5, 3, None).is_err());
    }

    #[test]
    fn split_json_round_trip() {
        let s = make_splits(&plain(50), DEFAULT_RATIOS, 4, true).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s.to_json().unwrap()).unwrap();
        for k in ["train", "val", "test", "seed", "ratios"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("split.json");
        s.save(&p).unwrap();
        assert_eq!(DataSplit::load(&p).unwrap(), s);
    }

    #[test]
    fn low_data_plan_rules() {
        LowDataPlan::default().validate().unwrap();
        let bad = LowDataPlan {
            fractions: vec![0.1, 0.1],
            seed: 0,
        };
        assert!(bad.validate().is_err());
    }
}
