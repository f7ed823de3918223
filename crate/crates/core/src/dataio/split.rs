//! Stratified train/val/test split.
//!
//! Iterative stratification, run per branch: genres are processed rarest
//! first; each of a genre's unassigned samples goes to a split that still
//! lacks the genre (if any), else to the split with the largest remaining
//! demand for the genre. Split sizes are fixed up front by largest-remainder
//! rounding so the requested ratio is met exactly within each branch.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataio::BookRecord;
use crate::error::{Error, Result};
use crate::seed;
use crate::taxonomy::{Branch, GenreTaxonomy};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn parts(&self) -> [&[String]; 3] {
        [&self.train, &self.val, &self.test]
    }
}

pub const MIN_PER_BRANCH: usize = 10;

/// Split sizes for `n` items under `ratio`, by largest remainder.
fn target_sizes(n: usize, ratio: [u32; 3]) -> [usize; 3] {
    let total: u64 = ratio.iter().map(|&r| u64::from(r)).sum();
    let mut sizes = [0usize; 3];
    let mut rems = [(0u64, 0usize); 3];
    for s in 0..3 {
        let num = n as u64 * u64::from(ratio[s]);
        sizes[s] = (num / total) as usize;
        rems[s] = (num % total, s);
    }
    let mut left = n - sizes.iter().sum::<usize>();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(rem, s) in rems.iter() {
        if left == 0 {
            break;
        }
        if rem > 0 || ratio[s] > 0 {
            sizes[s] += 1;
            left -= 1;
        }
    }
    sizes
}

pub fn split_dataset(
    records: &[BookRecord],
    taxonomy: &GenreTaxonomy,
    ratio: [u32; 3],
    seed_value: u64,
) -> Result<DatasetSplit> {
    if ratio.iter().all(|&r| r == 0) {
        return Err(Error::Config("split ratio is all zeros".into()));
    }
    let mut rng = seed::substream(seed_value, "split");
    let mut out: [Vec<String>; 3] = Default::default();

    for branch in Branch::ALL {
        let mut members: Vec<&BookRecord> = records.iter().filter(|r| r.level1 == branch).collect();
        if members.len() < MIN_PER_BRANCH {
            return Err(Error::Size(format!(
                "{branch} has {} records, need at least {MIN_PER_BRANCH}",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let m = taxonomy.len(branch);
        let labels: Vec<Vec<usize>> = members
            .iter()
            .map(|r| r.labels(taxonomy).map(|l| l.active().collect()))
            .collect::<Result<_>>()?;

        let sizes = target_sizes(members.len(), ratio);
        let total: f64 = ratio.iter().map(|&r| f64::from(r)).sum();
        let mut capacity = sizes;
        let mut genre_count = vec![0usize; m];
        for ls in &labels {
            for &g in ls {
                genre_count[g] += 1;
            }
        }
        let mut demand: Vec<[f64; 3]> = genre_count
            .iter()
            .map(|&c| std::array::from_fn(|s| c as f64 * f64::from(ratio[s]) / total))
            .collect();
        let mut present = vec![[false; 3]; m];
        let mut assigned: Vec<Option<usize>> = vec![None; members.len()];
        let mut remaining = genre_count.clone();
        let mut left = members.len();

        while left > 0 {
            // Rarest genre that still has unassigned samples; records without
            // any pending genre fall through to the capacity-only pass below.
            let Some(g) = (0..m).filter(|&g| remaining[g] > 0).min_by_key(|&g| (remaining[g], g)) else {
                break;
            };
            let pending: Vec<usize> = (0..members.len())
                .filter(|&i| assigned[i].is_none() && labels[i].contains(&g))
                .collect();
            for i in pending {
                let open = |s: usize| capacity[s] > 0;
                let lacking = (0..3).find(|&s| open(s) && ratio[s] > 0 && !present[g][s]);
                let s = lacking.unwrap_or_else(|| {
                    (0..3)
                        .filter(|&s| open(s))
                        .max_by(|&a, &b| {
                            demand[g][a]
                                .total_cmp(&demand[g][b])
                                .then(capacity[a].cmp(&capacity[b]))
                                .then(b.cmp(&a))
                        })
                        .expect("capacity remains while samples remain")
                });
                assigned[i] = Some(s);
                capacity[s] -= 1;
                left -= 1;
                for &h in &labels[i] {
                    demand[h][s] -= 1.0;
                    present[h][s] = true;
                    remaining[h] -= 1;
                }
            }
        }
        for i in 0..members.len() {
            if assigned[i].is_none() {
                let s = (0..3).max_by_key(|&s| (capacity[s], std::cmp::Reverse(s))).unwrap();
                assigned[i] = Some(s);
                capacity[s] -= 1;
            }
        }
        for (i, r) in members.iter().enumerate() {
            out[assigned[i].unwrap()].push(r.id.clone());
        }
    }

    // Present ids in manifest order within each part.
    let order: std::collections::HashMap<&str, usize> =
        records.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    for part in out.iter_mut() {
        part.sort_by_key(|id| order[id.as_str()]);
    }
    let [train, val, test] = out;
    Ok(DatasetSplit { train, val, test })
}
