use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{CycloneSample, DatasetIndex};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, streams};

/// Partitions storms (not images) into train and validation sets so no storm
/// contributes to both.
pub fn event_disjoint_split(index: &DatasetIndex, val_fraction: f64, seed: u64) -> Result<(DatasetIndex, DatasetIndex)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "val_fraction {val_fraction} must be in (0, 1)"
        )));
    }
    let total = index.storm_count();
    if total < 2 {
        return Err(Error::Data(format!("event-disjoint split needs at least 2 storms, found {total}")));
    }
    let mut storms: Vec<&str> = index.storm_ids().collect();
    let mut rng = stream_rng(seed, streams::SPLIT);
    storms.shuffle(&mut rng);
    let n_val = ((val_fraction * total as f64).round() as usize).clamp(1, total - 1);
    let val: BTreeSet<&str> = storms[..n_val].iter().copied().collect();
    let train = index.filter(|s| !val.contains(s.storm_id.as_str()));
    let val = index.filter(|s| val.contains(s.storm_id.as_str()));
    Ok((train, val))
}

/// Storm-level bootstrap: draws as many storms as `index` has, with
/// replacement, then adds one uniformly chosen storm for every speed bin the
/// draw missed. Repeated draws of a storm become distinct storms (`id#k`).
pub fn bootstrap_subset<R: Rng + ?Sized>(index: &DatasetIndex, rng: &mut R) -> DatasetIndex {
    let storms: Vec<&str> = index.storm_ids().collect();
    if storms.is_empty() {
        return DatasetIndex::default();
    }
    let mut copies = vec![0usize; storms.len()];
    let mut draws: Vec<(usize, usize)> = Vec::new();
    let mut covered: BTreeSet<u32> = BTreeSet::new();
    let mut take = |s: usize, draws: &mut Vec<(usize, usize)>, covered: &mut BTreeSet<u32>| {
        copies[s] += 1;
        draws.push((s, copies[s]));
        covered.extend(index.storm(storms[s]).iter().map(|&i| index.samples()[i].speed_key()));
    };
    for _ in 0..storms.len() {
        take(rng.random_range(0..storms.len()), &mut draws, &mut covered);
    }
    for speed in index.speeds().collect::<Vec<_>>() {
        if covered.contains(&speed) {
            continue;
        }
        let holders: Vec<&String> = index.storms_at_speed(speed).expect("speed from index").keys().collect();
        let pick = holders[rng.random_range(0..holders.len())];
        let s = storms.binary_search(&pick.as_str()).expect("known storm");
        take(s, &mut draws, &mut covered);
    }
    let mut samples: Vec<CycloneSample> = Vec::new();
    for (s, k) in draws {
        for &i in index.storm(storms[s]) {
            let mut s = index.samples()[i].clone();
            if k > 1 {
                s.storm_id = format!("{}#{k}", s.storm_id);
                s.image_id = format!("{}#{k}", s.image_id);
            }
            samples.push(s);
        }
    }
    DatasetIndex::new(samples).expect("copies carry distinct ids")
}
