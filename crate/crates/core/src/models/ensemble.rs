use rayon::prelude::*;

use crate::dataset::{bootstrap_subset, DatasetIndex, Image};
use crate::error::{Error, Result};
use crate::network::Model;
use crate::predict::SpeedPredictor;
use crate::rng::{derive_seed, stream_rng, streams};
use crate::training::{train_model, TrainReport, TrainingHyper};

/// Members whose predictions are averaged in knots.
#[derive(Clone, Debug)]
pub struct GlobalEnsemble<M = Model<f32>> {
    members: Vec<M>,
    seeds: Vec<u64>,
}

impl<M> GlobalEnsemble<M> {
    pub fn new(members: Vec<M>, seeds: Vec<u64>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidArgument("an ensemble needs at least one member".into()));
        }
        if seeds.len() != members.len() {
            return Err(Error::InvalidArgument(format!(
                "{} members but {} seeds",
                members.len(),
                seeds.len()
            )));
        }
        Ok(GlobalEnsemble { members, seeds })
    }

    pub fn members(&self) -> &[M] {
        &self.members
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

impl GlobalEnsemble<Model<f32>> {
    /// Checks that all members share an input size.
    pub fn from_models(members: Vec<Model<f32>>, seeds: Vec<u64>) -> Result<Self> {
        let e = Self::new(members, seeds)?;
        let size = e.input_size();
        if let Some(i) = e.members.iter().position(|m| m.config().input_size != size) {
            return Err(Error::Config(format!(
                "member {i} expects {}px input, member 0 expects {size}px",
                e.members[i].config().input_size
            )));
        }
        Ok(e)
    }

    pub fn input_size(&self) -> usize {
        self.members[0].config().input_size
    }
}

impl<M: SpeedPredictor + Send> SpeedPredictor for GlobalEnsemble<M> {
    /// Mean of member predictions, summed in member order.
    fn predict_speeds(&self, images: &[&Image]) -> Result<Vec<f32>> {
        let per_member: Vec<Vec<f32>> = self
            .members
            .par_iter()
            .enumerate()
            .map(|(index, m)| {
                m.predict_speeds(images).map_err(|e| Error::Member {
                    index,
                    source: Box::new(e),
                })
            })
            .collect::<Result<_>>()?;
        let k = per_member.len() as f64;
        Ok((0..images.len())
            .map(|i| (per_member.iter().map(|p| p[i] as f64).sum::<f64>() / k) as f32)
            .collect())
    }
}

/// Seed of member `i` derived from the ensemble seed.
pub fn member_seed(seed: u64, i: usize) -> u64 {
    derive_seed(seed, i as u64)
}

/// The bootstrap subset each member of an `m`-member ensemble trains on.
pub fn bootstrap_subsets(train: &DatasetIndex, m: usize, seed: u64) -> Vec<DatasetIndex> {
    (0..m)
        .map(|i| bootstrap_subset(train, &mut stream_rng(member_seed(seed, i), streams::BOOTSTRAP)))
        .collect()
}

#[derive(Clone, Debug)]
pub struct EnsembleTraining {
    pub ensemble: GlobalEnsemble,
    pub reports: Vec<TrainReport>,
}

/// Trains `m` members, each on its own storm-level bootstrap of `train`.
/// Members train in parallel on the current rayon pool; results do not depend
/// on the pool size.
pub fn bootstrap_train_ensemble(
    train: &DatasetIndex,
    m: usize,
    hyper: &TrainingHyper,
    val: Option<&DatasetIndex>,
    seed: u64,
) -> Result<EnsembleTraining> {
    if m == 0 {
        return Err(Error::Config("ensemble size must be >= 1".into()));
    }
    hyper.validate()?;
    if train.is_empty() {
        return Err(Error::Data("cannot train an ensemble on an empty dataset".into()));
    }
    let subsets = bootstrap_subsets(train, m, seed);
    let trained: Vec<(Model<f32>, TrainReport)> = subsets
        .par_iter()
        .enumerate()
        .map(|(index, subset)| {
            train_model(subset, hyper, val, member_seed(seed, index)).map_err(|e| Error::Member {
                index,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let seeds = (0..m).map(|i| member_seed(seed, i)).collect();
    let (members, reports) = trained.into_iter().unzip();
    Ok(EnsembleTraining {
        ensemble: GlobalEnsemble::from_models(members, seeds)?,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant(f32);

    impl SpeedPredictor for Constant {
        fn predict_speeds(&self, images: &[&Image]) -> Result<Vec<f32>> {
            Ok(vec![self.0; images.len()])
        }
    }

    #[test]
    fn mean_of_members() {
        let img = Image::new(1, vec![0.5]).unwrap();
        let e = GlobalEnsemble::new(vec![Constant(10.0), Constant(12.0), Constant(14.0)], vec![0, 1, 2]).unwrap();
        assert_eq!(e.predict_speeds(&[&img, &img]).unwrap(), vec![12.0, 12.0]);
        let one = GlobalEnsemble::new(vec![Constant(33.3)], vec![0]).unwrap();
        assert_eq!(one.predict_speeds(&[&img]).unwrap(), vec![33.3]);
    }

    #[test]
    fn rejects_empty() {
        assert!(GlobalEnsemble::<Constant>::new(vec![], vec![]).is_err());
    }
}
