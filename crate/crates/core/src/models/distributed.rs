use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{categorize, GlobalEnsemble, OverlapPolicy, SaffirSimpsonCategory, SpeedRange};
use crate::dataset::{DatasetIndex, Image};
use crate::error::{Error, Result};
use crate::network::Model;
use crate::predict::SpeedPredictor;
use crate::rng::derive_seed;
use crate::training::{train_model, TrainReport, TrainingHyper};

/// Gate ensemble plus per-category experts. Categories without an expert
/// fall back to the gate prediction.
#[derive(Clone, Debug)]
pub struct DistributedModel<G = GlobalEnsemble, E = Model<f32>> {
    pub gate: G,
    pub experts: BTreeMap<SaffirSimpsonCategory, E>,
    /// Training range of every expert (and of absent ones, for the record).
    pub ranges: BTreeMap<SaffirSimpsonCategory, SpeedRange>,
    pub overlap: OverlapPolicy,
}

/// How one image was routed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Routing {
    pub gate_speed: f32,
    pub category: SaffirSimpsonCategory,
    pub expert_speed: Option<f32>,
    pub final_speed: f32,
    /// True when no expert exists for `category` and the gate speed is used.
    pub fallback: bool,
}

impl<G: SpeedPredictor, E: SpeedPredictor> DistributedModel<G, E> {
    pub fn new(
        gate: G,
        experts: BTreeMap<SaffirSimpsonCategory, E>,
        ranges: BTreeMap<SaffirSimpsonCategory, SpeedRange>,
        overlap: OverlapPolicy,
    ) -> Result<Self> {
        for c in experts.keys() {
            let Some(r) = ranges.get(c) else {
                return Err(Error::Config(format!("expert {c} has no recorded range")));
            };
            if !r.contains_range(&c.nominal().clamp_hi(r.hi)) {
                return Err(Error::Config(format!("range {r} of expert {c} does not cover its category")));
            }
        }
        Ok(DistributedModel {
            gate,
            experts,
            ranges,
            overlap,
        })
    }

    /// Categories that route to the gate alone.
    pub fn fallbacks(&self) -> Vec<SaffirSimpsonCategory> {
        SaffirSimpsonCategory::ALL
            .into_iter()
            .filter(|c| !self.experts.contains_key(c))
            .collect()
    }

    /// Single-pass routing: gate speed picks the category, the category's
    /// expert (if any) is averaged with the gate.
    pub fn moe_predict(&self, images: &[&Image]) -> Result<Vec<Routing>> {
        let gate = self.gate.predict_speeds(images)?;
        let mut routes = Vec::with_capacity(images.len());
        let mut groups: BTreeMap<SaffirSimpsonCategory, Vec<usize>> = BTreeMap::new();
        for (i, &g) in gate.iter().enumerate() {
            let category = categorize(g as f64)?;
            let fallback = !self.experts.contains_key(&category);
            if !fallback {
                groups.entry(category).or_default().push(i);
            }
            routes.push(Routing {
                gate_speed: g,
                category,
                expert_speed: None,
                final_speed: g,
                fallback,
            });
        }
        for (category, members) in groups {
            let batch: Vec<&Image> = members.iter().map(|&i| images[i]).collect();
            let speeds = self.experts[&category]
                .predict_speeds(&batch)
                .map_err(|e| Error::Expert {
                    category: category.name().into(),
                    source: Box::new(e),
                })?;
            for (&i, e) in members.iter().zip(speeds) {
                let r = &mut routes[i];
                r.expert_speed = Some(e);
                r.final_speed = (r.gate_speed + e) / 2.0;
            }
        }
        Ok(routes)
    }
}

impl<G: SpeedPredictor, E: SpeedPredictor> SpeedPredictor for DistributedModel<G, E> {
    fn predict_speeds(&self, images: &[&Image]) -> Result<Vec<f32>> {
        Ok(self.moe_predict(images)?.into_iter().map(|r| r.final_speed).collect())
    }
}

impl SpeedRange {
    fn clamp_hi(mut self, hi: f64) -> SpeedRange {
        self.hi = self.hi.min(hi);
        self
    }
}

#[derive(Clone, Debug)]
pub struct ExpertTraining {
    pub experts: BTreeMap<SaffirSimpsonCategory, Model<f32>>,
    pub reports: BTreeMap<SaffirSimpsonCategory, TrainReport>,
    /// Categories whose range held no training samples.
    pub missing: Vec<SaffirSimpsonCategory>,
}

/// Trains one expert per category on the samples whose label lies in that
/// category's range. Experts train in parallel.
pub fn train_experts(
    train: &DatasetIndex,
    ranges: &BTreeMap<SaffirSimpsonCategory, SpeedRange>,
    hyper: &TrainingHyper,
    val: Option<&DatasetIndex>,
    seed: u64,
) -> Result<ExpertTraining> {
    hyper.validate()?;
    let mut jobs = Vec::new();
    let mut missing = Vec::new();
    for (&c, range) in ranges {
        let sub = train.filter(|s| range.contains(s.wind_speed as f64));
        if sub.is_empty() {
            missing.push(c);
        } else {
            let val_sub = val.map(|v| v.filter(|s| range.contains(s.wind_speed as f64)));
            jobs.push((c, sub, val_sub));
        }
    }
    let trained: Vec<(SaffirSimpsonCategory, Model<f32>, TrainReport)> = jobs
        .par_iter()
        .map(|(c, sub, val_sub)| {
            let expert_seed = derive_seed(seed, 1000 + c.level() as u64);
            let val_sub = val_sub.as_ref().filter(|v| !v.is_empty());
            train_model(sub, hyper, val_sub, expert_seed)
                .map(|(m, r)| (*c, m, r))
                .map_err(|e| Error::Expert {
                    category: c.name().into(),
                    source: Box::new(e),
                })
        })
        .collect::<Result<_>>()?;
    let mut experts = BTreeMap::new();
    let mut reports = BTreeMap::new();
    for (c, m, r) in trained {
        experts.insert(c, m);
        reports.insert(c, r);
    }
    Ok(ExpertTraining {
        experts,
        reports,
        missing,
    })
}
