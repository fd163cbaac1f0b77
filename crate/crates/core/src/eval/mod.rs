//! Evaluation suites and the metrics behind filtering performance.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clip::{train_clip, zero_shot_classify, Prototypes, TrainConfig, TwoTowerModel};
use crate::data::{generate_from_world, Perturbation, Pool, SyntheticSpec, World};
use crate::error::{Error, Result};
use crate::filter::{filter_pool, Dfn, FilterReport, Selection, DEFAULT_RECORDS_PER_SHARD};

pub const DEFAULT_GALLERY_SIZE: usize = 256;

/// A named shifted evaluation distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub name: String,
    pub perturbation: Perturbation,
}

/// How to draw an evaluation suite from a world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSpec {
    /// Sampling parameters of the in-distribution pool; `align_prob` is
    /// ignored (evaluation pairs are always aligned).
    pub base: SyntheticSpec,
    pub id_size: usize,
    pub shift_size: usize,
    pub retrieval_size: usize,
    pub shifts: Vec<ShiftSpec>,
}

/// Labeled evaluation pools plus the clean caption of every concept.
#[derive(Debug, Clone)]
pub struct EvalSuite {
    pub captions: Vec<Vec<f32>>,
    pub id: Pool,
    pub shifts: Vec<(String, Pool)>,
    pub retrieval: Pool,
}

/// Draws one labeled pool from a perturbed generator.
pub fn make_shifted_suite(world: &World, base: &SyntheticSpec, perturbation: Perturbation, n: usize, seed: u64) -> Result<Pool> {
    if let Perturbation::Noise { magnitude }
    | Perturbation::MapShift { magnitude, .. }
    | Perturbation::Dropout { magnitude } = perturbation
    {
        if !(magnitude >= 0.0) {
            return Err(Error::config(format!("shift magnitude {magnitude} must be >= 0")));
        }
    }
    let spec = SyntheticSpec {
        align_prob: 1.0,
        seed,
        ..base.clone()
    };
    generate_from_world(world, &spec, n, perturbation)
}

/// Builds a suite whose pools occupy consecutive id ranges starting at
/// `spec.base.id_offset`.
pub fn build_suite(world: &World, spec: &SuiteSpec) -> Result<EvalSuite> {
    let base = SyntheticSpec {
        align_prob: 1.0,
        ..spec.base.clone()
    };
    let mut next_id = base.id_offset;
    let mut draw = |n: usize, label: u64, perturbation: Perturbation| {
        let s = SyntheticSpec {
            id_offset: next_id,
            seed: crate::rng::derive(base.seed, label),
            ..base.clone()
        };
        next_id += n as u64;
        generate_from_world(world, &s, n, perturbation)
    };
    let id = draw(spec.id_size, 0, Perturbation::None)?;
    let retrieval = draw(spec.retrieval_size, 1, Perturbation::None)?;
    let mut shifts = Vec::with_capacity(spec.shifts.len());
    for (i, s) in spec.shifts.iter().enumerate() {
        shifts.push((s.name.clone(), draw(spec.shift_size, 2 + i as u64, s.perturbation)?));
    }
    Ok(EvalSuite {
        captions: world.clean_texts(),
        id,
        shifts,
        retrieval,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub id_accuracy: f64,
    pub shift_accuracies: BTreeMap<String, f64>,
    pub retrieval_image_to_text: f64,
    pub retrieval_text_to_image: f64,
    /// Mean of the id accuracy, every shift accuracy and both retrieval recalls.
    pub average: f64,
}

impl EvalReport {
    pub fn components(&self) -> Vec<f64> {
        let mut v = vec![self.id_accuracy];
        v.extend(self.shift_accuracies.values());
        v.push(self.retrieval_image_to_text);
        v.push(self.retrieval_text_to_image);
        v
    }

    /// Mean of id accuracy and the shift accuracies.
    pub fn robustness_average(&self) -> f64 {
        let mut v = vec![self.id_accuracy];
        v.extend(self.shift_accuracies.values());
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Fraction of labeled records whose zero-shot prediction equals the label.
pub fn zero_shot_accuracy(model: &TwoTowerModel, prototypes: &Prototypes, pool: &Pool) -> Result<f64> {
    if pool.is_empty() {
        return Err(Error::Empty("evaluation pool".into()));
    }
    let correct = (0..pool.len())
        .into_par_iter()
        .map(|i| {
            let r = pool.record(i);
            let label = r
                .concept
                .ok_or_else(|| Error::config(format!("evaluation record {} is unlabeled", r.id)))?;
            Ok::<_, Error>((zero_shot_classify(model, prototypes, r.image)? == label as usize) as usize)
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(correct as f64 / pool.len() as f64)
}

/// Recall@1 in both directions over galleries of `gallery` pairs.
///
/// Records are ordered by id and cut into consecutive galleries; a trailing
/// partial gallery is dropped unless it is the only one.
pub fn retrieval_recall(model: &TwoTowerModel, pool: &Pool, gallery: usize) -> Result<(f64, f64)> {
    if pool.is_empty() {
        return Err(Error::Empty("retrieval pool".into()));
    }
    if gallery == 0 {
        return Err(Error::config("gallery size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by_key(|&i| pool.ids()[i]);
    let sorted = pool.select(&order);
    let g = gallery.min(sorted.len());
    let n_galleries = sorted.len() / g;

    let hits: Vec<(usize, usize)> = (0..n_galleries)
        .into_par_iter()
        .map(|c| {
            let part = sorted.slice(c * g..(c + 1) * g);
            let img = model.encode_images(part.image_matrix())?;
            let txt = model.encode_texts(part.text_matrix())?;
            let sim = img.dot(&txt.t());
            let argmax = |it: ndarray::ArrayView1<f32>| {
                let mut best = (0, f32::NEG_INFINITY);
                for (j, &s) in it.iter().enumerate() {
                    if s > best.1 {
                        best = (j, s);
                    }
                }
                best.0
            };
            let i2t = (0..g).filter(|&i| argmax(sim.row(i)) == i).count();
            let t2i = (0..g).filter(|&j| argmax(sim.column(j)) == j).count();
            Ok((i2t, t2i))
        })
        .collect::<Result<_>>()?;
    let total = (n_galleries * g) as f64;
    let i2t = hits.iter().map(|h| h.0).sum::<usize>() as f64 / total;
    let t2i = hits.iter().map(|h| h.1).sum::<usize>() as f64 / total;
    Ok((i2t, t2i))
}

pub fn evaluate(model: &TwoTowerModel, suite: &EvalSuite, gallery: usize) -> Result<EvalReport> {
    if suite.captions.is_empty() {
        return Err(Error::Empty("evaluation suite has no class captions".into()));
    }
    let prototypes = Prototypes::encode(model, &suite.captions)?;
    let id_accuracy = zero_shot_accuracy(model, &prototypes, &suite.id)?;
    let mut shift_accuracies = BTreeMap::new();
    for (name, pool) in &suite.shifts {
        shift_accuracies.insert(name.clone(), zero_shot_accuracy(model, &prototypes, pool)?);
    }
    let (i2t, t2i) = retrieval_recall(model, &suite.retrieval, gallery)?;
    let mut report = EvalReport {
        id_accuracy,
        shift_accuracies,
        retrieval_image_to_text: i2t,
        retrieval_text_to_image: t2i,
        average: 0.0,
    };
    let c = report.components();
    report.average = c.iter().sum::<f64>() / c.len() as f64;
    Ok(report)
}

/// Result of filtering a pool and training the induced model on it.
#[derive(Debug, Clone)]
pub struct FilteringOutcome {
    pub eval: EvalReport,
    pub filter: FilterReport,
    pub model: TwoTowerModel,
}

/// Filters `raw_pool` with `dfn`, trains an induced model on the survivors
/// and evaluates it.
pub fn filtering_performance(
    dfn: &Dfn,
    raw_pool: &Pool,
    train_config: &TrainConfig,
    suite: &EvalSuite,
    workers: usize,
    gallery: usize,
) -> Result<FilteringOutcome> {
    let (induced, filter) = filter_pool(dfn, raw_pool, workers, DEFAULT_RECORDS_PER_SHARD)?;
    if induced.len() < 2 {
        let keep_fraction = match dfn.selection {
            Selection::KeepFraction { fraction, .. } => fraction,
            Selection::Threshold { .. } => filter.kept_fraction(),
        };
        return Err(Error::EmptyFilteredPool { keep_fraction });
    }
    let model = train_clip(&induced, train_config)?.model;
    let eval = evaluate(&model, suite, gallery)?;
    Ok(FilteringOutcome { eval, filter, model })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_concepts: 10,
            d_latent: 8,
            d_img: 12,
            d_txt: 12,
            align_prob: 1.0,
            noise_sigma: 0.0,
            world_seed: 5,
            seed: 6,
            id_offset: 1 << 40,
        }
    }

    fn suite(world: &World, noise: f64) -> EvalSuite {
        build_suite(
            world,
            &SuiteSpec {
                base: SyntheticSpec {
                    noise_sigma: noise,
                    ..world_spec()
                },
                id_size: 400,
                shift_size: 200,
                retrieval_size: 100,
                shifts: vec![ShiftSpec {
                    name: "noise".into(),
                    perturbation: Perturbation::Noise { magnitude: 0.2 },
                }],
            },
        )
        .unwrap()
    }

    #[test]
    fn report_average_is_the_mean_of_components() {
        let world = World::new(&world_spec()).unwrap();
        let s = suite(&world, 0.1);
        let m = TwoTowerModel::init(12, 12, 6, 1);
        let r = evaluate(&m, &s, 32).unwrap();
        let c = r.components();
        assert_eq!(c.len(), 4);
        assert!((r.average - c.iter().sum::<f64>() / 4.0).abs() < 1e-9);
        assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn gallery_of_one_is_perfect_recall() {
        let world = World::new(&world_spec()).unwrap();
        let s = suite(&world, 0.3);
        let m = TwoTowerModel::init(12, 12, 6, 2);
        assert_eq!(retrieval_recall(&m, &s.retrieval, 1).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn suites_have_disjoint_ids() {
        let world = World::new(&world_spec()).unwrap();
        let s = suite(&world, 0.1);
        let mut all: Vec<u64> = s.id.ids().to_vec();
        all.extend(s.retrieval.ids());
        all.extend(s.shifts[0].1.ids());
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n);
    }

    #[test]
    fn evaluation_is_permutation_invariant() {
        let world = World::new(&world_spec()).unwrap();
        let s = suite(&world, 0.3);
        let m = TwoTowerModel::init(12, 12, 6, 3);
        let rev = |p: &Pool| p.select(&(0..p.len()).rev().collect::<Vec<_>>());
        let permuted = EvalSuite {
            captions: s.captions.clone(),
            id: rev(&s.id),
            shifts: s.shifts.iter().map(|(n, p)| (n.clone(), rev(p))).collect(),
            retrieval: rev(&s.retrieval),
        };
        assert_eq!(evaluate(&m, &s, 32).unwrap(), evaluate(&m, &permuted, 32).unwrap());
    }

    #[test]
    fn empty_pools_are_errors() {
        let m = TwoTowerModel::init(12, 12, 6, 3);
        let p = Prototypes::encode(&m, &[vec![1.0; 12]]).unwrap();
        assert!(zero_shot_accuracy(&m, &p, &Pool::new(12, 12)).is_err());
        assert!(retrieval_recall(&m, &Pool::new(12, 12), 4).is_err());
    }
}
