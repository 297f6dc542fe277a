//! Orchestration of a full experiment: source training, stream
//! realisation and one adaptation run per (variant, method, seed).

use std::collections::BTreeMap;

use crate::adapt::{adapt_stream, MethodSpec, RunRecord};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::model::{evaluate, pretrain_source, AdaptState, HeadParams, SourceTrainConfig};
use crate::scenes::{build_stream, clean_set, DomainStream, SceneSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct SourceModel {
    pub params: HeadParams,
    /// Held-out clean confusion matrix.
    pub clean: ConfusionMatrix,
}

/// Clean training and held-out sets for a source configuration.
pub fn source_data(
    scene: &SceneSpec,
    cfg: &SourceTrainConfig,
) -> Result<(Vec<(crate::grids::Image, crate::grids::LabelMap)>, Vec<(crate::grids::Image, crate::grids::LabelMap)>)> {
    let train = clean_set(scene, cfg.train_frames, cfg.seed)?;
    let heldout = clean_set(scene, cfg.heldout_frames, cfg.seed.wrapping_add(1))?;
    Ok((train, heldout))
}

pub fn train_source(scene: &SceneSpec, cfg: &SourceTrainConfig) -> Result<SourceModel> {
    scene.validate()?;
    let (train, heldout) = source_data(scene, cfg)?;
    let params = pretrain_source(&train, &heldout, scene.classes, cfg)?;
    let clean = evaluate(&params, &heldout)?;
    Ok(SourceModel { params, clean })
}

/// One adaptation run to perform.
#[derive(Clone, Debug, PartialEq)]
pub struct Job {
    pub variant: String,
    pub variant_index: usize,
    pub method: MethodSpec,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub record: RunRecord,
    pub state: AdaptState,
}

/// Where streams and source weights come from.
#[derive(Clone, Copy, Debug, Default)]
pub struct Inputs<'a> {
    /// Fixed stream used for every seed instead of generating one.
    pub stream: Option<&'a DomainStream>,
    /// Fixed source weights instead of training them.
    pub source: Option<&'a HeadParams>,
}

#[derive(Clone, Debug)]
pub struct Experiment {
    /// Source model per variant index (shared when variants agree on
    /// the scene and source sections).
    pub sources: Vec<SourceModel>,
    pub runs: Vec<RunOutput>,
}

/// Jobs in output order: variant, then method, then seed.
pub fn plan(cfg: &RunConfig) -> Result<(Vec<RunConfig>, Vec<Job>)> {
    let variants = cfg.variants()?;
    let mut jobs = Vec::new();
    for (vi, v) in variants.iter().enumerate() {
        for name in &v.config.methods {
            let method = v.config.method(name)?;
            for &seed in &v.config.seeds {
                jobs.push(Job {
                    variant: v.label.clone(),
                    variant_index: vi,
                    method: method.clone(),
                    seed,
                });
            }
        }
    }
    Ok((variants.into_iter().map(|v| v.config).collect(), jobs))
}

fn source_key(cfg: &RunConfig) -> Result<String> {
    let scene = toml::to_string(&cfg.scene).map_err(|e| Error::Config(e.to_string()))?;
    let source = toml::to_string(&cfg.source).map_err(|e| Error::Config(e.to_string()))?;
    Ok(format!("{scene}\n{source}"))
}

/// Trains (or adopts) the source models and runs every job. Results are
/// in [`plan`] order regardless of thread count.
pub fn run_experiment(cfg: &RunConfig, inputs: Inputs<'_>) -> Result<Experiment> {
    let (configs, jobs) = plan(cfg)?;
    let mut cache: BTreeMap<String, SourceModel> = BTreeMap::new();
    let mut sources = Vec::with_capacity(configs.len());
    for c in &configs {
        let model = match inputs.source {
            Some(p) => {
                let (_, heldout) = source_data(&c.scene, &c.source)?;
                SourceModel {
                    params: p.clone(),
                    clean: evaluate(p, &heldout)?,
                }
            }
            None => {
                let key = source_key(c)?;
                if let Some(m) = cache.get(&key) {
                    m.clone()
                } else {
                    let m = train_source(&c.scene, &c.source)?;
                    cache.insert(key, m.clone());
                    m
                }
            }
        };
        sources.push(model);
    }

    let run = |job: &Job| -> Result<RunOutput> {
        let c = &configs[job.variant_index];
        let generated;
        let stream = match inputs.stream {
            Some(s) => s,
            None => {
                generated = build_stream(&c.scene, &c.stream_for_seed(job.seed))?;
                &generated
            }
        };
        let (mut record, state) =
            adapt_stream(stream, &sources[job.variant_index].params, &job.method, job.seed, &c.adapt_options())?;
        record.variant = job.variant.clone();
        Ok(RunOutput { record, state })
    };

    #[cfg(feature = "parallel")]
    let runs = {
        use rayon::prelude::*;
        jobs.par_iter().map(run).collect::<Result<Vec<_>>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let runs = jobs.iter().map(run).collect::<Result<Vec<_>>>()?;

    Ok(Experiment { sources, runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{DomainKind, DomainSetting, StreamSpec};

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.scene.height = 12;
        cfg.scene.width = 16;
        cfg.stream = StreamSpec {
            schedule: vec![DomainSetting {
                kind: DomainKind::Fog,
                severity: 0.5,
            }],
            rounds: 2,
            frames_per_domain: 2,
            seed: 5,
        };
        cfg.source.train_frames = 4;
        cfg.source.heldout_frames = 2;
        cfg.source.epochs = 2;
        cfg.source.target_miou = 0.0;
        cfg.seeds = vec![0, 1];
        cfg.methods = vec!["source".into(), "fixed-threshold".into()];
        cfg.views = crate::augment::ViewSet::identity();
        cfg
    }

    #[test]
    fn plan_orders_variant_method_seed() {
        let mut cfg = tiny();
        cfg.sweep.insert("adapt.lr".into(), vec![toml::Value::Float(0.1), toml::Value::Float(0.2)]);
        let (configs, jobs) = plan(&cfg).unwrap();
        assert_eq!(configs.len(), 2);
        let order: Vec<(usize, &str, u64)> = jobs
            .iter()
            .map(|j| (j.variant_index, j.method.name.as_str(), j.seed))
            .collect();
        assert_eq!(order[..4], [(0, "source", 0), (0, "source", 1), (0, "fixed-threshold", 0), (0, "fixed-threshold", 1)]);
        assert_eq!(jobs[4].variant, "adapt.lr=0.2");
        assert_eq!(jobs[4].method.lr, 0.2);
    }

    #[test]
    fn experiment_runs_every_job_and_shares_the_source() {
        let mut cfg = tiny();
        cfg.sweep.insert("icat.tau0".into(), vec![toml::Value::Float(0.5), toml::Value::Float(0.9)]);
        let exp = run_experiment(&cfg, Inputs::default()).unwrap();
        assert_eq!(exp.runs.len(), 8);
        assert_eq!(exp.sources[0], exp.sources[1]);
        assert!(exp.runs.iter().all(|r| r.record.frames.len() == 4));
        assert_eq!(exp.runs[0].record.method, "source");
        assert_eq!(exp.runs[7].record.variant, "icat.tau0=0.9");
        let again = run_experiment(&cfg, Inputs::default()).unwrap();
        for (a, b) in exp.runs.iter().zip(&again.runs) {
            let strip = |r: &RunRecord| {
                let mut r = r.clone();
                r.frames.iter_mut().for_each(|f| f.wall_ms = 0.0);
                r
            };
            assert_eq!(strip(&a.record), strip(&b.record));
        }
    }
}
