//! Experiment harness: one (sensor config, architecture) cell under a
//! training protocol, producing the overall evaluation plus per-subject
//! repeated scores for paired testing.
//!
//! Normalization statistics are always fitted on the fold's training split
//! and reused for its test split. Repeated per-subject evaluations share the
//! trained model and differ by an evaluation seed that draws an 80% subsample
//! of that subject's test windows; the seeds depend only on the master seed,
//! subject, and repeat index, so scores pair across configurations.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{Model, ModelError, ModelKind, ModelSpec};
use crate::preprocess::{
    apply_normalizer, fit_normalizer, loso_folds, split_random, PreprocessError, SensorConfig,
    WindowSet,
};
use crate::stats::KeyedScores;
use crate::train::{evaluate, train, ConfusionMatrix, EvalResult, Hyperparams, TrainError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment parameter: {0}")]
    Param(String),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "random80_20")]
    Random8020,
    #[serde(rename = "loso")]
    Loso,
}

impl Protocol {
    pub fn tag(self) -> &'static str {
        match self {
            Protocol::Random8020 => "random80_20",
            Protocol::Loso => "loso",
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "random80_20" | "random" | "80_20" => Ok(Protocol::Random8020),
            "loso" => Ok(Protocol::Loso),
            other => Err(format!(
                "unknown protocol {other:?} (expected random80_20 or loso)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreRow {
    pub subject: u16,
    pub repeat: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub config: SensorConfig,
    pub kind: ModelKind,
    pub protocol: Protocol,
    pub overall: EvalResult,
    /// One row per (subject, repeat), ascending.
    pub scores: Vec<ScoreRow>,
}

impl ExperimentResult {
    pub fn f1_keyed(&self) -> KeyedScores {
        self.scores
            .iter()
            .map(|r| ((r.subject, r.repeat), r.macro_f1))
            .collect()
    }
}

fn eval_seed(master: u64, subject: u16, repeat: usize) -> u64 {
    let s = (subject as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let r = (repeat as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03);
    master ^ s ^ r
}

fn fold_seed(master: u64, held_subject: u16) -> u64 {
    master ^ (held_subject as u64 + 1).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Deterministic 80% draw (at least one window) of the given indices.
fn subsample(indices: &[usize], seed: u64) -> Vec<usize> {
    let mut idx = indices.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let keep = ((idx.len() as f64 * 0.8).round() as usize).max(1);
    idx.truncate(keep);
    idx.sort_unstable();
    idx
}

fn subject_scores(
    model: &mut Model,
    test_set: &WindowSet,
    subjects: &[u16],
    master_seed: u64,
    repeats: usize,
    out: &mut Vec<ScoreRow>,
) -> Result<(), ExperimentError> {
    for &subject in subjects {
        let owned: Vec<usize> = (0..test_set.len())
            .filter(|&i| test_set.examples[i].subject_id == subject)
            .collect();
        if owned.is_empty() {
            continue;
        }
        for repeat in 0..repeats {
            let draw = subsample(&owned, eval_seed(master_seed, subject, repeat));
            let eval = evaluate(model, &test_set.subset(&draw))?;
            out.push(ScoreRow {
                subject,
                repeat,
                accuracy: eval.accuracy,
                macro_f1: eval.macro_f1,
            });
        }
    }
    Ok(())
}

fn train_fold(
    kind: ModelKind,
    mut train_set: WindowSet,
    mut test_set: WindowSet,
    hp: &Hyperparams,
    model_seed: u64,
) -> Result<(Model, WindowSet), ExperimentError> {
    let stats = fit_normalizer(&train_set)?;
    apply_normalizer(&stats, &mut train_set)?;
    apply_normalizer(&stats, &mut test_set)?;
    let spec = ModelSpec {
        kind,
        in_channels: train_set.channels(),
        window_length: train_set.window_len(),
        n_classes: 3,
    };
    let mut model = Model::build(spec, model_seed)?;
    train(&mut model, &train_set, hp)?;
    Ok((model, test_set))
}

/// Runs one experiment cell. The dataset comes in windowed but raw; channel
/// selection and normalization happen here so every fold is leakage-free.
pub fn run_experiment(
    config: SensorConfig,
    kind: ModelKind,
    dataset: &WindowSet,
    hp: &Hyperparams,
    protocol: Protocol,
    repeats_per_subject: usize,
) -> Result<ExperimentResult, ExperimentError> {
    if repeats_per_subject == 0 {
        return Err(ExperimentError::Param(
            "repeats_per_subject must be at least 1".into(),
        ));
    }
    hp.validate()?;
    let selected = dataset.select_config(config)?;
    let mut scores = Vec::new();
    let overall = match protocol {
        Protocol::Random8020 => {
            let (train_split, test_split) = split_random(&selected, 0.8, hp.seed)?;
            if test_split.is_empty() {
                return Err(ExperimentError::Param(
                    "80/20 split left no test windows".into(),
                ));
            }
            let (mut model, test_set) = train_fold(kind, train_split, test_split, hp, hp.seed)?;
            let overall = evaluate(&mut model, &test_set)?;
            let subjects = test_set.subjects();
            subject_scores(
                &mut model,
                &test_set,
                &subjects,
                hp.seed,
                repeats_per_subject,
                &mut scores,
            )?;
            overall
        }
        Protocol::Loso => {
            let mut pooled = ConfusionMatrix::new();
            for (held, train_idx, test_idx) in loso_folds(&selected)? {
                let (mut model, test_set) = train_fold(
                    kind,
                    selected.subset(&train_idx),
                    selected.subset(&test_idx),
                    hp,
                    fold_seed(hp.seed, held),
                )?;
                let fold_eval = evaluate(&mut model, &test_set)?;
                pooled.merge(&fold_eval.confusion);
                subject_scores(
                    &mut model,
                    &test_set,
                    &[held],
                    hp.seed,
                    repeats_per_subject,
                    &mut scores,
                )?;
            }
            EvalResult {
                accuracy: pooled.accuracy(),
                macro_f1: pooled.macro_f1(),
                per_class_recall: pooled.per_class_recall(),
                confusion: pooled,
            }
        }
    };
    scores.sort_by_key(|r| (r.subject, r.repeat));
    Ok(ExperimentResult {
        config,
        kind,
        protocol,
        overall,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::compare_configs;
    use crate::synth::{generate, SynthSpec};

    fn synth_set(subjects: usize, channels: usize, seed: u64) -> WindowSet {
        generate(&SynthSpec {
            n_subjects: subjects,
            windows_per_class: 2,
            channels,
            window_length: 16,
            noise_std: 0.1,
            seed,
        })
        .unwrap()
    }

    fn quick_hp(seed: u64) -> Hyperparams {
        Hyperparams {
            epochs: 1,
            seed,
            ..Hyperparams::default()
        }
    }

    #[test]
    fn loso_yields_two_scores_per_subject() {
        let set = synth_set(9, 3, 1);
        let result = run_experiment(
            SensorConfig::Wo,
            ModelKind::Mlp,
            &set,
            &quick_hp(5),
            Protocol::Loso,
            2,
        )
        .unwrap();
        assert_eq!(result.scores.len(), 18);
        let keys: Vec<(u16, usize)> = result
            .scores
            .iter()
            .map(|r| (r.subject, r.repeat))
            .collect();
        let expected: Vec<(u16, usize)> = (1u16..=9).flat_map(|s| [(s, 0), (s, 1)]).collect();
        assert_eq!(keys, expected);
        assert_eq!(result.overall.confusion.total(), set.len() as u64);
    }

    #[test]
    fn repeats_one_yields_one_score_per_subject() {
        let set = synth_set(3, 3, 2);
        let result = run_experiment(
            SensorConfig::Wo,
            ModelKind::Mlp,
            &set,
            &quick_hp(7),
            Protocol::Loso,
            1,
        )
        .unwrap();
        assert_eq!(result.scores.len(), 3);
    }

    #[test]
    fn random_split_is_deterministic() {
        let set = synth_set(3, 3, 3);
        let run = || {
            run_experiment(
                SensorConfig::Wo,
                ModelKind::Mlp,
                &set,
                &quick_hp(11),
                Protocol::Random8020,
                2,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(!a.scores.is_empty());
        assert!(a
            .scores
            .windows(2)
            .all(|w| (w[0].subject, w[0].repeat) < (w[1].subject, w[1].repeat)));
    }

    #[test]
    fn scores_pair_across_configs() {
        let set = synth_set(3, 18, 4);
        let hp = quick_hp(13);
        let wo = run_experiment(
            SensorConfig::Wo,
            ModelKind::Mlp,
            &set,
            &hp,
            Protocol::Loso,
            2,
        )
        .unwrap();
        let w18 = run_experiment(
            SensorConfig::W18,
            ModelKind::Mlp,
            &set,
            &hp,
            Protocol::Loso,
            2,
        )
        .unwrap();
        let paired = compare_configs("WO", &wo.f1_keyed(), "W18", &w18.f1_keyed()).unwrap();
        assert_eq!(paired.diffs.len(), 6);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let set = synth_set(2, 3, 5);
        assert!(matches!(
            run_experiment(
                SensorConfig::Wo,
                ModelKind::Mlp,
                &set,
                &quick_hp(1),
                Protocol::Loso,
                0,
            ),
            Err(ExperimentError::Param(_))
        ));
        assert!(matches!(
            run_experiment(
                SensorConfig::W18,
                ModelKind::Mlp,
                &set,
                &quick_hp(1),
                Protocol::Loso,
                1,
            ),
            Err(ExperimentError::Preprocess(_))
        ));
    }

    #[test]
    fn protocol_tags_round_trip() {
        for p in [Protocol::Random8020, Protocol::Loso] {
            assert_eq!(p.tag().parse::<Protocol>().unwrap(), p);
        }
        assert!("banana".parse::<Protocol>().is_err());
    }
}
