#![allow(dead_code)]

use tasfar::dataio::{InputDistribution, LabelMode, ScenarioSpec, TrueFunction};
use tasfar::pipeline::{train_source, AdaptationConfig, SourceTrainConfig};
use tasfar::{gen_scenario, Dataset, Regressor};

pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Sinusoidal response; the target concentrates around a narrow label band.
pub fn concentrated_spec(seed: u64, target_count: usize) -> ScenarioSpec {
    ScenarioSpec {
        feature_dim: 4,
        true_function: TrueFunction::Sinusoidal {
            weights: vec![0.5; 4],
            bias: 0.0,
            linear: 1.0,
            amplitude: 0.5,
            frequency: 2.0,
        },
        source_input: InputDistribution {
            mean: vec![0.0; 4],
            scale: vec![1.0; 4],
        },
        target_input: InputDistribution {
            mean: vec![0.0; 4],
            scale: vec![2.0; 4],
        },
        target_label_mode: LabelMode {
            center: 0.65,
            spread: 0.075,
        },
        noise_scale: 0.05,
        source_count: 3000,
        target_count,
        seed,
    }
}

/// Response that flattens past a knot; target labels sit on the plateau the
/// source model never saw.
pub fn plateau_spec(seed: u64) -> ScenarioSpec {
    ScenarioSpec {
        feature_dim: 4,
        true_function: TrueFunction::Piecewise {
            weights: vec![0.5; 4],
            bias: 0.0,
            knot: 2.0,
            kink: -1.0,
        },
        source_input: InputDistribution {
            mean: vec![0.0; 4],
            scale: vec![1.0; 4],
        },
        target_input: InputDistribution {
            mean: vec![1.0; 4],
            scale: vec![1.0; 4],
        },
        target_label_mode: LabelMode {
            center: 2.0,
            spread: 0.15,
        },
        noise_scale: 0.05,
        source_count: 3000,
        target_count: 6000,
        seed,
    }
}

/// Target drawn exactly like the source.
pub fn no_gap(mut spec: ScenarioSpec) -> ScenarioSpec {
    spec.target_input = spec.source_input.clone();
    spec.target_label_mode = LabelMode {
        center: 0.0,
        spread: 1e6,
    };
    spec
}

pub fn source_config(hidden: usize, seed: u64) -> SourceTrainConfig {
    SourceTrainConfig {
        hidden: vec![hidden, hidden],
        dropout_rate: 0.2,
        learning_rate: 0.01,
        epochs: 60,
        batch_size: 32,
        seed,
    }
}

/// Fine-tuning settings shared by gapped and no-gap runs.
pub fn adaptation_config(seed: u64) -> AdaptationConfig {
    AdaptationConfig {
        learning_rate: 1e-4,
        batch_size: 128,
        seed,
        ..AdaptationConfig::default()
    }
}

pub struct Prepared {
    pub model: Regressor<f64>,
    pub calibration: Dataset<f64>,
    pub target: Dataset<f64>,
}

/// Generate, hold out a third of the source for calibration, fit the source model.
pub fn prepare(spec: &ScenarioSpec, hidden: usize) -> Prepared {
    let (source, target) = gen_scenario::<f64>(spec).unwrap();
    let (train, calibration) = source.random_split(1.0 / 3.0, spec.seed).unwrap();
    let (model, _) = train_source(&train, &source_config(hidden, spec.seed)).unwrap();
    Prepared {
        model,
        calibration,
        target,
    }
}
