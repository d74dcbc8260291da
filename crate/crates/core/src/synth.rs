//! Synthetic labeled IMU-like windows so the whole pipeline can be exercised
//! without the real dataset. Intensity is encoded as movement energy: Low is
//! near-constant, Medium a unit sinusoid at 1-2 Hz-equivalent, High a 3x
//! sinusoid at 4-6 Hz-equivalent with random phase.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::pamap2::IntensityLevel;
use crate::preprocess::{PreprocessError, WindowExample, WindowSet};

/// Sample rate the frequency parameters are expressed against (Hz-equivalent
/// cycles assume this many samples per second).
const SAMPLE_RATE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    pub n_subjects: usize,
    /// Windows per class per subject.
    pub windows_per_class: usize,
    pub channels: usize,
    pub window_length: usize,
    pub noise_std: f64,
    pub seed: u64,
}

fn subject_seed(seed: u64, subject: usize) -> u64 {
    seed ^ (subject as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn generate(spec: &SynthSpec) -> Result<WindowSet, PreprocessError> {
    if spec.n_subjects == 0
        || spec.windows_per_class == 0
        || spec.channels == 0
        || spec.window_length == 0
    {
        return Err(PreprocessError::Param(
            "synth spec counts must all be >= 1".into(),
        ));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(PreprocessError::Param(format!(
            "noise_std must be finite and >= 0, got {}",
            spec.noise_std
        )));
    }
    let mut set = WindowSet::new(spec.channels, spec.window_length);
    for s in 0..spec.n_subjects {
        let mut rng = ChaCha8Rng::seed_from_u64(subject_seed(spec.seed, s));
        let scale: f64 = rng.random_range(0.8..1.2);
        let noise = if spec.noise_std > 0.0 {
            Some(Normal::new(0.0, spec.noise_std).expect("validated std"))
        } else {
            None
        };
        for label in IntensityLevel::ALL {
            for _ in 0..spec.windows_per_class {
                let mut data = Vec::with_capacity(spec.channels * spec.window_length);
                match label {
                    IntensityLevel::Low => {
                        for _ in 0..spec.channels {
                            let dc: f64 = rng.random_range(-0.1..0.1) * scale;
                            data.extend(std::iter::repeat_n(dc, spec.window_length));
                        }
                    }
                    IntensityLevel::Medium => {
                        let freq: f64 = rng.random_range(1.0..2.0);
                        let omega = 2.0 * std::f64::consts::PI * freq / SAMPLE_RATE;
                        for _ in 0..spec.channels {
                            for t in 0..spec.window_length {
                                data.push(scale * (omega * t as f64).sin());
                            }
                        }
                    }
                    IntensityLevel::High => {
                        let freq: f64 = rng.random_range(4.0..6.0);
                        let omega = 2.0 * std::f64::consts::PI * freq / SAMPLE_RATE;
                        for _ in 0..spec.channels {
                            let phase: f64 = rng.random_range(0.0..2.0 * std::f64::consts::PI);
                            for t in 0..spec.window_length {
                                data.push(3.0 * scale * (omega * t as f64 + phase).sin());
                            }
                        }
                    }
                }
                if let Some(noise) = &noise {
                    for v in data.iter_mut() {
                        *v += noise.sample(&mut rng);
                    }
                }
                set.push(WindowExample {
                    data,
                    label,
                    subject_id: (s + 1) as u16,
                })?;
            }
        }
    }
    Ok(set)
}
