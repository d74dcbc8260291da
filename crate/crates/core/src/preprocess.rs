//! Channel selection, gap repair, windowing, normalization, and splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::pamap2::{activity_to_level, IntensityLevel, MetTable, Pamap2Error, SampleRecord};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("parameter error: {0}")]
    Param(String),
    #[error("empty example set")]
    EmptySet,
    #[error("need at least 2 subjects, found {found}")]
    InsufficientSubjects { found: usize },
    #[error("expected {expected} channels, found {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Pamap2(#[from] Pamap2Error),
}

/// The five sensor placements compared in the experiments. Channel order is
/// always wrist, chest, ankle; accelerometer before gyroscope; x, y, z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SensorConfig {
    /// Wrist accelerometer only.
    Wo,
    /// Wrist accelerometer + gyroscope.
    W6,
    /// Wrist + chest, full IMUs.
    Wc,
    /// Wrist + ankle, full IMUs.
    Wa,
    /// All three IMUs.
    W18,
}

impl SensorConfig {
    pub const ALL: [SensorConfig; 5] = [
        SensorConfig::Wo,
        SensorConfig::W6,
        SensorConfig::Wc,
        SensorConfig::Wa,
        SensorConfig::W18,
    ];

    /// Indices into the 18-channel full layout (wrist accel 0-2, wrist gyro
    /// 3-5, chest accel 6-8, chest gyro 9-11, ankle accel 12-14, ankle gyro
    /// 15-17).
    pub fn channel_indices(self) -> &'static [usize] {
        match self {
            SensorConfig::Wo => &[0, 1, 2],
            SensorConfig::W6 => &[0, 1, 2, 3, 4, 5],
            SensorConfig::Wc => &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11],
            SensorConfig::Wa => &[0, 1, 2, 3, 4, 5, 12, 13, 14, 15, 16, 17],
            SensorConfig::W18 => &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17],
        }
    }

    pub fn channel_count(self) -> usize {
        self.channel_indices().len()
    }

    pub fn tag(self) -> &'static str {
        match self {
            SensorConfig::Wo => "WO",
            SensorConfig::W6 => "W6",
            SensorConfig::Wc => "WC",
            SensorConfig::Wa => "WA",
            SensorConfig::W18 => "W18",
        }
    }
}

impl std::fmt::Display for SensorConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for SensorConfig {
    type Err = PreprocessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "WO" => Ok(SensorConfig::Wo),
            "W6" => Ok(SensorConfig::W6),
            "WC" => Ok(SensorConfig::Wc),
            "WA" => Ok(SensorConfig::Wa),
            "W18" => Ok(SensorConfig::W18),
            other => Err(PreprocessError::Param(format!(
                "unknown sensor config {other:?} (expected WO, W6, WC, WA, or W18)"
            ))),
        }
    }
}

fn full_channels(record: &SampleRecord) -> [Option<f64>; 18] {
    let mut out = [None; 18];
    for (i, imu) in [record.imu_wrist, record.imu_chest, record.imu_ankle]
        .iter()
        .enumerate()
    {
        for a in 0..3 {
            out[i * 6 + a] = imu.accel[a];
            out[i * 6 + 3 + a] = imu.gyro[a];
        }
    }
    out
}

/// The config's channel values for one record, in fixed documented order.
pub fn select_channels(record: &SampleRecord, config: SensorConfig) -> Vec<Option<f64>> {
    let full = full_channels(record);
    config.channel_indices().iter().map(|i| full[*i]).collect()
}

/// Linearly interpolates interior gaps of at most `max_gap` samples.
/// Longer gaps and gaps touching either end stay masked (mask = true means
/// the sample is still missing; its value slot holds 0).
pub fn repair_missing(series: &[Option<f64>], max_gap: usize) -> (Vec<f64>, Vec<bool>) {
    let n = series.len();
    let mut values = vec![0.0; n];
    let mut mask = vec![false; n];
    let mut i = 0;
    while i < n {
        match series[i] {
            Some(v) => {
                values[i] = v;
                i += 1;
            }
            None => {
                let start = i;
                while i < n && series[i].is_none() {
                    i += 1;
                }
                let gap = i - start;
                let interior = start > 0 && i < n;
                if interior && gap <= max_gap {
                    let a = values[start - 1];
                    let b = series[i].unwrap();
                    let step = (b - a) / (gap + 1) as f64;
                    for k in 0..gap {
                        values[start + k] = a + step * (k + 1) as f64;
                    }
                } else {
                    mask[start..i].fill(true);
                }
            }
        }
    }
    (values, mask)
}

/// A subject's repaired multichannel stream with per-sample labels
/// (None = transient / unlabeled) and residual missing-value masks.
#[derive(Debug, Clone)]
pub struct LabeledStream {
    pub subject_id: u16,
    pub channels: Vec<Vec<f64>>,
    pub mask: Vec<Vec<bool>>,
    pub labels: Vec<Option<IntensityLevel>>,
}

/// Builds a subject's stream: selects the config's channels, repairs gaps,
/// and maps activities to intensity levels (activity 0 stays unlabeled, so
/// transient samples never reach a window).
pub fn build_stream(
    records: &[SampleRecord],
    subject_id: u16,
    config: SensorConfig,
    table: &MetTable,
    max_gap: usize,
) -> Result<LabeledStream, PreprocessError> {
    let n_channels = config.channel_count();
    let mut raw: Vec<Vec<Option<f64>>> = vec![Vec::with_capacity(records.len()); n_channels];
    let mut labels = Vec::with_capacity(records.len());
    for record in records {
        for (c, v) in select_channels(record, config).into_iter().enumerate() {
            raw[c].push(v);
        }
        labels.push(if record.activity_id == 0 {
            None
        } else {
            Some(activity_to_level(record.activity_id, table)?)
        });
    }
    let mut channels = Vec::with_capacity(n_channels);
    let mut mask = Vec::with_capacity(n_channels);
    for series in &raw {
        let (values, m) = repair_missing(series, max_gap);
        channels.push(values);
        mask.push(m);
    }
    Ok(LabeledStream {
        subject_id,
        channels,
        mask,
        labels,
    })
}

/// One classification example: a channels × window_length matrix stored
/// channel-major, its intensity label, and the subject it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowExample {
    pub data: Vec<f64>,
    pub label: IntensityLevel,
    pub subject_id: u16,
}

/// A homogeneous collection of windows (same channel count and length).
#[derive(Debug, Clone, Default)]
pub struct WindowSet {
    channels: usize,
    window_len: usize,
    pub examples: Vec<WindowExample>,
}

impl WindowSet {
    pub fn new(channels: usize, window_len: usize) -> Self {
        Self {
            channels,
            window_len,
            examples: Vec::new(),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn push(&mut self, example: WindowExample) -> Result<(), PreprocessError> {
        if example.data.len() != self.channels * self.window_len {
            return Err(PreprocessError::Param(format!(
                "window payload has {} values, set expects {}x{}",
                example.data.len(),
                self.channels,
                self.window_len
            )));
        }
        self.examples.push(example);
        Ok(())
    }

    /// Subjects present, ascending.
    pub fn subjects(&self) -> Vec<u16> {
        let mut ids: Vec<u16> = self.examples.iter().map(|e| e.subject_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn subset(&self, indices: &[usize]) -> WindowSet {
        WindowSet {
            channels: self.channels,
            window_len: self.window_len,
            examples: indices.iter().map(|i| self.examples[*i].clone()).collect(),
        }
    }

    /// Restricts an 18-channel set to a configuration's channels. A set that
    /// already has exactly the config's channel count passes through.
    pub fn select_config(&self, config: SensorConfig) -> Result<WindowSet, PreprocessError> {
        if self.channels == config.channel_count() {
            return Ok(self.clone());
        }
        if self.channels != 18 {
            return Err(PreprocessError::ChannelMismatch {
                expected: config.channel_count(),
                found: self.channels,
            });
        }
        let indices = config.channel_indices();
        let mut out = WindowSet::new(indices.len(), self.window_len);
        for e in &self.examples {
            let mut data = Vec::with_capacity(indices.len() * self.window_len);
            for c in indices {
                data.extend_from_slice(&e.data[c * self.window_len..(c + 1) * self.window_len]);
            }
            out.examples.push(WindowExample {
                data,
                label: e.label,
                subject_id: e.subject_id,
            });
        }
        Ok(out)
    }

    /// Stacks the chosen examples into a [B, channels, window_len] tensor.
    pub fn batch_tensor(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.channels * self.window_len);
        for i in indices {
            data.extend_from_slice(&self.examples[*i].data);
        }
        Tensor::new(&[indices.len(), self.channels, self.window_len], data)
            .expect("window payload sizes are validated on push")
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices
            .iter()
            .map(|i| self.examples[*i].label.index())
            .collect()
    }
}

/// Cuts one subject's stream into fixed-length windows.
///
/// Each maximal run of identically-labeled samples is windowed from its own
/// start at offsets 0, stride, 2·stride, …, so a run of length T yields
/// floor((T − window_length)/stride) + 1 windows (0 when T < window_length).
/// Windows touching an unlabeled sample never exist (runs end there), and
/// windows containing a still-masked value are discarded.
pub fn make_windows(
    stream: &LabeledStream,
    window_length: usize,
    stride: usize,
) -> Result<Vec<WindowExample>, PreprocessError> {
    if window_length == 0 || stride == 0 {
        return Err(PreprocessError::Param(
            "window_length and stride must be >= 1".into(),
        ));
    }
    let n = stream.labels.len();
    for (c, ch) in stream.channels.iter().enumerate() {
        if ch.len() != n || stream.mask[c].len() != n {
            return Err(PreprocessError::Param(format!(
                "channel {c} length disagrees with label track"
            )));
        }
    }
    let mut windows = Vec::new();
    let mut seg_start = 0;
    while seg_start < n {
        let label = stream.labels[seg_start];
        let mut seg_end = seg_start + 1;
        while seg_end < n && stream.labels[seg_end] == label {
            seg_end += 1;
        }
        if let Some(label) = label {
            let seg_len = seg_end - seg_start;
            if seg_len >= window_length {
                for k in 0..(seg_len - window_length) / stride + 1 {
                    let start = seg_start + k * stride;
                    let clean = stream
                        .mask
                        .iter()
                        .all(|m| m[start..start + window_length].iter().all(|x| !x));
                    if !clean {
                        continue;
                    }
                    let mut data = Vec::with_capacity(stream.channels.len() * window_length);
                    for ch in &stream.channels {
                        data.extend_from_slice(&ch[start..start + window_length]);
                    }
                    windows.push(WindowExample {
                        data,
                        label,
                        subject_id: stream.subject_id,
                    });
                }
            }
        }
        seg_start = seg_end;
    }
    Ok(windows)
}

/// Per-channel z-score statistics, fit on training data only.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Fits per-channel mean/std over every sample of every training window.
/// A degenerate (constant) channel gets std clamped to 1.
pub fn fit_normalizer(train: &WindowSet) -> Result<ChannelStats, PreprocessError> {
    if train.is_empty() {
        return Err(PreprocessError::EmptySet);
    }
    let (channels, window_len) = (train.channels(), train.window_len());
    let count = (train.len() * window_len) as f64;
    let mut mean = vec![0.0; channels];
    let mut std = vec![0.0; channels];
    for e in &train.examples {
        for (c, m) in mean.iter_mut().enumerate() {
            *m += e.data[c * window_len..(c + 1) * window_len]
                .iter()
                .sum::<f64>();
        }
    }
    for m in mean.iter_mut() {
        *m /= count;
    }
    for e in &train.examples {
        for c in 0..channels {
            std[c] += e.data[c * window_len..(c + 1) * window_len]
                .iter()
                .map(|v| (v - mean[c]) * (v - mean[c]))
                .sum::<f64>();
        }
    }
    for s in std.iter_mut() {
        *s = (*s / count).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    Ok(ChannelStats { mean, std })
}

pub fn apply_normalizer(stats: &ChannelStats, set: &mut WindowSet) -> Result<(), PreprocessError> {
    if stats.mean.len() != set.channels() {
        return Err(PreprocessError::ChannelMismatch {
            expected: stats.mean.len(),
            found: set.channels(),
        });
    }
    let window_len = set.window_len();
    for e in set.examples.iter_mut() {
        for c in 0..stats.mean.len() {
            for v in e.data[c * window_len..(c + 1) * window_len].iter_mut() {
                *v = (*v - stats.mean[c]) / stats.std[c];
            }
        }
    }
    Ok(())
}

/// Random split with |train| = round(ratio·N), deterministic in `seed`.
pub fn split_random(
    set: &WindowSet,
    ratio: f64,
    seed: u64,
) -> Result<(WindowSet, WindowSet), PreprocessError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(PreprocessError::Param(format!(
            "split ratio must be in (0,1), got {ratio}"
        )));
    }
    let n = set.len();
    let n_train = (ratio * n as f64).round() as usize;
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let mut train_idx = indices[..n_train].to_vec();
    let mut test_idx = indices[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((set.subset(&train_idx), set.subset(&test_idx)))
}

/// One leave-one-subject-out fold: the held-out subject, train indices,
/// and test indices.
pub type LosoFold = (u16, Vec<usize>, Vec<usize>);

/// Leave-one-subject-out folds, one per subject, subjects ascending.
pub fn loso_folds(set: &WindowSet) -> Result<Vec<LosoFold>, PreprocessError> {
    let subjects = set.subjects();
    if subjects.len() < 2 {
        return Err(PreprocessError::InsufficientSubjects {
            found: subjects.len(),
        });
    }
    Ok(subjects
        .into_iter()
        .map(|held| {
            let mut train = Vec::new();
            let mut test = Vec::new();
            for (i, e) in set.examples.iter().enumerate() {
                if e.subject_id == held {
                    test.push(i);
                } else {
                    train.push(i);
                }
            }
            (held, train, test)
        })
        .collect())
}
