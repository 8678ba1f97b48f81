//! RF fingerprint classification: dataset construction from separated NLOS
//! paths, feature extraction against the known payload, nearest-centroid and
//! small feed-forward classifiers, and a synthetic fixed-accuracy classifier
//! for parameter sweeps.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{self, PathKind, PathParams};
use crate::fingerprint::{FingerprintLibrary, ImpairmentMenu, LibraryConfig};
use crate::matrix::ComplexMatrix;
use crate::rng::{derive_seed, rng_for, stream};
use crate::scenario::Scenario;
use crate::sensing::separate_paths;
use crate::signal_chain::{make_transmit_frame, Beamformer, ComponentLabel, PathComponent, ResidualFrame, SymbolBlock};
use crate::{Error, Result, RruId};

pub const FORMAT_VERSION: u32 = 1;
const TRACKING_HALF_WINDOW: usize = 16;
const POWER_ITERATIONS: usize = 30;
const GOLDEN_STEPS: usize = 32;
/// Default half-width of the frequency-offset search, Hz.
pub const DEFAULT_MAX_OFFSET_HZ: f64 = 2000.0;
pub const FEATURE_COUNT: usize = 8;
pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "i_gain",
    "q_gain",
    "i_to_q",
    "q_to_i",
    "envelope_ripple",
    "phase_slope_hz",
    "phase_jitter",
    "residual_power",
];

/// Residual statistics of a separated path against its known payload.
///
/// The antenna outputs are combined along the principal spatial eigenvector,
/// derotated by the frequency offset that maximizes the payload-matched
/// periodogram within `+-max_offset_hz`, normalized by the complex gain and
/// derotated again by a moving-average phase track, leaving `z ~ f(s)`.
/// Features:
///
/// 1. I-branch gain, 2. Q-branch gain,
/// 3. leakage of I into Q, 4. leakage of Q into I
///    (the four entries of a least-squares real 2x2 fit of `z` on `s`),
/// 5. envelope ripple `std|z| / mean|z|`,
/// 6. frequency offset in Hz (carrier offset plus Doppler),
/// 7. phase-track increment std per sample (phase-noise strength),
/// 8. residual power `mean |z - s|^2`.
pub fn extract_features(
    samples: &ComplexMatrix,
    payload: &[Complex64],
    sample_interval: f64,
    max_offset_hz: f64,
) -> Result<Vec<f64>> {
    let (m, n) = samples.shape();
    if n != payload.len() {
        return Err(Error::dims(format!("{} samples", payload.len()), format!("{n} samples")));
    }
    if n < 2 || m == 0 {
        return Err(Error::EmptyInput("feature extraction needs at least 2 samples"));
    }
    let s_energy: f64 = payload.iter().map(|v| v.norm_sqr()).sum();
    if s_energy == 0.0 {
        return Err(Error::Classifier("payload has zero energy".into()));
    }

    let w = principal_direction(samples).ok_or_else(|| Error::Classifier("separated path is all zeros".into()))?;
    let combined: Vec<Complex64> = (0..n).map(|k| (0..m).map(|a| w[a].conj() * samples.get(a, k)).sum()).collect();
    let matched: Vec<Complex64> = combined.iter().zip(payload).map(|(r, s)| r * s.conj()).collect();
    let omega = peak_frequency(&matched, TAU * max_offset_hz.abs() * sample_interval);
    let mut z: Vec<Complex64> = combined
        .iter()
        .enumerate()
        .map(|(k, r)| r * Complex64::from_polar(1.0, -omega * k as f64))
        .collect();
    let g = z.iter().zip(payload).map(|(a, b)| a * b.conj()).sum::<Complex64>() / s_energy;
    for c in z.iter_mut() {
        *c /= g;
    }

    // Track the slow phase wander with a centred moving average of z conj(s).
    let product: Vec<Complex64> = z.iter().zip(payload).map(|(z, s)| z * s.conj()).collect();
    let mut prefix = vec![Complex64::new(0.0, 0.0); n + 1];
    for k in 0..n {
        prefix[k + 1] = prefix[k] + product[k];
    }
    let half = TRACKING_HALF_WINDOW.min((n - 1) / 2);
    let tracked_phase: Vec<f64> =
        (0..n).map(|k| (prefix[(k + half + 1).min(n)] - prefix[k.saturating_sub(half)]).arg()).collect();
    for (c, ph) in z.iter_mut().zip(&tracked_phase) {
        *c *= Complex64::from_polar(1.0, -ph);
    }

    let [i_gain, q_to_i, i_to_q, q_gain] = iq_map(&z, payload)?;

    let mags: Vec<f64> = z.iter().map(|c| c.norm()).collect();
    let (mag_mean, mag_std) = mean_std(&mags);
    let lag = (2 * half).max(1);
    let increments: Vec<f64> = tracked_phase.windows(lag + 1).map(|w| wrap(w[lag] - w[0])).collect();
    let jitter = if increments.is_empty() { 0.0 } else { mean_std(&increments).1 / (lag as f64).sqrt() };
    let residual = z.iter().zip(payload).map(|(z, s)| (z - s).norm_sqr()).sum::<f64>() / n as f64;

    Ok(vec![
        i_gain,
        q_gain,
        i_to_q,
        q_to_i,
        if mag_mean > 0.0 { mag_std / mag_mean } else { 0.0 },
        omega / (TAU * sample_interval),
        jitter,
        residual,
    ])
}

/// Unit principal eigenvector of `Y Y^H` by power iteration.
fn principal_direction(samples: &ComplexMatrix) -> Option<Vec<Complex64>> {
    let (m, _) = samples.shape();
    let mut cov = vec![vec![Complex64::new(0.0, 0.0); m]; m];
    for i in 0..m {
        let yi = samples.row(i);
        for j in i..m {
            let yj = samples.row(j);
            let c: Complex64 = yi.iter().zip(yj).map(|(a, b)| a * b.conj()).sum();
            cov[i][j] = c;
            cov[j][i] = c.conj();
        }
    }
    let start = (0..m).max_by(|a, b| cov[*a][*a].re.total_cmp(&cov[*b][*b].re))?;
    if !(cov[start][start].re > 0.0) {
        return None;
    }
    let mut v: Vec<Complex64> = cov.iter().map(|row| row[start]).collect();
    for _ in 0..POWER_ITERATIONS {
        let norm = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        v.iter_mut().for_each(|c| *c /= norm);
        v = cov.iter().map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
    }
    let norm = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    (norm > 0.0).then(|| v.into_iter().map(|c| c / norm).collect())
}

/// Frequency (rad/sample) in `[-limit, limit]` maximizing `|sum q[n] e^{-j w n}|`:
/// grid search at a quarter of the bin width, then golden-section refinement.
fn peak_frequency(q: &[Complex64], limit: f64) -> f64 {
    let power = |w: f64| {
        let step = Complex64::from_polar(1.0, -w);
        let mut rot = Complex64::new(1.0, 0.0);
        let mut acc = Complex64::new(0.0, 0.0);
        for (k, v) in q.iter().enumerate() {
            if k % 64 == 0 {
                rot = Complex64::from_polar(1.0, -w * k as f64);
            }
            acc += v * rot;
            rot *= step;
        }
        acc.norm_sqr()
    };
    let spacing = PI / (2.0 * q.len() as f64);
    let steps = (limit / spacing).ceil() as i64;
    let best = (-steps..=steps)
        .map(|i| (i as f64 * spacing).clamp(-limit, limit))
        .map(|w| (w, power(w)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map_or(0.0, |(w, _)| w);
    let (mut a, mut b) = ((best - spacing).max(-limit), (best + spacing).min(limit));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut c, mut d) = (b - g * (b - a), a + g * (b - a));
    let (mut pc, mut pd) = (power(c), power(d));
    for _ in 0..GOLDEN_STEPS {
        if pc >= pd {
            b = d;
            d = c;
            pd = pc;
            c = b - g * (b - a);
            pc = power(c);
        } else {
            a = c;
            c = d;
            pc = pd;
            d = a + g * (b - a);
            pd = power(d);
        }
    }
    0.5 * (a + b)
}

/// Real 2x2 least-squares map `[Re z, Im z] = M [Re s, Im s]`, row-major.
fn iq_map(z: &[Complex64], s: &[Complex64]) -> Result<[f64; 4]> {
    let (mut sii, mut siq, mut sqq) = (0.0, 0.0, 0.0);
    let mut c = [0.0; 4];
    for (z, s) in z.iter().zip(s) {
        sii += s.re * s.re;
        siq += s.re * s.im;
        sqq += s.im * s.im;
        c[0] += z.re * s.re;
        c[1] += z.re * s.im;
        c[2] += z.im * s.re;
        c[3] += z.im * s.im;
    }
    let det = sii * sqq - siq * siq;
    if !(det.abs() > 1e-12 * (sii * sqq).max(f64::MIN_POSITIVE)) {
        return Err(Error::Classifier("payload does not excite both I and Q".into()));
    }
    let inv = [sqq / det, -siq / det, -siq / det, sii / det];
    Ok([
        c[0] * inv[0] + c[1] * inv[2],
        c[0] * inv[1] + c[1] * inv[3],
        c[2] * inv[0] + c[3] * inv[2],
        c[2] * inv[1] + c[3] * inv[3],
    ])
}

fn wrap(a: f64) -> f64 {
    (a + PI).rem_euclid(TAU) - PI
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerprintSample {
    pub features: Vec<f64>,
    pub label: RruId,
    pub sink: RruId,
    pub path_index: usize,
    pub snr_db: f64,
}

/// Receive noise of a dataset sample, set relative to the path's own power.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Per-antenna SNR of the separated path before spatial combining, dB.
    pub snr_db: f64,
}

impl NoiseConfig {
    /// Per-antenna noise power relative to the path power.
    pub fn relative_power(&self) -> f64 {
        10f64.powf(-self.snr_db / 10.0)
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { snr_db: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_samples_per_rru: usize,
    pub n_symbols: usize,
    pub impairment_scale: f64,
    /// Noise power relative to a unit-power signal that the impairment
    /// residual is scaled against. `None` ties it to the noise left in a
    /// separated path after combining over the sink array, so the
    /// fingerprint PSD is `impairment_scale` times that noise PSD.
    pub reference_noise_power: Option<f64>,
    pub menu: ImpairmentMenu,
    pub noise: NoiseConfig,
    pub leakage: f64,
    /// Give every RRU the same hardware profile (test rig override).
    pub identical_profiles: bool,
    pub train_fraction: f64,
    /// Half-width of the frequency-offset search in feature extraction, Hz.
    pub max_offset_hz: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_samples_per_rru: 8000,
            n_symbols: 1000,
            impairment_scale: 0.4,
            reference_noise_power: None,
            menu: ImpairmentMenu::default(),
            noise: NoiseConfig::default(),
            leakage: 0.0,
            identical_profiles: false,
            train_fraction: 0.8,
            max_offset_hz: DEFAULT_MAX_OFFSET_HZ,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerprintDataset {
    pub version: u32,
    pub config: DatasetConfig,
    pub feature_names: Vec<String>,
    pub samples: Vec<FingerprintSample>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl FingerprintDataset {
    pub fn labels(&self) -> Vec<RruId> {
        let mut l: Vec<RruId> = self.samples.iter().map(|s| s.label).collect();
        l.sort_unstable();
        l.dedup();
        l
    }

    /// Assemble a dataset from precomputed samples with a stratified split.
    pub fn from_samples(samples: Vec<FingerprintSample>, config: DatasetConfig, seed: u64) -> Result<Self> {
        if !(config.train_fraction > 0.0 && config.train_fraction <= 1.0) {
            return Err(Error::InvalidConfig("train fraction must be in (0, 1]".into()));
        }
        let (train, test) = stratified_split(&samples, config.train_fraction, seed);
        Ok(Self {
            version: FORMAT_VERSION,
            config,
            feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            samples,
            train,
            test,
            seed,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let d: Self = serde_json::from_str(s)?;
        check_version(d.version)?;
        Ok(d)
    }
}

fn check_version(v: u32) -> Result<()> {
    if v == FORMAT_VERSION {
        Ok(())
    } else {
        Err(Error::Classifier(format!("unsupported format version {v}, expected {FORMAT_VERSION}")))
    }
}

fn stratified_split(samples: &[FingerprintSample], train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_label: BTreeMap<RruId, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_label.entry(s.label).or_default().push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (label, mut idx) in by_label {
        idx.shuffle(&mut rng_for(seed, &[stream::SPLIT, label as u64]));
        let k = ((idx.len() as f64) * train_fraction).round() as usize;
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Fingerprint profiles of the downlink RRUs as used by [`build_dataset`]
/// with the same arguments.
pub fn dataset_library(scenario: &Scenario, config: &DatasetConfig, seed: u64) -> Result<FingerprintLibrary> {
    let downlink = scenario.downlink_ids();
    let sink = scenario.uplink_ids().first().copied().ok_or_else(|| Error::InvalidConfig("no uplink RRU to receive on".into()))?;
    let array_size = scenario.rru(sink)?.num_antennas() as f64;
    let lib_cfg = LibraryConfig {
        impairment_scale: config.impairment_scale,
        reference_noise_power: config.reference_noise_power.unwrap_or_else(|| config.noise.relative_power() / array_size),
        menu: config.menu.clone(),
        ..LibraryConfig::default()
    };
    let mut library = FingerprintLibrary::build(&downlink, &lib_cfg, scenario.sample_interval, seed)?;
    if config.identical_profiles {
        let template = library.get(downlink[0])?.clone();
        for (id, p) in library.profiles.iter_mut() {
            *p = template.clone();
            p.rru_id = *id;
        }
    }
    Ok(library)
}

/// Transmit, propagate, add noise and separate one NLOS path per frame;
/// each separated path becomes one labelled sample.
///
/// Sample `i` of RRU `d` uses a fresh payload, an uplink RRU and a reflector
/// drawn uniformly from the scenario.
pub fn build_dataset(scenario: &Scenario, config: &DatasetConfig, seed: u64) -> Result<FingerprintDataset> {
    let downlink = scenario.downlink_ids();
    let uplink = scenario.uplink_ids();
    if downlink.len() < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 downlink RRUs, got {}", downlink.len())));
    }
    if uplink.is_empty() {
        return Err(Error::InvalidConfig("no uplink RRU to receive on".into()));
    }
    if scenario.reflectors.is_empty() {
        return Err(Error::InvalidConfig("scenario has no reflectors, so no RRU yields an NLOS path".into()));
    }
    if config.n_symbols < 2 || config.n_samples_per_rru == 0 {
        return Err(Error::InvalidConfig("need at least 2 symbols and 1 sample per RRU".into()));
    }
    let tx = scenario.sample_interval;
    let library = dataset_library(scenario, config, seed)?;

    let mut nlos: BTreeMap<(RruId, RruId), Vec<PathParams>> = BTreeMap::new();
    for &d in &downlink {
        for &u in &uplink {
            let paths: Vec<PathParams> =
                channel::compute_paths(scenario, d, u)?.into_iter().filter(|p| p.kind == PathKind::Nlos).collect();
            nlos.insert((d, u), paths);
        }
    }

    let jobs: Vec<(RruId, usize)> =
        downlink.iter().flat_map(|&d| (0..config.n_samples_per_rru).map(move |i| (d, i))).collect();
    let samples: Vec<FingerprintSample> = jobs
        .par_iter()
        .map(|&(d, i)| {
            let sample_seed = derive_seed(seed, &[stream::TRAINING, d as u64, i as u64]);
            let mut rng = rng_for(sample_seed, &[stream::PAYLOAD]);
            let u = uplink[rng.random_range(0..uplink.len())];
            let paths = &nlos[&(d, u)];
            let path = paths[rng.random_range(0..paths.len())].clone();
            let block = SymbolBlock::random_qpsk(config.n_symbols, d, &mut rng);
            let frame = make_transmit_frame(&block, &Beamformer::Identity, 1.0, library.get(d)?, 1.0, tx, sample_seed)?;
            let rru = scenario.rru(u)?;
            let component = channel::propagate(
                &path,
                rru.antenna_rows,
                rru.antenna_cols,
                scenario.carrier_frequency,
                tx,
                &frame.effective_waveform(),
            );
            let noise_power = component.mean_power() * config.noise.relative_power();
            let normal = Normal::new(0.0, (noise_power / 2.0).sqrt())
                .map_err(|e| Error::InvalidConfig(format!("noise power: {e}")))?;
            let mut noise_rng = rng_for(sample_seed, &[stream::NOISE]);
            let noise = ComplexMatrix::from_fn(component.rows(), component.cols(), |_, _| {
                Complex64::new(normal.sample(&mut noise_rng), normal.sample(&mut noise_rng))
            });
            let residual = ResidualFrame {
                sink: u,
                samples: &component + &noise,
                components_removed: [ComponentLabel::Los, ComponentLabel::StaticNlos].into(),
                suspect: false,
            };
            let truth = [PathComponent { path, label: ComponentLabel::MobileNlos, samples: component }];
            let sep = separate_paths(&residual, &truth, config.leakage)?;
            let separated = &sep.paths[0];
            Ok(FingerprintSample {
                features: extract_features(&separated.samples, &block.symbols, tx, config.max_offset_hz)?,
                label: d,
                sink: u,
                path_index: separated.path_index,
                snr_db: config.noise.snr_db,
            })
        })
        .collect::<Result<_>>()?;
    FingerprintDataset::from_samples(samples, config.clone(), seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    NearestCentroid,
    Mlp,
}

/// Feed-forward network settings; ignored by the centroid model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Stop after this many epochs without a relative loss improvement of `min_improvement`.
    pub patience: usize,
    pub min_improvement: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self { hidden: 32, epochs: 200, learning_rate: 0.05, batch_size: 64, patience: 10, min_improvement: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelParams {
    NearestCentroid {
        /// One standardized centroid per label.
        centroids: Vec<Vec<f64>>,
    },
    Mlp {
        /// hidden x features
        w1: Vec<Vec<f64>>,
        b1: Vec<f64>,
        /// labels x hidden
        w2: Vec<Vec<f64>>,
        b2: Vec<f64>,
        epochs_run: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub version: u32,
    pub kind: ModelKind,
    pub labels: Vec<RruId>,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub params: ModelParams,
}

impl ClassifierModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        check_version(m.version)?;
        Ok(m)
    }

    fn standardize(&self, features: &[f64]) -> Vec<f64> {
        features
            .iter()
            .zip(self.feature_mean.iter().zip(&self.feature_std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }
}

/// Train on the train split only.
pub fn train(dataset: &FingerprintDataset, kind: ModelKind, hyper: &Hyperparams, seed: u64) -> Result<ClassifierModel> {
    if dataset.train.is_empty() {
        return Err(Error::Classifier("empty train split".into()));
    }
    let rows: Vec<&FingerprintSample> = dataset.train.iter().map(|&i| &dataset.samples[i]).collect();
    let mut labels: Vec<RruId> = rows.iter().map(|s| s.label).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() < 2 {
        return Err(Error::Classifier(format!("need at least 2 labels, got {}", labels.len())));
    }
    let f = rows[0].features.len();
    if let Some(bad) = rows.iter().find(|s| s.features.len() != f) {
        return Err(Error::dims(f, bad.features.len()));
    }

    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..f).map(|j| rows.iter().map(|s| s.features[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..f)
        .map(|j| {
            let v = rows.iter().map(|s| (s.features[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if v > 0.0 { v.sqrt() } else { 1.0 }
        })
        .collect();
    let mut model = ClassifierModel {
        version: FORMAT_VERSION,
        kind,
        labels: labels.clone(),
        feature_mean: mean,
        feature_std: std,
        params: ModelParams::NearestCentroid { centroids: vec![] },
    };
    let x: Vec<Vec<f64>> = rows.iter().map(|s| model.standardize(&s.features)).collect();
    let y: Vec<usize> = rows.iter().map(|s| labels.binary_search(&s.label).expect("label collected above")).collect();

    model.params = match kind {
        ModelKind::NearestCentroid => {
            let mut sums = vec![vec![0.0; f]; labels.len()];
            let mut counts = vec![0usize; labels.len()];
            for (xi, &yi) in x.iter().zip(&y) {
                counts[yi] += 1;
                for (a, b) in sums[yi].iter_mut().zip(xi) {
                    *a += b;
                }
            }
            for (c, k) in sums.iter_mut().zip(&counts) {
                for v in c.iter_mut() {
                    *v /= *k as f64;
                }
            }
            ModelParams::NearestCentroid { centroids: sums }
        }
        ModelKind::Mlp => train_mlp(&x, &y, labels.len(), hyper, seed)?,
    };
    Ok(model)
}

fn mlp_forward(w1: &[Vec<f64>], b1: &[f64], w2: &[Vec<f64>], b2: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let h: Vec<f64> = w1.iter().zip(b1).map(|(w, b)| (w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b).tanh()).collect();
    let logits: Vec<f64> = w2.iter().zip(b2).map(|(w, b)| w.iter().zip(&h).map(|(a, c)| a * c).sum::<f64>() + b).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    (h, exp.into_iter().map(|e| e / z).collect())
}

fn train_mlp(x: &[Vec<f64>], y: &[usize], classes: usize, hp: &Hyperparams, seed: u64) -> Result<ModelParams> {
    if hp.hidden == 0 || hp.batch_size == 0 || !(hp.learning_rate > 0.0) {
        return Err(Error::InvalidConfig("MLP needs hidden >= 1, batch >= 1 and a positive step".into()));
    }
    let f = x[0].len();
    let mut rng = rng_for(seed, &[stream::TRAINING]);
    let lim1 = (6.0 / (f + hp.hidden) as f64).sqrt();
    let lim2 = (6.0 / (hp.hidden + classes) as f64).sqrt();
    let mut w1: Vec<Vec<f64>> = (0..hp.hidden).map(|_| (0..f).map(|_| rng.random_range(-lim1..lim1)).collect()).collect();
    let mut b1 = vec![0.0; hp.hidden];
    let mut w2: Vec<Vec<f64>> =
        (0..classes).map(|_| (0..hp.hidden).map(|_| rng.random_range(-lim2..lim2)).collect()).collect();
    let mut b2 = vec![0.0; classes];

    let mut order: Vec<usize> = (0..x.len()).collect();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut epochs_run = 0;
    for _ in 0..hp.epochs {
        epochs_run += 1;
        order.shuffle(&mut rng);
        let mut loss = 0.0;
        for batch in order.chunks(hp.batch_size) {
            let mut gw1 = vec![vec![0.0; f]; hp.hidden];
            let mut gb1 = vec![0.0; hp.hidden];
            let mut gw2 = vec![vec![0.0; hp.hidden]; classes];
            let mut gb2 = vec![0.0; classes];
            for &i in batch {
                let (h, p) = mlp_forward(&w1, &b1, &w2, &b2, &x[i]);
                loss -= p[y[i]].max(1e-300).ln();
                let dlogit: Vec<f64> = (0..classes).map(|c| p[c] - if c == y[i] { 1.0 } else { 0.0 }).collect();
                let mut dh = vec![0.0; hp.hidden];
                for c in 0..classes {
                    gb2[c] += dlogit[c];
                    for k in 0..hp.hidden {
                        gw2[c][k] += dlogit[c] * h[k];
                        dh[k] += dlogit[c] * w2[c][k];
                    }
                }
                for k in 0..hp.hidden {
                    let dpre = dh[k] * (1.0 - h[k] * h[k]);
                    gb1[k] += dpre;
                    for j in 0..f {
                        gw1[k][j] += dpre * x[i][j];
                    }
                }
            }
            let step = hp.learning_rate / batch.len() as f64;
            for k in 0..hp.hidden {
                b1[k] -= step * gb1[k];
                for j in 0..f {
                    w1[k][j] -= step * gw1[k][j];
                }
            }
            for c in 0..classes {
                b2[c] -= step * gb2[c];
                for k in 0..hp.hidden {
                    w2[c][k] -= step * gw2[c][k];
                }
            }
        }
        loss /= x.len() as f64;
        if loss < best * (1.0 - hp.min_improvement) {
            best = loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= hp.patience {
                break;
            }
        }
    }
    Ok(ModelParams::Mlp { w1, b1, w2, b2, epochs_run })
}

/// Most likely label for a feature vector.
pub fn predict(model: &ClassifierModel, features: &[f64]) -> Result<RruId> {
    if features.len() != model.feature_mean.len() {
        return Err(Error::dims(model.feature_mean.len(), features.len()));
    }
    let x = model.standardize(features);
    let best = match &model.params {
        ModelParams::NearestCentroid { centroids } => centroids
            .iter()
            .map(|c| c.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1)),
        ModelParams::Mlp { w1, b1, w2, b2, .. } => {
            let (_, p) = mlp_forward(w1, b1, w2, b2, &x);
            p.into_iter().enumerate().max_by(|a, b| a.1.total_cmp(&b.1))
        }
    };
    best.map(|(i, _)| model.labels[i]).ok_or_else(|| Error::Classifier("model has no labels".into()))
}

/// Overall accuracy and confusion matrix (rows: true label, columns: predicted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub accuracy: f64,
    pub total: usize,
    pub correct: usize,
    pub labels: Vec<RruId>,
    pub confusion: Vec<Vec<usize>>,
}

impl AccuracyReport {
    pub fn from_pairs(labels: Vec<RruId>, pairs: impl IntoIterator<Item = (RruId, RruId)>) -> Result<Self> {
        let mut confusion = vec![vec![0usize; labels.len()]; labels.len()];
        let (mut total, mut correct) = (0, 0);
        for (truth, predicted) in pairs {
            let t = labels.binary_search(&truth).map_err(|_| Error::UnknownRru(truth))?;
            let p = labels.binary_search(&predicted).map_err(|_| Error::UnknownRru(predicted))?;
            confusion[t][p] += 1;
            total += 1;
            correct += usize::from(t == p);
        }
        if total == 0 {
            return Err(Error::EmptyInput("no samples to evaluate"));
        }
        Ok(Self { accuracy: correct as f64 / total as f64, total, correct, labels, confusion })
    }

    pub fn per_label_accuracy(&self) -> Vec<f64> {
        self.confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: usize = row.iter().sum();
                if n == 0 { 0.0 } else { row[i] as f64 / n as f64 }
            })
            .collect()
    }

    /// Plain-text confusion table.
    pub fn table(&self) -> String {
        let mut out = format!("accuracy {:.4} ({}/{})\n", self.accuracy, self.correct, self.total);
        out.push_str("true\\pred");
        for l in &self.labels {
            out.push_str(&format!("{l:>8}"));
        }
        out.push_str("    acc\n");
        for ((l, row), acc) in self.labels.iter().zip(&self.confusion).zip(self.per_label_accuracy()) {
            out.push_str(&format!("{l:>9}"));
            for c in row {
                out.push_str(&format!("{c:>8}"));
            }
            out.push_str(&format!("  {acc:.3}\n"));
        }
        out
    }
}

/// Accuracy on the test split.
pub fn evaluate(model: &ClassifierModel, dataset: &FingerprintDataset) -> Result<AccuracyReport> {
    if dataset.test.is_empty() {
        return Err(Error::EmptyInput("test split"));
    }
    let pairs = dataset
        .test
        .iter()
        .map(|&i| {
            let s = &dataset.samples[i];
            Ok((s.label, predict(model, &s.features)?))
        })
        .collect::<Result<Vec<_>>>()?;
    AccuracyReport::from_pairs(model.labels.clone(), pairs)
}

/// Returns the true label with probability `accuracy`, otherwise a label
/// drawn uniformly from the wrong ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticClassifier {
    pub accuracy: f64,
    pub seed: u64,
}

impl SyntheticClassifier {
    pub fn new(accuracy: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::InvalidConfig(format!("accuracy {accuracy} outside [0, 1]")));
        }
        Ok(Self { accuracy, seed })
    }

    /// Classify one observation identified by `key`. The same key gives the
    /// same uniform draw at every accuracy level, so lowering `accuracy`
    /// only ever turns correct answers into wrong ones.
    pub fn classify(&self, truth: RruId, labels: &[RruId], key: &[u64]) -> Result<RruId> {
        if !labels.contains(&truth) {
            return Err(Error::UnknownRru(truth));
        }
        let mut tags = vec![stream::CLASSIFIER];
        tags.extend_from_slice(key);
        let mut rng = rng_for(self.seed, &tags);
        let draw: f64 = rng.random();
        if draw < self.accuracy || labels.len() < 2 {
            return Ok(truth);
        }
        let wrong: Vec<RruId> = labels.iter().copied().filter(|l| *l != truth).collect();
        Ok(wrong[rng.random_range(0..wrong.len())])
    }

    /// Classify `n` observations with true labels cycling through `labels`.
    pub fn evaluate(&self, labels: &[RruId], n: usize) -> Result<AccuracyReport> {
        let mut sorted = labels.to_vec();
        sorted.sort_unstable();
        let pairs = (0..n)
            .map(|i| {
                let truth = sorted[i % sorted.len()];
                Ok((truth, self.classify(truth, &sorted, &[i as u64])?))
            })
            .collect::<Result<Vec<_>>>()?;
        AccuracyReport::from_pairs(sorted, pairs)
    }
}
