//! Downlink transmit frames, uplink received-signal assembly, known-signal
//! cancellation and uplink-idle detection.
//!
//! Waveforms are single-carrier and sampled at the symbol rate, one sample
//! per symbol. Every [`ReceivedFrame`] keeps each ground-truth component
//! (UE, LOS, long-standing NLOS, mobile NLOS, noise) next to the samples so
//! later stages can be scored against the truth.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::FRAC_1_SQRT_2;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::channel::{self, ChannelRealization, PathKind, PathParams};
use crate::fingerprint::{apply_fingerprint, FingerprintProfile};
use crate::matrix::ComplexMatrix;
use crate::rng::{rng_for, stream};
use crate::scenario::{ReflectorKind, Scenario};
use crate::{Error, Result, RruId};

/// Unit-energy QPSK symbols `(+-1 +- j) / sqrt(2)`.
pub fn qpsk_symbols<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<Complex64> {
    (0..n)
        .map(|_| {
            let bits: u8 = rng.random_range(0..4);
            let re = if bits & 1 == 0 { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 };
            let im = if bits & 2 == 0 { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 };
            Complex64::new(re, im)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modulation {
    Qpsk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolBlock {
    pub symbols: Vec<Complex64>,
    pub modulation: Modulation,
    pub rru_id: RruId,
}

impl SymbolBlock {
    pub fn random_qpsk<R: Rng + ?Sized>(len: usize, rru_id: RruId, rng: &mut R) -> Self {
        Self { symbols: qpsk_symbols(len, rng), modulation: Modulation::Qpsk, rru_id }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

/// Transmit beamformer `F_d` for a single data stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Beamformer {
    /// One port, unit weight.
    Identity,
    /// Conjugate steering weights toward `(phi, theta)` on a `rows x cols` array.
    MaximumRatio { phi: f64, theta: f64, rows: usize, cols: usize },
}

impl Beamformer {
    pub fn weights(&self) -> Vec<Complex64> {
        match self {
            Beamformer::Identity => vec![Complex64::new(1.0, 0.0)],
            Beamformer::MaximumRatio { phi, theta, rows, cols } => {
                let a = channel::steering_vector(*phi, *theta, *rows, *cols);
                let k = 1.0 / (a.len() as f64).sqrt();
                a.0.iter().map(|v| v.conj() * k).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmitFrame {
    pub rru_id: RruId,
    /// One sample stream per antenna port.
    pub ports: Vec<Vec<Complex64>>,
    pub beamformer: Vec<Complex64>,
    /// Power control coefficient `gamma` of the single stream.
    pub power_coeff: f64,
    pub fingerprinted: bool,
}

impl TransmitFrame {
    pub fn len(&self) -> usize {
        self.ports.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sum over ports of mean sample power.
    pub fn total_power(&self) -> f64 {
        self.ports
            .iter()
            .map(|p| p.iter().map(|v| v.norm_sqr()).sum::<f64>() / p.len().max(1) as f64)
            .sum()
    }

    /// Scalar waveform launched along the beam: ports projected onto the
    /// normalized beamformer. For the identity beamformer this is port 0.
    pub fn effective_waveform(&self) -> Vec<Complex64> {
        if self.ports.len() == 1 {
            return self.ports[0].clone();
        }
        let norm = self.beamformer.iter().map(|w| w.norm_sqr()).sum::<f64>().sqrt();
        (0..self.len())
            .map(|n| {
                self.ports
                    .iter()
                    .zip(&self.beamformer)
                    .map(|(p, w)| w.conj() / norm * p[n])
                    .sum()
            })
            .collect()
    }
}

fn normalize_power(ports: &mut [Vec<Complex64>], budget: f64) {
    let total: f64 = ports
        .iter()
        .map(|p| p.iter().map(|v| v.norm_sqr()).sum::<f64>() / p.len() as f64)
        .sum();
    let k = (budget / total).sqrt();
    for p in ports.iter_mut() {
        for v in p.iter_mut() {
            *v *= k;
        }
    }
}

/// Build `x_d = fingerprint(F_d gamma^1/2 s)` with total power `power_budget`.
///
/// Power is normalized before the impairments (so `gamma` only matters
/// through its effect on the budget split) and again after them. All ports
/// share one RF chain signature, including the phase-noise realization.
pub fn make_transmit_frame(
    symbols: &SymbolBlock,
    beamformer: &Beamformer,
    power_coeff: f64,
    profile: &FingerprintProfile,
    power_budget: f64,
    sample_interval: f64,
    seed: u64,
) -> Result<TransmitFrame> {
    if symbols.is_empty() {
        return Err(Error::EmptyInput("symbol block"));
    }
    if !(power_coeff >= 0.0) || !(power_budget > 0.0) {
        return Err(Error::InvalidConfig("power coefficient must be >= 0 and budget > 0".into()));
    }
    let energy: f64 = symbols.symbols.iter().map(|v| v.norm_sqr()).sum();
    if energy == 0.0 || power_coeff == 0.0 {
        return Err(Error::InvalidConfig("zero-power symbol block".into()));
    }
    let weights = beamformer.weights();
    let amp = power_coeff.sqrt();
    let mut ports: Vec<Vec<Complex64>> = weights
        .iter()
        .map(|w| symbols.symbols.iter().map(|s| w * amp * s).collect())
        .collect();
    normalize_power(&mut ports, power_budget);
    let fingerprinted = !profile.is_identity();
    if fingerprinted {
        for p in ports.iter_mut() {
            let mut pn = rng_for(seed, &[stream::PHASE_NOISE, symbols.rru_id as u64]);
            *p = apply_fingerprint(p, profile, sample_interval, &mut pn);
        }
        normalize_power(&mut ports, power_budget);
    }
    Ok(TransmitFrame { rru_id: symbols.rru_id, ports, beamformer: weights, power_coeff, fingerprinted })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComponentLabel {
    /// `X_UE`: uplink user signals.
    Ue,
    /// `Y_LOS`: direct RRU-to-RRU paths.
    Los,
    /// Long-standing reflector echoes (historical clutter).
    StaticNlos,
    /// Mobile reflector echoes (sensing targets).
    MobileNlos,
    Noise,
}

impl ComponentLabel {
    pub const ALL: [ComponentLabel; 5] = [
        ComponentLabel::Ue,
        ComponentLabel::Los,
        ComponentLabel::StaticNlos,
        ComponentLabel::MobileNlos,
        ComponentLabel::Noise,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ComponentLabel::Ue => "ue",
            ComponentLabel::Los => "los",
            ComponentLabel::StaticNlos => "static-nlos",
            ComponentLabel::MobileNlos => "mobile-nlos",
            ComponentLabel::Noise => "noise",
        }
    }
}

/// Contribution of one RRU path at the sink array.
#[derive(Debug, Clone, PartialEq)]
pub struct PathComponent {
    pub path: PathParams,
    pub label: ComponentLabel,
    pub samples: ComplexMatrix,
}

/// Uplink RRU observation with its ground-truth decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedFrame {
    pub sink: RruId,
    pub samples: ComplexMatrix,
    pub components: BTreeMap<ComponentLabel, ComplexMatrix>,
    /// Per-path RRU contributions (LOS and NLOS), in channel order.
    pub paths: Vec<PathComponent>,
    /// W/Hz.
    pub noise_psd: f64,
    /// Per-antenna, per-sample noise variance `psd * bandwidth`.
    pub noise_power: f64,
}

impl ReceivedFrame {
    pub fn component(&self, label: ComponentLabel) -> &ComplexMatrix {
        &self.components[&label]
    }

    /// Sum of the stored components in the fixed assembly order.
    pub fn recompose(&self) -> ComplexMatrix {
        let mut acc = ComplexMatrix::zeros(self.samples.rows(), self.samples.cols());
        for label in ComponentLabel::ALL {
            acc += self.component(label);
        }
        acc
    }

    pub fn num_antennas(&self) -> usize {
        self.samples.rows()
    }

    pub fn len(&self) -> usize {
        self.samples.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn complex_gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, power: f64, rng: &mut R) -> ComplexMatrix {
    if power == 0.0 {
        return ComplexMatrix::zeros(rows, cols);
    }
    let n = Normal::new(0.0, (power / 2.0).sqrt()).expect("finite noise power");
    ComplexMatrix::from_fn(rows, cols, |_, _| Complex64::new(n.sample(rng), n.sample(rng)))
}

/// Assemble `y_u = X_UE + Y_LOS + Y_NLOS(static) + Y_NLOS(mobile) + w_u` at `sink`.
///
/// One frame per downlink RRU is reused for every sink. Noise is circular
/// complex Gaussian with variance `noise_psd / T_x` per antenna and sample.
#[allow(clippy::too_many_arguments)]
pub fn assemble_received(
    scenario: &Scenario,
    channel: &ChannelRealization,
    frames: &BTreeMap<RruId, TransmitFrame>,
    ue_signals: &BTreeMap<u32, Vec<Complex64>>,
    sink: RruId,
    noise_psd: f64,
    seed: u64,
) -> Result<ReceivedFrame> {
    let rru = scenario.rru(sink)?;
    let rows = rru.antenna_rows;
    let cols = rru.antenna_cols;
    let len = frames.values().next().map(TransmitFrame::len).unwrap_or(0);
    if len == 0 {
        return Err(Error::EmptyInput("transmit frames"));
    }
    if let Some(f) = frames.values().find(|f| f.len() != len) {
        return Err(Error::dims(format!("{len} samples"), format!("{} samples from RRU {}", f.len(), f.rru_id)));
    }
    if !(noise_psd >= 0.0) {
        return Err(Error::InvalidConfig("noise PSD must be nonnegative".into()));
    }
    let f0 = scenario.carrier_frequency;
    let tx = scenario.sample_interval;
    let na = rows * cols;

    let mut components: BTreeMap<ComponentLabel, ComplexMatrix> =
        ComponentLabel::ALL.iter().map(|l| (*l, ComplexMatrix::zeros(na, len))).collect();

    for ue in scenario.ues.iter().filter(|u| u.active) {
        if let Some(sig) = ue_signals.get(&ue.id) {
            if sig.len() != len {
                return Err(Error::dims(format!("{len} samples"), format!("{} samples from UE {}", sig.len(), ue.id)));
            }
            let path = channel::ue_path(scenario, ue, sink)?;
            *components.get_mut(&ComponentLabel::Ue).unwrap() += &channel::propagate(&path, rows, cols, f0, tx, sig);
        }
    }

    let mut paths = Vec::new();
    for d in scenario.downlink_ids() {
        let frame = frames.get(&d).ok_or(Error::UnknownRru(d))?;
        let pair = channel.pair(d, sink).ok_or_else(|| {
            Error::InvalidConfig(format!("channel realization has no pair ({d}, {sink})"))
        })?;
        let waveform = frame.effective_waveform();
        for path in &pair.paths {
            let label = match (path.kind, path.reflector_id) {
                (PathKind::Los, _) => ComponentLabel::Los,
                (PathKind::Nlos, Some(rid)) => {
                    let refl = scenario
                        .reflectors
                        .iter()
                        .find(|r| r.id == rid)
                        .ok_or_else(|| Error::InvalidConfig(format!("unknown reflector {rid}")))?;
                    match refl.kind {
                        ReflectorKind::LongStanding => ComponentLabel::StaticNlos,
                        ReflectorKind::Mobile => ComponentLabel::MobileNlos,
                    }
                }
                (PathKind::Nlos, None) => {
                    return Err(Error::InvalidConfig("NLOS path without a reflector".into()));
                }
            };
            let samples = channel::propagate(path, rows, cols, f0, tx, &waveform);
            *components.get_mut(&label).unwrap() += &samples;
            paths.push(PathComponent { path: path.clone(), label, samples });
        }
    }

    let noise_power = noise_psd * scenario.bandwidth();
    let mut rng = rng_for(seed, &[stream::NOISE, sink as u64]);
    components.insert(ComponentLabel::Noise, complex_gaussian(na, len, noise_power, &mut rng));

    let mut samples = ComplexMatrix::zeros(na, len);
    for label in ComponentLabel::ALL {
        samples += &components[&label];
    }
    Ok(ReceivedFrame { sink, samples, components, paths, noise_psd, noise_power })
}

/// Frame after subtraction of known components.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualFrame {
    pub sink: RruId,
    pub samples: ComplexMatrix,
    pub components_removed: BTreeSet<ComponentLabel>,
    /// Residual carries more power than the frame it came from, which
    /// only happens when a "known" component was badly wrong.
    pub suspect: bool,
}

/// `residual = y - known_los - historical_clutter`.
pub fn cancel_known(
    frame: &ReceivedFrame,
    known_los: &ComplexMatrix,
    historical_clutter: Option<&ComplexMatrix>,
) -> Result<ResidualFrame> {
    frame.samples.check_same_shape(known_los)?;
    let mut samples = &frame.samples - known_los;
    let mut removed = BTreeSet::from([ComponentLabel::Los]);
    if let Some(clutter) = historical_clutter {
        frame.samples.check_same_shape(clutter)?;
        samples -= clutter;
        removed.insert(ComponentLabel::StaticNlos);
    }
    let suspect = samples.energy() > frame.samples.energy();
    Ok(ResidualFrame { sink: frame.sink, samples, components_removed: removed, suspect })
}

/// Idle test statistic: mean residual power minus the expected power of the
/// remaining target echoes.
pub fn idle_statistic(residual: &ResidualFrame, expected_nlos_power: f64) -> Result<f64> {
    if residual.samples.is_empty() {
        return Err(Error::EmptyInput("residual frame"));
    }
    Ok(residual.samples.mean_power() - expected_nlos_power)
}

/// `true` when no uplink user is transmitting: the statistic is below `threshold` (W).
pub fn detect_uplink_idle(residual: &ResidualFrame, threshold: f64, expected_nlos_power: f64) -> Result<bool> {
    Ok(idle_statistic(residual, expected_nlos_power)? < threshold)
}

/// Threshold at the given quantile (e.g. 0.999) of UE-absent statistics.
///
/// Uses the order statistic at index `ceil(q * n) - 1`, so at most a fraction
/// `1 - q` of the calibration draws lie strictly above it.
pub fn calibrate_idle_threshold(null_statistics: &[f64], quantile: f64) -> Result<f64> {
    if null_statistics.is_empty() {
        return Err(Error::EmptyInput("idle calibration statistics"));
    }
    let mut v = null_statistics.to_vec();
    v.sort_by(f64::total_cmp);
    let idx = ((quantile * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    // Strictly-below test: nudge so draws equal to the order statistic stay idle.
    Ok(f64::from_bits(v[idx].to_bits()) + v[idx].abs() * f64::EPSILON)
}

/// Long-standing clutter response learned from past frames.
///
/// Models the post-LOS residual as `C X + rest`, where row `d` of `X` is the
/// known waveform of downlink RRU `d`, and fits the zero-Doppler clutter
/// matrix `C` (antennas x sources) by least squares over the history window.
#[derive(Debug, Clone, PartialEq)]
pub struct ClutterEstimator {
    pub sources: Vec<RruId>,
    /// Antennas x sources.
    pub response: Vec<Vec<Complex64>>,
}

impl ClutterEstimator {
    pub fn learn(history: &[(ComplexMatrix, BTreeMap<RruId, Vec<Complex64>>)]) -> Result<Self> {
        let (first_residual, first_known) = history.first().ok_or(Error::EmptyInput("clutter history"))?;
        let sources: Vec<RruId> = first_known.keys().copied().collect();
        let nd = sources.len();
        let na = first_residual.rows();
        let mut cross = DMatrix::<Complex64>::zeros(na, nd);
        let mut gram = DMatrix::<Complex64>::zeros(nd, nd);
        for (residual, known) in history {
            if residual.rows() != na {
                return Err(Error::dims(na, residual.rows()));
            }
            let x: Vec<&Vec<Complex64>> = sources
                .iter()
                .map(|d| known.get(d).ok_or(Error::UnknownRru(*d)))
                .collect::<Result<_>>()?;
            for w in &x {
                if w.len() != residual.cols() {
                    return Err(Error::dims(residual.cols(), w.len()));
                }
            }
            for a in 0..na {
                let row = residual.row(a);
                for (j, xj) in x.iter().enumerate() {
                    cross[(a, j)] += row.iter().zip(xj.iter()).map(|(r, s)| r * s.conj()).sum::<Complex64>();
                }
            }
            for i in 0..nd {
                for j in 0..nd {
                    gram[(i, j)] += x[i].iter().zip(x[j].iter()).map(|(a, b)| a * b.conj()).sum::<Complex64>();
                }
            }
        }
        let ridge = 1e-12 * (0..nd).map(|i| gram[(i, i)].re).sum::<f64>() / nd.max(1) as f64;
        for i in 0..nd {
            gram[(i, i)] += Complex64::new(ridge, 0.0);
        }
        // C G = cross  =>  G^T C^T = cross^T  (G is Hermitian, so G^T = conj(G)).
        let solved = gram
            .transpose()
            .lu()
            .solve(&cross.transpose())
            .ok_or_else(|| Error::InvalidConfig("clutter history is rank deficient".into()))?;
        let response = (0..na).map(|a| (0..nd).map(|j| solved[(j, a)]).collect()).collect();
        Ok(Self { sources, response })
    }

    /// Predicted clutter for the current known waveforms.
    pub fn predict(&self, known: &BTreeMap<RruId, Vec<Complex64>>) -> Result<ComplexMatrix> {
        let x: Vec<&Vec<Complex64>> =
            self.sources.iter().map(|d| known.get(d).ok_or(Error::UnknownRru(*d))).collect::<Result<_>>()?;
        let len = x.first().map_or(0, |w| w.len());
        Ok(ComplexMatrix::from_fn(self.response.len(), len, |a, n| {
            self.response[a].iter().zip(&x).map(|(c, w)| c * w[n]).sum()
        }))
    }
}

/// Sidecar describing a binary frame export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSidecar {
    pub format: String,
    pub layout: String,
    pub antennas: usize,
    pub samples: usize,
    pub sink: RruId,
    pub noise_psd: f64,
    pub noise_power: f64,
    /// Label -> file name, `samples` for the observed signal.
    pub files: BTreeMap<String, String>,
}

pub const FRAME_FORMAT: &str = "cf32-le-interleaved";

/// Write a matrix as little-endian interleaved `f32` pairs, antenna-major.
pub fn write_cf32(path: &Path, m: &ComplexMatrix) -> Result<()> {
    let mut buf = Vec::with_capacity(m.as_slice().len() * 8);
    for v in m.as_slice() {
        buf.extend_from_slice(&(v.re as f32).to_le_bytes());
        buf.extend_from_slice(&(v.im as f32).to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_cf32(path: &Path, rows: usize, cols: usize) -> Result<ComplexMatrix> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() != rows * cols * 8 {
        return Err(Error::dims(rows * cols * 8, buf.len()));
    }
    let data = buf
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
            Complex64::new(re as f64, im as f64)
        })
        .collect();
    ComplexMatrix::from_vec(rows, cols, data)
}

/// Export a frame and its ground-truth components as `<stem>.<label>.cf32`
/// files plus `<stem>.json`.
pub fn export_frame(dir: &Path, stem: &str, frame: &ReceivedFrame) -> Result<FrameSidecar> {
    let mut files = BTreeMap::new();
    let mut write = |label: &str, m: &ComplexMatrix| -> Result<()> {
        let name = format!("{stem}.{label}.cf32");
        write_cf32(&dir.join(&name), m)?;
        files.insert(label.to_string(), name);
        Ok(())
    };
    write("samples", &frame.samples)?;
    for label in ComponentLabel::ALL {
        write(label.name(), frame.component(label))?;
    }
    let sidecar = FrameSidecar {
        format: FRAME_FORMAT.into(),
        layout: "antenna-major".into(),
        antennas: frame.num_antennas(),
        samples: frame.len(),
        sink: frame.sink,
        noise_psd: frame.noise_psd,
        noise_power: frame.noise_power,
        files,
    };
    std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(sidecar)
}
