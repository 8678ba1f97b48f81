//! Monte Carlo trials and campaigns over the full sensing pipeline.
//!
//! A trial draws a scenario, runs the signal chain once (transmit, receive,
//! cancel, idle check, separate) and then scores every sweep point against
//! that one slot: error injection and synthetic classification use draws
//! keyed on path identity, so grid points differ only in their knobs.
//!
//! Trial `t` of a campaign with master seed `m` uses the seed
//! `derive_seed(m, [TRIAL, t])`, independent of execution order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{self, PathParams};
use crate::classifier::{self, ClassifierModel, SyntheticClassifier, DEFAULT_MAX_OFFSET_HZ};
use crate::fingerprint::{FingerprintLibrary, LibraryConfig};
use crate::localization::{
    self, DetectionHypothesis, FusedReflector, MatchReport, OutlierGate, ReflectorEstimate, RruPositions,
};
use crate::rng::{derive_seed, rng_for, stream};
use crate::scenario::{self, ReflectorKind, Role, Scenario, ScenarioConfig};
use crate::sensing::{self, ErrorInjection, ExtractedParams, SeparatedPath};
use crate::signal_chain::{self, Beamformer, ComponentLabel, Modulation, ReceivedFrame, SymbolBlock, TransmitFrame};
use crate::{Error, Result, RruId, SPEED_OF_LIGHT};

/// Which RRUs transmit during the sensing slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SensingMode {
    /// The scenario's initial downlink split; sources must be identified.
    MultiRru,
    /// Each downlink RRU transmits alone; the source is known and the
    /// classifier is bypassed.
    SingleDownlink,
}

impl SensingMode {
    pub fn name(&self) -> &'static str {
        match self {
            SensingMode::MultiRru => "multi-rru",
            SensingMode::SingleDownlink => "single-downlink",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ClassifierMode {
    /// Correct with probability `p`, one sweep axis entry per accuracy.
    Synthetic { accuracies: Vec<f64> },
    /// A trained model voting over the separated paths of each source/sink pair.
    /// `fingerprints` holds the profiles the model was trained on.
    Trained { model: PathBuf, fingerprints: PathBuf },
}

impl Default for ClassifierMode {
    fn default() -> Self {
        ClassifierMode::Synthetic { accuracies: vec![0.98, 0.96, 0.94, 0.92, 0.90] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CampaignConfig {
    pub seed: u64,
    pub trials: usize,
    pub mode: SensingMode,
    /// Range-equivalent delay error grid, m.
    pub sigma_range: Vec<f64>,
    /// The angle error std is `sigma_range / angle_reference_range`, i.e. the
    /// same cross-range error as the range error at this distance.
    pub angle_reference_range: f64,
    pub sigma_doppler: f64,
    pub shared_angle_error: bool,
    pub classifier: ClassifierMode,
    pub n_symbols: usize,
    /// Downlink transmit power per RRU, W.
    pub tx_power: f64,
    /// Receiver noise PSD, W/Hz.
    pub noise_psd: f64,
    pub leakage: f64,
    pub fingerprint: LibraryConfig,
    /// One-sided z-score of the analytic idle threshold.
    pub idle_z: f64,
    pub los_validation: bool,
    /// LOS range tolerance, m.
    pub eps_r: f64,
    pub outlier_rejection: bool,
    pub gate: OutlierGate,
    pub cluster_radius: f64,
    /// Truth matching gate; twice the cluster radius when unset.
    pub match_gate: Option<f64>,
    pub scenario: ScenarioConfig,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            trials: 200,
            mode: SensingMode::MultiRru,
            sigma_range: vec![0.1, 0.25, 0.5, 1.0],
            angle_reference_range: 200.0,
            sigma_doppler: 0.0,
            shared_angle_error: false,
            classifier: ClassifierMode::default(),
            n_symbols: 256,
            tx_power: 1.0,
            noise_psd: 4.0e-21,
            leakage: 0.0,
            fingerprint: LibraryConfig::default(),
            idle_z: 3.09,
            los_validation: true,
            eps_r: 5.0,
            outlier_rejection: true,
            gate: OutlierGate::default(),
            cluster_radius: 10.0,
            match_gate: None,
            // Targets farther than the gate range from every uplink RRU can
            // never be scored, so campaigns keep reflectors near the network.
            scenario: ScenarioConfig { reflector_anchor_radius: Some(250.0), ..ScenarioConfig::default() },
        }
    }
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        self.scenario.validate()?;
        if self.trials == 0 {
            return bad("trials must be >= 1");
        }
        if self.sigma_range.is_empty() {
            return bad("sigma_range grid is empty");
        }
        if self.sigma_range.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("sigma_range values must be finite and nonnegative");
        }
        if let ClassifierMode::Synthetic { accuracies } = &self.classifier {
            if accuracies.is_empty() {
                return bad("classifier accuracy grid is empty");
            }
            if accuracies.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return bad("classifier accuracies must lie in [0, 1]");
            }
        }
        if !(self.angle_reference_range > 0.0) {
            return bad("angle_reference_range must be positive");
        }
        if self.n_symbols < 2 {
            return bad("n_symbols must be >= 2");
        }
        if !(self.tx_power > 0.0) || !(self.noise_psd >= 0.0) {
            return bad("tx_power must be positive and noise_psd nonnegative");
        }
        if !(0.0..1.0).contains(&self.leakage) {
            return bad("leakage must lie in [0, 1)");
        }
        if !(self.eps_r > 0.0 && self.cluster_radius > 0.0) {
            return bad("eps_r and cluster_radius must be positive");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn match_gate(&self) -> f64 {
        self.match_gate.unwrap_or(2.0 * self.cluster_radius)
    }

    pub fn injection(&self, sigma_range: f64, seed: u64) -> ErrorInjection {
        ErrorInjection {
            sigma_range,
            sigma_angle: sigma_range / self.angle_reference_range,
            sigma_doppler: self.sigma_doppler,
            seed,
            shared_angle_error: self.shared_angle_error,
        }
    }

    /// Accuracy axis of the sweep; `None` stands for the trained model.
    pub fn accuracy_axis(&self) -> Vec<Option<f64>> {
        match &self.classifier {
            ClassifierMode::Synthetic { accuracies } => accuracies.iter().map(|p| Some(*p)).collect(),
            ClassifierMode::Trained { .. } => vec![None],
        }
    }

    pub fn grid(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &sigma_range in &self.sigma_range {
            for accuracy in self.accuracy_axis() {
                out.push(GridPoint { sigma_range, accuracy, mode: self.mode });
            }
        }
        out
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        derive_seed(self.seed, &[stream::TRIAL, trial as u64])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub sigma_range: f64,
    /// Synthetic classifier accuracy, `None` for the trained model.
    pub accuracy: Option<f64>,
    pub mode: SensingMode,
}

/// Trained model plus the fingerprint profiles it was trained on.
#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub model: ClassifierModel,
    pub library: FingerprintLibrary,
}

impl TrainedClassifier {
    pub fn load(model: &Path, fingerprints: &Path) -> Result<Self> {
        Ok(Self {
            model: ClassifierModel::from_json(&std::fs::read_to_string(model)?)?,
            library: FingerprintLibrary::from_json(&std::fs::read_to_string(fingerprints)?)?,
        })
    }
}

/// Paths of one source at one sink after separation.
#[derive(Debug, Clone)]
pub struct PathGroup {
    pub source: RruId,
    pub sink: RruId,
    pub los: PathParams,
    pub nlos: Vec<SeparatedPath>,
    /// Trained-model labels of the LOS path and of each NLOS path.
    pub predicted: Option<(RruId, Vec<RruId>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdleCheck {
    pub sink: RruId,
    pub statistic: f64,
    pub threshold: f64,
    pub idle: bool,
}

/// Everything the signal chain produced for one sensing slot.
#[derive(Debug, Clone)]
pub struct SlotObservation {
    pub trial: usize,
    pub seed: u64,
    pub scenario: Scenario,
    pub idle: bool,
    pub idle_checks: Vec<IdleCheck>,
    pub groups: Vec<PathGroup>,
    pub elapsed: Duration,
}

/// Idle threshold `P_n (1 + z sqrt((1 + 2 P_t / P_n) / K))` for a statistic
/// averaged over `K` complex samples of target power `P_t` in noise `P_n`.
pub fn analytic_idle_threshold(noise_power: f64, target_power: f64, samples: usize, z: f64) -> f64 {
    if noise_power <= 0.0 {
        return 0.0;
    }
    let var = (1.0 + 2.0 * target_power / noise_power) / samples as f64;
    noise_power * (1.0 + z * var.sqrt())
}

/// Run the signal chain of trial `trial` in `mode`.
pub fn observe_slot(
    config: &CampaignConfig,
    mode: SensingMode,
    trial: usize,
    trained: Option<&TrainedClassifier>,
) -> Result<SlotObservation> {
    let seed = config.trial_seed(trial);
    let wrap = |e: Error| Error::Trial { trial, seed, source: Box::new(e) };
    let scenario = scenario::generate_scenario(&config.scenario, seed).map_err(wrap)?;
    observe_scenario(config, &scenario, mode, trial, seed, trained).map_err(wrap)
}

/// Common payload, transmit frames and active UE waveforms of a slot.
pub struct SlotInputs {
    pub payload: Vec<Complex64>,
    pub frames: BTreeMap<RruId, TransmitFrame>,
    pub ue_signals: BTreeMap<u32, Vec<Complex64>>,
}

pub fn slot_inputs(
    config: &CampaignConfig,
    scenario: &Scenario,
    seed: u64,
    trained: Option<&TrainedClassifier>,
) -> Result<SlotInputs> {
    let downlink = scenario.downlink_ids();
    let tx = scenario.sample_interval;
    let library = match trained {
        Some(t) => t.library.clone(),
        None => FingerprintLibrary::build(&downlink, &config.fingerprint, tx, seed)?,
    };
    let payload = signal_chain::qpsk_symbols(config.n_symbols, &mut rng_for(seed, &[stream::PAYLOAD]));
    let mut frames = BTreeMap::new();
    for &d in &downlink {
        let block = SymbolBlock { symbols: payload.clone(), modulation: Modulation::Qpsk, rru_id: d };
        let frame =
            signal_chain::make_transmit_frame(&block, &Beamformer::Identity, 1.0, library.get(d)?, config.tx_power, tx, seed)?;
        frames.insert(d, frame);
    }
    let mut ue_signals = BTreeMap::new();
    for ue in scenario.ues.iter().filter(|u| u.active) {
        let mut rng = rng_for(seed, &[stream::UE, ue.id as u64]);
        let amp = ue.tx_power.sqrt();
        ue_signals.insert(ue.id, signal_chain::qpsk_symbols(config.n_symbols, &mut rng).into_iter().map(|s| s * amp).collect());
    }
    Ok(SlotInputs { payload, frames, ue_signals })
}

/// Received frames of every uplink RRU when all downlink RRUs transmit.
pub fn received_frames(
    config: &CampaignConfig,
    scenario: &Scenario,
    seed: u64,
    trained: Option<&TrainedClassifier>,
) -> Result<Vec<ReceivedFrame>> {
    let inputs = slot_inputs(config, scenario, seed, trained)?;
    let realization = channel::realize_channel(scenario)?;
    scenario
        .uplink_ids()
        .into_iter()
        .map(|u| signal_chain::assemble_received(scenario, &realization, &inputs.frames, &inputs.ue_signals, u, config.noise_psd, seed))
        .collect()
}

/// Signal chain on a scenario with its roles as given.
///
/// In multi-RRU mode all downlink RRUs transmit in one slot. In
/// single-downlink mode each downlink RRU transmits alone in a slot of its
/// own to the same uplink set, so every path has a known source.
pub fn observe_scenario(
    config: &CampaignConfig,
    scenario: &Scenario,
    mode: SensingMode,
    trial: usize,
    seed: u64,
    trained: Option<&TrainedClassifier>,
) -> Result<SlotObservation> {
    let start = Instant::now();
    scenario.validate()?;
    let tx = scenario.sample_interval;
    let SlotInputs { payload, frames, ue_signals } = slot_inputs(config, scenario, seed, trained)?;
    let downlink = scenario.downlink_ids();

    let slots: Vec<(Scenario, u64)> = match mode {
        SensingMode::MultiRru => vec![(scenario.clone(), seed)],
        SensingMode::SingleDownlink => downlink
            .iter()
            .map(|&d| {
                let mut alone = scenario.clone();
                alone.rrus.retain(|r| r.id == d || r.role == Role::Uplink);
                (alone, derive_seed(seed, &[stream::NOISE, d as u64]))
            })
            .collect(),
    };

    let mut idle_checks = Vec::new();
    let mut groups = Vec::new();
    for (slot, slot_seed) in &slots {
        let realization = channel::realize_channel(slot)?;
        for u in slot.uplink_ids() {
            let frame = signal_chain::assemble_received(slot, &realization, &frames, &ue_signals, u, config.noise_psd, *slot_seed)?;
            let residual = signal_chain::cancel_known(
                &frame,
                frame.component(ComponentLabel::Los),
                Some(frame.component(ComponentLabel::StaticNlos)),
            )?;
            let target_power = frame.component(ComponentLabel::MobileNlos).mean_power();
            let threshold =
                analytic_idle_threshold(frame.noise_power, target_power, frame.samples.as_slice().len(), config.idle_z)
                    + 1e-9 * target_power
                    + f64::MIN_POSITIVE;
            let statistic = signal_chain::idle_statistic(&residual, target_power)?;
            let idle = statistic < threshold;
            idle_checks.push(IdleCheck { sink: u, statistic, threshold, idle });
            if !idle {
                continue;
            }

            let mobile: Vec<_> = frame.paths.iter().filter(|p| p.label == ComponentLabel::MobileNlos).cloned().collect();
            let separation = sensing::separate_paths(&residual, &mobile, config.leakage)?;
            let mut by_source: BTreeMap<RruId, Vec<SeparatedPath>> = BTreeMap::new();
            for sp in separation.paths {
                by_source.entry(sp.true_source).or_default().push(sp);
            }
            for d in slot.downlink_ids() {
                let los = frame
                    .paths
                    .iter()
                    .find(|p| p.label == ComponentLabel::Los && p.path.source_rru == d)
                    .ok_or_else(|| Error::InvalidConfig(format!("no LOS path from {d} to {u}")))?;
                let nlos = by_source.remove(&d).unwrap_or_default();
                let predicted = match (trained, mode) {
                    (Some(t), SensingMode::MultiRru) => {
                        let label = |samples| -> Result<RruId> {
                            let f = classifier::extract_features(samples, &payload, tx, DEFAULT_MAX_OFFSET_HZ)?;
                            classifier::predict(&t.model, &f)
                        };
                        let los_label = label(&los.samples)?;
                        Some((los_label, nlos.iter().map(|p| label(&p.samples)).collect::<Result<_>>()?))
                    }
                    _ => None,
                };
                groups.push(PathGroup { source: d, sink: u, los: los.path.clone(), nlos, predicted });
            }
        }
    }
    let idle = idle_checks.iter().all(|c| c.idle);
    if !idle {
        groups.clear();
    }
    Ok(SlotObservation { trial, seed, scenario: scenario.clone(), idle, idle_checks, groups, elapsed: start.elapsed() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub point: GridPoint,
    /// `false` when an uplink user was detected and sensing was skipped.
    pub idle: bool,
    /// `(reflector id, perception error)` per matched mobile reflector.
    pub errors: Vec<(u32, f64)>,
    pub misses: usize,
    pub false_alarms: usize,
    /// Source/sink groups attributed by the classifier and how many were right.
    pub classified: usize,
    pub correct: usize,
    pub los_rejected: usize,
    pub outliers_rejected: usize,
    pub estimates: usize,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl TrialResult {
    pub fn realized_accuracy(&self) -> Option<f64> {
        (self.classified > 0).then(|| self.correct as f64 / self.classified as f64)
    }

    pub fn mean_error(&self) -> Option<f64> {
        (!self.errors.is_empty()).then(|| self.errors.iter().map(|e| e.1).sum::<f64>() / self.errors.len() as f64)
    }
}

/// Full per-trial output, for verbose single-trial runs.
#[derive(Debug, Clone)]
pub struct TrialDetail {
    pub result: TrialResult,
    pub extracted: Vec<ExtractedParams>,
    pub fused: Vec<FusedReflector>,
    pub rejected: Vec<ReflectorEstimate>,
    pub report: MatchReport,
}

/// Classify, validate, solve, fuse and score one observed slot at `point`.
pub fn score_slot(config: &CampaignConfig, obs: &SlotObservation, point: GridPoint) -> Result<TrialDetail> {
    let start = Instant::now();
    let scenario = &obs.scenario;
    let positions: RruPositions = localization::rru_positions(scenario);
    let targets: Vec<_> = scenario.reflectors_of_kind(ReflectorKind::Mobile).collect();
    let mut result = TrialResult {
        trial: obs.trial,
        seed: obs.seed,
        point,
        idle: obs.idle,
        errors: Vec::new(),
        misses: targets.len(),
        false_alarms: 0,
        classified: 0,
        correct: 0,
        los_rejected: 0,
        outliers_rejected: 0,
        estimates: 0,
        elapsed: Duration::ZERO,
    };
    if !obs.idle {
        result.elapsed = obs.elapsed + start.elapsed();
        return Ok(TrialDetail {
            result,
            extracted: Vec::new(),
            fused: Vec::new(),
            rejected: Vec::new(),
            report: MatchReport { missed: targets.iter().map(|r| r.id).collect(), ..MatchReport::default() },
        });
    }

    let inj = config.injection(point.sigma_range, obs.seed);
    let labels = scenario.downlink_ids();
    let synthetic = point.accuracy.map(|p| SyntheticClassifier::new(p, obs.seed)).transpose()?;
    let mut extracted = Vec::new();
    let mut estimates = Vec::new();
    let mut rejected = Vec::new();
    // Every separated path is attributed on its own. Paths claimed for the
    // same source at the same sink form one set, kept only when one of its
    // LOS paths matches the claimed source's distance.
    let mut sets: BTreeMap<(RruId, RruId), (Vec<ExtractedParams>, Vec<ExtractedParams>)> = BTreeMap::new();
    for g in &obs.groups {
        let mut attribute = |truth: RruId, path_key: u64, predicted: Option<RruId>| -> Result<Option<RruId>> {
            if point.mode == SensingMode::SingleDownlink {
                return Ok(Some(truth));
            }
            let claimed = match (&synthetic, predicted) {
                (Some(c), _) => c.classify(truth, &labels, &[g.sink as u64, path_key, truth as u64])?,
                (None, Some(p)) => p,
                (None, None) => return Ok(None),
            };
            result.classified += 1;
            result.correct += usize::from(claimed == truth);
            Ok(Some(claimed))
        };
        let los = sensing::inject(&g.los, 0, &inj)?;
        extracted.push(los.clone());
        if let Some(claimed) = attribute(g.source, 0, g.predicted.as_ref().map(|p| p.0))? {
            sets.entry((claimed, g.sink)).or_default().0.push(los);
        }
        for (k, sp) in g.nlos.iter().enumerate() {
            let params = sensing::extract_params(sp, &sp.truth, &inj)?;
            extracted.push(params.clone());
            let key = params.reflector_id.map_or(0, |r| r as u64 + 1);
            if let Some(claimed) = attribute(g.source, key, g.predicted.as_ref().map(|p| p.1[k]))? {
                sets.entry((claimed, g.sink)).or_default().1.push(params);
            }
        }
    }
    for ((claimed, sink), (los, nlos)) in sets {
        if config.los_validation {
            let mut valid = false;
            for params in los {
                let hyp = DetectionHypothesis { params, claimed_source: claimed, sink };
                valid |= localization::validate_los(&hyp, &positions, config.eps_r)?;
            }
            if !valid {
                result.los_rejected += nlos.len();
                continue;
            }
        }
        for params in nlos {
            let hyp = DetectionHypothesis { params, claimed_source: claimed, sink };
            estimates.push(localization::solve_reflector(&hyp, &positions, SPEED_OF_LIGHT)?);
        }
    }
    result.estimates = estimates.len();
    let kept = if config.outlier_rejection {
        let (kept, out) = localization::partition_outliers(estimates, &positions, &scenario.volume, &config.gate)?;
        rejected = out;
        kept
    } else {
        let (kept, out): (Vec<_>, Vec<_>) = estimates.into_iter().partition(|e| e.accepted);
        rejected.extend(out);
        kept
    };
    result.outliers_rejected = rejected.len();

    let mut fused = localization::fuse_detections(&kept, config.cluster_radius);
    let report = localization::match_reflectors(&mut fused, &targets, config.match_gate());
    result.errors = report.matched.iter().map(|(id, _, e)| (*id, *e)).collect();
    result.misses = report.missed.len();
    result.false_alarms = report.false_alarms.len();
    result.elapsed = obs.elapsed + start.elapsed();
    Ok(TrialDetail { result, extracted, fused, rejected, report })
}

/// One trial at one grid point.
pub fn run_trial(config: &CampaignConfig, point: GridPoint, trial: usize) -> Result<TrialResult> {
    config.validate()?;
    let trained = load_trained(config)?;
    let obs = observe_slot(config, point.mode, trial, trained.as_ref())?;
    Ok(score_slot(config, &obs, point)?.result)
}

fn load_trained(config: &CampaignConfig) -> Result<Option<TrainedClassifier>> {
    match &config.classifier {
        ClassifierMode::Trained { model, fingerprints } => Ok(Some(TrainedClassifier::load(model, fingerprints)?)),
        ClassifierMode::Synthetic { .. } => Ok(None),
    }
}

/// Empirical distribution of perception errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCdf {
    samples: Vec<f64>,
}

impl ErrorCdf {
    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Quantile by linear interpolation between order statistics at
    /// positions `q (n - 1)`.
    pub fn quantile(&self, q: f64) -> f64 {
        let n = self.samples.len();
        let h = q.clamp(0.0, 1.0) * (n - 1) as f64;
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let (a, b) = (self.samples[lo], self.samples[hi]);
        if a == b {
            a
        } else {
            a + (h - lo as f64) * (b - a)
        }
    }

    pub fn median(&self) -> f64 {
        self.quantile(0.5)
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    /// Fraction of samples `<= x`.
    pub fn cdf(&self, x: f64) -> f64 {
        self.samples.partition_point(|v| *v <= x) as f64 / self.samples.len() as f64
    }
}

pub fn compute_cdf(errors: &[f64]) -> Result<ErrorCdf> {
    if errors.is_empty() {
        return Err(Error::EmptyInput("error list for CDF"));
    }
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(Error::InvalidConfig("perception errors must be finite".into()));
    }
    let mut samples = errors.to_vec();
    samples.sort_by(f64::total_cmp);
    Ok(ErrorCdf { samples })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub point: GridPoint,
    pub trials: usize,
    pub idle_trials: usize,
    pub targets: usize,
    pub matched: usize,
    pub misses: usize,
    pub false_alarms: usize,
    pub los_rejected: usize,
    pub outliers_rejected: usize,
    pub mean_error: Option<f64>,
    pub median_error: Option<f64>,
    pub p90_error: Option<f64>,
    pub realized_accuracy: Option<f64>,
    pub cdf: Option<ErrorCdf>,
    pub results: Vec<TrialResult>,
}

impl PointSummary {
    pub fn from_results(point: GridPoint, results: Vec<TrialResult>) -> Result<Self> {
        let errors: Vec<f64> = results.iter().flat_map(|r| r.errors.iter().map(|e| e.1)).collect();
        let cdf = if errors.is_empty() { None } else { Some(compute_cdf(&errors)?) };
        let classified: usize = results.iter().map(|r| r.classified).sum();
        let correct: usize = results.iter().map(|r| r.correct).sum();
        Ok(Self {
            point,
            trials: results.len(),
            idle_trials: results.iter().filter(|r| r.idle).count(),
            targets: results.iter().map(|r| r.errors.len() + r.misses).sum(),
            matched: errors.len(),
            misses: results.iter().map(|r| r.misses).sum(),
            false_alarms: results.iter().map(|r| r.false_alarms).sum(),
            los_rejected: results.iter().map(|r| r.los_rejected).sum(),
            outliers_rejected: results.iter().map(|r| r.outliers_rejected).sum(),
            mean_error: cdf.as_ref().map(ErrorCdf::mean),
            median_error: cdf.as_ref().map(ErrorCdf::median),
            p90_error: cdf.as_ref().map(|c| c.quantile(0.9)),
            realized_accuracy: (classified > 0).then(|| correct as f64 / classified as f64),
            cdf,
            results,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub config: CampaignConfig,
    pub points: Vec<PointSummary>,
}

impl CampaignReport {
    pub fn point(&self, sigma_range: f64, accuracy: Option<f64>, mode: SensingMode) -> Option<&PointSummary> {
        self.points
            .iter()
            .find(|p| p.point.sigma_range == sigma_range && p.point.accuracy == accuracy && p.point.mode == mode)
    }
}

/// Run every trial once per mode and score it at every grid point.
pub fn run_grid(config: &CampaignConfig, modes: &[SensingMode]) -> Result<CampaignReport> {
    config.validate()?;
    let trained = load_trained(config)?;
    let mut per_point: BTreeMap<(usize, usize), Vec<TrialResult>> = BTreeMap::new();
    for (m, &mode) in modes.iter().enumerate() {
        let grid = CampaignConfig { mode, ..config.clone() }.grid();
        let rows: Vec<Vec<TrialResult>> = (0..config.trials)
            .into_par_iter()
            .map(|t| {
                let obs = observe_slot(config, mode, t, trained.as_ref())?;
                grid.iter()
                    .map(|p| score_slot(config, &obs, *p).map(|d| d.result))
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| Error::Trial { trial: t, seed: obs.seed, source: Box::new(e) })
            })
            .collect::<Result<_>>()?;
        for row in rows {
            for (g, r) in row.into_iter().enumerate() {
                per_point.entry((m, g)).or_default().push(r);
            }
        }
    }
    let mut points = Vec::new();
    for ((m, g), results) in per_point {
        let grid = CampaignConfig { mode: modes[m], ..config.clone() }.grid();
        points.push(PointSummary::from_results(grid[g], results)?);
    }
    Ok(CampaignReport { config: config.clone(), points })
}

/// Sweep of the configured mode over the sigma_range x accuracy grid.
pub fn run_campaign(config: &CampaignConfig) -> Result<CampaignReport> {
    run_grid(config, &[config.mode])
}

/// Multi-RRU against single-downlink sensing on the same trial seeds.
pub fn run_comparison(config: &CampaignConfig) -> Result<CampaignReport> {
    run_grid(config, &[SensingMode::MultiRru, SensingMode::SingleDownlink])
}

/// Multi-RRU against single-downlink medians at one grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MedianRatio {
    pub sigma_range: f64,
    pub accuracy: Option<f64>,
    pub multi: Option<f64>,
    pub single: Option<f64>,
    /// `multi / single`.
    pub ratio: Option<f64>,
}

pub fn median_ratios(report: &CampaignReport) -> Vec<MedianRatio> {
    report
        .points
        .iter()
        .filter(|p| p.point.mode == SensingMode::MultiRru)
        .map(|multi| {
            let single = report.point(multi.point.sigma_range, multi.point.accuracy, SensingMode::SingleDownlink);
            let (m, s) = (multi.median_error, single.and_then(|s| s.median_error));
            let ratio = match (m, s) {
                (Some(m), Some(s)) if s > 0.0 => Some(m / s),
                _ => None,
            };
            MedianRatio { sigma_range: multi.point.sigma_range, accuracy: multi.point.accuracy, multi: m, single: s, ratio }
        })
        .collect()
}

#[derive(Serialize)]
struct SummaryRow {
    mode: &'static str,
    sigma_range: f64,
    accuracy: Option<f64>,
    trials: usize,
    idle_trials: usize,
    targets: usize,
    matched: usize,
    misses: usize,
    false_alarms: usize,
    los_rejected: usize,
    outliers_rejected: usize,
    mean_eps_p: Option<f64>,
    median_eps_p: Option<f64>,
    p90_eps_p: Option<f64>,
    realized_accuracy: Option<f64>,
}

#[derive(Serialize)]
struct CdfRow {
    mode: &'static str,
    sigma_range: f64,
    accuracy: Option<f64>,
    quantile: f64,
    eps_p: f64,
}

#[derive(Serialize)]
struct ErrorRow {
    mode: &'static str,
    sigma_range: f64,
    accuracy: Option<f64>,
    trial: usize,
    reflector: u32,
    eps_p: f64,
}

/// Number of evenly spaced quantiles written per grid point.
pub const CDF_POINTS: usize = 101;

/// Write `summary.csv`, `cdf.csv`, `errors.csv` and `summary.json` into `dir`.
pub fn write_report(dir: &Path, report: &CampaignReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut summary = csv::Writer::from_path(dir.join("summary.csv"))?;
    let mut cdf = csv::Writer::from_path(dir.join("cdf.csv"))?;
    let mut errors = csv::Writer::from_path(dir.join("errors.csv"))?;
    for p in &report.points {
        let mode = p.point.mode.name();
        summary.serialize(SummaryRow {
            mode,
            sigma_range: p.point.sigma_range,
            accuracy: p.point.accuracy,
            trials: p.trials,
            idle_trials: p.idle_trials,
            targets: p.targets,
            matched: p.matched,
            misses: p.misses,
            false_alarms: p.false_alarms,
            los_rejected: p.los_rejected,
            outliers_rejected: p.outliers_rejected,
            mean_eps_p: p.mean_error,
            median_eps_p: p.median_error,
            p90_eps_p: p.p90_error,
            realized_accuracy: p.realized_accuracy,
        })?;
        if let Some(c) = &p.cdf {
            for i in 0..CDF_POINTS {
                let q = i as f64 / (CDF_POINTS - 1) as f64;
                cdf.serialize(CdfRow {
                    mode,
                    sigma_range: p.point.sigma_range,
                    accuracy: p.point.accuracy,
                    quantile: q,
                    eps_p: c.quantile(q),
                })?;
            }
        }
        for r in &p.results {
            for &(reflector, eps_p) in &r.errors {
                errors.serialize(ErrorRow {
                    mode,
                    sigma_range: p.point.sigma_range,
                    accuracy: p.point.accuracy,
                    trial: r.trial,
                    reflector,
                    eps_p,
                })?;
            }
        }
    }
    summary.flush()?;
    cdf.flush()?;
    errors.flush()?;
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(report)?)?;
    Ok(())
}

pub fn read_report(dir: &Path) -> Result<CampaignReport> {
    Ok(serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json"))?)?)
}

/// Plain-text table of a report.
pub fn format_report(report: &CampaignReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:>8} {:>8} {:>7} {:>8} {:>7} {:>10} {:>10} {:>10} {:>8}\n",
        "mode", "sigma_m", "acc", "trials", "matched", "misses", "mean_m", "median_m", "p90_m", "acc_real"
    ));
    let opt = |v: Option<f64>, digits: usize| v.map_or("-".to_string(), |x| format!("{x:.digits$}"));
    for p in &report.points {
        out.push_str(&format!(
            "{:<16} {:>8.3} {:>8} {:>7} {:>8} {:>7} {:>10} {:>10} {:>10} {:>8}\n",
            p.point.mode.name(),
            p.point.sigma_range,
            p.point.accuracy.map_or("trained".to_string(), |a| format!("{a:.2}")),
            p.trials,
            p.matched,
            p.misses,
            opt(p.mean_error, 4),
            opt(p.median_error, 4),
            opt(p.p90_error, 4),
            opt(p.realized_accuracy, 4),
        ));
    }
    if report.points.iter().any(|p| p.point.mode == SensingMode::SingleDownlink)
        && report.points.iter().any(|p| p.point.mode == SensingMode::MultiRru)
    {
        out.push_str("\nmulti/single median ratio\n");
        for r in median_ratios(report) {
            out.push_str(&format!(
                "  sigma {:.3} acc {}: {}\n",
                r.sigma_range,
                r.accuracy.map_or("trained".to_string(), |a| format!("{a:.2}")),
                opt(r.ratio, 4)
            ));
        }
    }
    out
}
