//! Per-RRU hardware impairment model (the RF fingerprint).
//!
//! A profile applies, in order: IQ gain/phase imbalance, carrier frequency
//! offset, a memoryless cubic power amplifier, and a random-walk phase noise.
//! Profiles are drawn from a normalized signature vector and then scaled so
//! the impairment residual `|f(x) - x|^2` on a reference QPSK block is a
//! fixed multiple of a reference noise power.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::{rng_for, stream};
use crate::signal_chain::qpsk_symbols;
use crate::{Error, Result, RruId};

/// Length of the block used to measure the impairment residual.
pub const REFERENCE_BLOCK_LEN: usize = 10_000;
const REFERENCE_SEED: u64 = 0x5eed_f1a9_e5ee_d001;
const SIGNATURE_DIMS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerprintProfile {
    pub rru_id: RruId,
    /// I-branch gain relative to the Q branch (nominal 1).
    pub iq_gain_imbalance: f64,
    /// Quadrature skew of the Q branch, rad (nominal 0).
    pub iq_phase_imbalance: f64,
    /// Hz (nominal 0).
    pub carrier_freq_offset: f64,
    /// Linear PA gain (nominal 1).
    pub pa_a1: Complex64,
    /// Cubic PA coefficient (nominal 0).
    pub pa_a3: Complex64,
    /// Phase random-walk step std, rad/sample (nominal 0).
    pub phase_noise_std: f64,
    /// Normalized draw the physical parameters were scaled from.
    #[serde(default)]
    pub signature: Vec<f64>,
}

impl FingerprintProfile {
    pub fn identity(rru_id: RruId) -> Self {
        Self {
            rru_id,
            iq_gain_imbalance: 1.0,
            iq_phase_imbalance: 0.0,
            carrier_freq_offset: 0.0,
            pa_a1: Complex64::new(1.0, 0.0),
            pa_a3: Complex64::new(0.0, 0.0),
            phase_noise_std: 0.0,
            signature: vec![0.0; SIGNATURE_DIMS],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.iq_gain_imbalance == 1.0
            && self.iq_phase_imbalance == 0.0
            && self.carrier_freq_offset == 0.0
            && self.pa_a1 == Complex64::new(1.0, 0.0)
            && self.pa_a3 == Complex64::new(0.0, 0.0)
            && self.phase_noise_std == 0.0
    }

    /// Euclidean distance between normalized signatures.
    pub fn separation(&self, other: &FingerprintProfile) -> f64 {
        self.signature
            .iter()
            .zip(&other.signature)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Per-impairment spread at unit normalized draw. Zero disables an impairment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImpairmentMenu {
    pub iq_gain: f64,
    pub iq_phase: f64,
    pub cfo_hz: f64,
    pub pa_cubic: f64,
    pub phase_noise: f64,
}

impl Default for ImpairmentMenu {
    /// Spreads chosen so each impairment contributes a residual of similar
    /// order on the reference block at `T_x = 1 us`.
    fn default() -> Self {
        Self { iq_gain: 0.1, iq_phase: 0.1, cfo_hz: 2.0, pa_cubic: 0.07, phase_noise: 1e-3 }
    }
}

impl ImpairmentMenu {
    fn realize(&self, rru_id: RruId, signature: &[f64], k: f64) -> FingerprintProfile {
        FingerprintProfile {
            rru_id,
            iq_gain_imbalance: 1.0 + k * self.iq_gain * signature[0],
            iq_phase_imbalance: k * self.iq_phase * signature[1],
            carrier_freq_offset: k * self.cfo_hz * signature[2],
            pa_a1: Complex64::new(1.0, 0.0),
            pa_a3: Complex64::new(signature[3], signature[4]) * (k * self.pa_cubic),
            phase_noise_std: k * self.phase_noise * signature[5],
            signature: signature.to_vec(),
        }
    }
}

/// Apply the impairment chain to `waveform`. Phase noise draws come from `rng`;
/// with `phase_noise_std == 0` the generator is not touched.
pub fn apply_fingerprint<R: Rng + ?Sized>(
    waveform: &[Complex64],
    profile: &FingerprintProfile,
    sample_interval: f64,
    rng: &mut R,
) -> Vec<Complex64> {
    let mut out = waveform.to_vec();
    if profile.iq_gain_imbalance != 1.0 || profile.iq_phase_imbalance != 0.0 {
        let q_rot = Complex64::from_polar(1.0, profile.iq_phase_imbalance);
        for v in out.iter_mut() {
            *v = Complex64::new(profile.iq_gain_imbalance * v.re, 0.0) + Complex64::i() * q_rot * v.im;
        }
    }
    if profile.carrier_freq_offset != 0.0 {
        let step = profile.carrier_freq_offset * sample_interval;
        for (n, v) in out.iter_mut().enumerate() {
            *v *= Complex64::from_polar(1.0, TAU * (step * n as f64).fract());
        }
    }
    if profile.pa_a1 != Complex64::new(1.0, 0.0) || profile.pa_a3 != Complex64::new(0.0, 0.0) {
        for v in out.iter_mut() {
            *v = profile.pa_a1 * *v + profile.pa_a3 * *v * v.norm_sqr();
        }
    }
    if profile.phase_noise_std > 0.0 {
        let step = Normal::new(0.0, profile.phase_noise_std).expect("finite phase noise std");
        let mut phase = 0.0;
        for v in out.iter_mut() {
            phase += step.sample(rng);
            *v *= Complex64::from_polar(1.0, phase);
        }
    }
    out
}

/// Mean residual power `|f(x) - x|^2` of `profile` on the fixed reference block.
pub fn residual_power(profile: &FingerprintProfile, sample_interval: f64) -> f64 {
    let mut rng = rng_for(REFERENCE_SEED, &[stream::PAYLOAD]);
    let reference = qpsk_symbols(REFERENCE_BLOCK_LEN, &mut rng);
    let mut pn_rng = rng_for(REFERENCE_SEED, &[stream::PHASE_NOISE]);
    let impaired = apply_fingerprint(&reference, profile, sample_interval, &mut pn_rng);
    impaired
        .iter()
        .zip(&reference)
        .map(|(a, b)| (a - b).norm_sqr())
        .sum::<f64>()
        / REFERENCE_BLOCK_LEN as f64
}

fn draw_signature<R: Rng + ?Sized>(rng: &mut R) -> Vec<f64> {
    let mut s: Vec<f64> = (0..SIGNATURE_DIMS).map(|_| rng.random_range(-1.0..=1.0)).collect();
    s[5] = s[5].abs();
    s
}

fn calibrate(
    rru_id: RruId,
    signature: &[f64],
    target: f64,
    menu: &ImpairmentMenu,
    sample_interval: f64,
) -> Result<FingerprintProfile> {
    let mut k = 1.0;
    for _ in 0..40 {
        let profile = menu.realize(rru_id, signature, k);
        let measured = residual_power(&profile, sample_interval);
        if measured <= 0.0 {
            return Err(Error::InvalidConfig("impairment menu produces no residual".into()));
        }
        let ratio = target / measured;
        if (ratio - 1.0).abs() < 1e-3 {
            return Ok(profile);
        }
        // Residual is close to quadratic in k for small impairments.
        k *= ratio.sqrt();
    }
    // Strong nonlinearity can make the fixed-point step oscillate; fall back
    // to bisection in log k on a bracketing interval.
    let excess = |k: f64| residual_power(&menu.realize(rru_id, signature, k), sample_interval) - target;
    let (mut lo, mut hi) = (1.0f64, 1.0f64);
    for _ in 0..60 {
        if excess(lo) < 0.0 {
            break;
        }
        lo /= 2.0;
    }
    for _ in 0..60 {
        if excess(hi) > 0.0 {
            break;
        }
        hi *= 2.0;
    }
    if !(excess(lo) < 0.0 && excess(hi) > 0.0) {
        return Err(Error::InvalidConfig(format!("fingerprint calibration for RRU {rru_id} cannot reach the target residual")));
    }
    for _ in 0..100 {
        let mid = (lo * hi).sqrt();
        let e = excess(mid);
        if (e / target).abs() < 1e-3 {
            return Ok(menu.realize(rru_id, signature, mid));
        }
        if e < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::InvalidConfig(format!("fingerprint calibration for RRU {rru_id} did not converge")))
}

/// Draw a profile whose reference-block residual power equals
/// `impairment_scale * reference_noise_power`.
///
/// `reference_noise_power` is the noise power relative to a unit-power signal.
/// A scale of zero gives the identity profile.
pub fn sample_profile(
    rru_id: RruId,
    impairment_scale: f64,
    reference_noise_power: f64,
    menu: &ImpairmentMenu,
    sample_interval: f64,
    seed: u64,
) -> Result<FingerprintProfile> {
    if !(impairment_scale >= 0.0) || !(reference_noise_power >= 0.0) {
        return Err(Error::InvalidConfig("impairment scale and noise power must be nonnegative".into()));
    }
    if impairment_scale == 0.0 || reference_noise_power == 0.0 {
        return Ok(FingerprintProfile::identity(rru_id));
    }
    let mut rng = rng_for(seed, &[stream::FINGERPRINT, rru_id as u64]);
    let signature = draw_signature(&mut rng);
    calibrate(rru_id, &signature, impairment_scale * reference_noise_power, menu, sample_interval)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryConfig {
    pub impairment_scale: f64,
    pub reference_noise_power: f64,
    pub menu: ImpairmentMenu,
    /// Minimum signature distance between any two profiles.
    pub separation_threshold: f64,
}

impl Default for LibraryConfig {
    fn default() -> Self {
        Self {
            impairment_scale: 0.4,
            reference_noise_power: 0.1,
            menu: ImpairmentMenu::default(),
            separation_threshold: 0.5,
        }
    }
}

/// One profile per transmitting RRU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerprintLibrary {
    pub profiles: BTreeMap<RruId, FingerprintProfile>,
}

impl FingerprintLibrary {
    pub fn identity(ids: &[RruId]) -> Self {
        Self { profiles: ids.iter().map(|&id| (id, FingerprintProfile::identity(id))).collect() }
    }

    /// Sample profiles for `ids`, redrawing any signature closer than the
    /// separation threshold to an already accepted one.
    pub fn build(ids: &[RruId], config: &LibraryConfig, sample_interval: f64, seed: u64) -> Result<Self> {
        if config.impairment_scale == 0.0 || config.reference_noise_power == 0.0 {
            return Ok(Self::identity(ids));
        }
        let target = config.impairment_scale * config.reference_noise_power;
        let mut profiles: BTreeMap<RruId, FingerprintProfile> = BTreeMap::new();
        for &id in ids {
            let mut rng = rng_for(seed, &[stream::FINGERPRINT, id as u64]);
            let signature = (0..1000)
                .map(|_| draw_signature(&mut rng))
                .find(|s| {
                    profiles.values().all(|p| {
                        let d: f64 = p.signature.iter().zip(s).map(|(a, b)| (a - b).powi(2)).sum();
                        d.sqrt() >= config.separation_threshold
                    })
                })
                .ok_or_else(|| Error::InvalidConfig("cannot satisfy fingerprint separation threshold".into()))?;
            profiles.insert(id, calibrate(id, &signature, target, &config.menu, sample_interval)?);
        }
        Ok(Self { profiles })
    }

    pub fn get(&self, id: RruId) -> Result<&FingerprintProfile> {
        self.profiles.get(&id).ok_or(Error::UnknownRru(id))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TX: f64 = 1e-6;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    #[test]
    fn identity_is_bit_exact() {
        let x = qpsk_symbols(257, &mut rng());
        let p = FingerprintProfile::identity(3);
        assert_eq!(apply_fingerprint(&x, &p, TX, &mut rng()), x);
        let zero = sample_profile(3, 0.0, 0.1, &ImpairmentMenu::default(), TX, 9).unwrap();
        assert!(zero.is_identity());
        assert_eq!(apply_fingerprint(&x, &zero, TX, &mut rng()), x);
    }

    #[test]
    fn iq_gain_scales_real_branch_only() {
        let p = FingerprintProfile { iq_gain_imbalance: 1.1, ..FingerprintProfile::identity(0) };
        let y = apply_fingerprint(&[Complex64::new(1.0, 0.0); 2], &p, TX, &mut rng());
        for v in y {
            assert!((v - Complex64::new(1.1, 0.0)).norm() < 1e-15);
        }
        let y = apply_fingerprint(&[Complex64::new(0.0, 1.0)], &p, TX, &mut rng());
        assert!((y[0] - Complex64::new(0.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn cubic_pa_compresses_unit_modulus_input() {
        let p = FingerprintProfile { pa_a3: Complex64::new(-0.1, 0.0), ..FingerprintProfile::identity(0) };
        let x: Vec<Complex64> = (0..16).map(|k| Complex64::from_polar(1.0, 0.4 * k as f64)).collect();
        for v in apply_fingerprint(&x, &p, TX, &mut rng()) {
            assert!((v.norm() - 0.9).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_without_phase_noise() {
        let mut p = sample_profile(1, 0.4, 0.1, &ImpairmentMenu::default(), TX, 4).unwrap();
        p.phase_noise_std = 0.0;
        let x = qpsk_symbols(100, &mut rng());
        let a = apply_fingerprint(&x, &p, TX, &mut ChaCha8Rng::seed_from_u64(1));
        let b = apply_fingerprint(&x, &p, TX, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(a, b);
        assert_eq!(a.len(), x.len());
    }

    #[test]
    fn calibrated_residual_tracks_noise_ratio() {
        let noise = 0.05;
        for &(scale, lo, hi) in &[(0.3, 0.285, 0.315), (0.4, 0.38, 0.42)] {
            for seed in 0..5 {
                let p = sample_profile(seed as RruId, scale, noise, &ImpairmentMenu::default(), TX, seed).unwrap();
                let ratio = residual_power(&p, TX) / noise;
                assert!((lo..=hi).contains(&ratio), "scale {scale} seed {seed}: ratio {ratio}");
            }
        }
    }

    /// Real 2x2 map `[I, Q]_out = M [I, Q]_in` fitted by least squares against the payload.
    fn iq_map(x: &[Complex64], y: &[Complex64]) -> [f64; 4] {
        let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
        let mut c = [0.0; 4];
        for (a, b) in x.iter().zip(y) {
            sxx += a.re * a.re;
            sxy += a.re * a.im;
            syy += a.im * a.im;
            c[0] += b.re * a.re;
            c[1] += b.re * a.im;
            c[2] += b.im * a.re;
            c[3] += b.im * a.im;
        }
        let det = sxx * syy - sxy * sxy;
        let inv = [syy / det, -sxy / det, -sxy / det, sxx / det];
        [
            c[0] * inv[0] + c[1] * inv[2],
            c[0] * inv[1] + c[1] * inv[3],
            c[2] * inv[0] + c[3] * inv[2],
            c[2] * inv[1] + c[3] * inv[3],
        ]
    }

    #[test]
    fn signature_is_independent_of_payload() {
        let mut p = sample_profile(2, 0.4, 0.1, &ImpairmentMenu::default(), TX, 17).unwrap();
        p.carrier_freq_offset = 0.0;
        p.phase_noise_std = 0.0;
        let mut r = rng();
        let x1 = qpsk_symbols(10_000, &mut r);
        let x2 = qpsk_symbols(10_000, &mut r);
        let m1 = iq_map(&x1, &apply_fingerprint(&x1, &p, TX, &mut r));
        let m2 = iq_map(&x2, &apply_fingerprint(&x2, &p, TX, &mut r));
        let norm = m1.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff = m1.iter().zip(&m2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(diff / norm < 0.02, "{m1:?} vs {m2:?}");
    }

    #[test]
    fn library_profiles_are_separated_and_serializable() {
        let ids: Vec<RruId> = (0..8).collect();
        let cfg = LibraryConfig { impairment_scale: 0.3, ..LibraryConfig::default() };
        let lib = FingerprintLibrary::build(&ids, &cfg, TX, 5).unwrap();
        assert_eq!(lib.profiles.len(), 8);
        let ps: Vec<_> = lib.profiles.values().collect();
        for (i, a) in ps.iter().enumerate() {
            for b in &ps[i + 1..] {
                assert!(a.separation(b) >= 0.5);
            }
        }
        let back = FingerprintLibrary::from_json(&lib.to_json().unwrap()).unwrap();
        assert_eq!(back, lib);
        assert!(matches!(lib.get(99), Err(Error::UnknownRru(99))));
    }

    #[test]
    fn negative_scale_rejected() {
        assert!(sample_profile(0, -0.1, 0.1, &ImpairmentMenu::default(), TX, 0).is_err());
    }
}
