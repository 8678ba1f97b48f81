//! Per-path separation of the post-cancellation residual and channel
//! parameter extraction with Gaussian error injection.
//!
//! Separation is oracle-assisted: each output is the ground-truth path
//! component, degraded by a leakage mixture of the other paths and by the
//! part of the unexplained residual that falls in the path's spatial
//! signature. Parameter estimates are the true parameters plus zero-mean
//! Gaussian errors whose scale is given in range-equivalent meters.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::channel::{PathKind, PathParams};
use crate::matrix::ComplexMatrix;
use crate::rng::{rng_for, stream};
use crate::signal_chain::{PathComponent, ResidualFrame};
use crate::{Error, Result, RruId, SPEED_OF_LIGHT};

/// One separated path signal `y0_{d,u,l}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparatedPath {
    pub samples: ComplexMatrix,
    /// Ground-truth source. Never shown to the classifier; kept for scoring.
    pub true_source: RruId,
    pub sink: RruId,
    /// Index within the truth list passed to [`separate_paths`].
    pub path_index: usize,
    pub truth: PathParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Separation {
    pub paths: Vec<SeparatedPath>,
    /// `residual - sum(outputs)`: whatever no output claimed.
    pub unassigned: ComplexMatrix,
}

/// Rank-one projector onto the dominant column of `component`, applied to `m`.
fn project_onto_signature(component: &ComplexMatrix, m: &ComplexMatrix) -> ComplexMatrix {
    let (rows, cols) = component.shape();
    let best = (0..cols)
        .map(|n| (n, (0..rows).map(|r| component.get(r, n).norm_sqr()).sum::<f64>()))
        .max_by(|a, b| a.1.total_cmp(&b.1));
    let Some((n, norm2)) = best.filter(|(_, e)| *e > 0.0) else {
        return ComplexMatrix::zeros(rows, cols);
    };
    let u: Vec<Complex64> = (0..rows).map(|r| component.get(r, n)).collect();
    // u (u^H m) / |u|^2, column by column.
    let coeff: Vec<Complex64> = (0..cols)
        .map(|c| (0..rows).map(|r| u[r].conj() * m.get(r, c)).sum::<Complex64>() / norm2)
        .collect();
    ComplexMatrix::outer(&u, &coeff)
}

/// Split `residual` into one signal per ground-truth path in `truth`.
///
/// Output `l` is `c_l + leakage * sum_{k != l} c_k + P_l (residual - sum_k c_k)`
/// where `P_l` projects onto the receive signature of path `l`.
pub fn separate_paths(residual: &ResidualFrame, truth: &[PathComponent], leakage: f64) -> Result<Separation> {
    if !(0.0..1.0).contains(&leakage) {
        return Err(Error::InvalidConfig(format!("leakage {leakage} outside [0, 1)")));
    }
    let (rows, cols) = residual.samples.shape();
    let mut total = ComplexMatrix::zeros(rows, cols);
    for c in truth {
        residual.samples.check_same_shape(&c.samples)?;
        total += &c.samples;
    }
    let unexplained = &residual.samples - &total;
    let mut unassigned = residual.samples.clone();
    let mut paths = Vec::with_capacity(truth.len());
    for (l, c) in truth.iter().enumerate() {
        let mut samples = c.samples.clone();
        if leakage > 0.0 {
            let others = &total - &c.samples;
            samples += &others.scaled(Complex64::new(leakage, 0.0));
        }
        samples += &project_onto_signature(&c.samples, &unexplained);
        unassigned -= &samples;
        paths.push(SeparatedPath {
            samples,
            true_source: c.path.source_rru,
            sink: residual.sink,
            path_index: l,
            truth: c.path.clone(),
        });
    }
    Ok(Separation { paths, unassigned })
}

/// Standard deviations of the injected parameter errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ErrorInjection {
    /// Range-equivalent delay error, m (delay std is `sigma_range / v_c`).
    pub sigma_range: f64,
    /// Applied independently to azimuth and elevation, rad.
    pub sigma_angle: f64,
    pub sigma_doppler: f64,
    pub seed: u64,
    /// NLOS paths that reach a sink via the same reflector share one
    /// angle-of-arrival error, whatever their source.
    pub shared_angle_error: bool,
}

impl Default for ErrorInjection {
    fn default() -> Self {
        Self { sigma_range: 0.0, sigma_angle: 0.0, sigma_doppler: 0.0, seed: 0, shared_angle_error: false }
    }
}

impl ErrorInjection {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if [self.sigma_range, self.sigma_angle, self.sigma_doppler].iter().all(|s| *s >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidConfig("error-injection sigmas must be nonnegative".into()))
        }
    }
}

/// Estimated channel parameters of one path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedParams {
    /// Ground-truth source, for export and scoring only.
    pub source: RruId,
    pub sink: RruId,
    pub path_index: usize,
    pub kind: PathKind,
    pub reflector_id: Option<u32>,
    pub tau0: f64,
    pub phi0: f64,
    pub theta0: f64,
    /// Extracted for completeness; localization uses delay and angles only.
    pub nu0: f64,
    pub alpha0: Complex64,
    pub error_model: ErrorInjection,
}

impl ExtractedParams {
    pub fn range(&self) -> f64 {
        SPEED_OF_LIGHT * self.tau0
    }
}

fn standard_normal(seed: u64, tags: &[u64]) -> f64 {
    StandardNormal.sample(&mut rng_for(seed, tags))
}

/// Perturb `truth` per `inj`. Draws are keyed on the path identity, so the
/// same path gets the same standard-normal draws at every sigma.
pub fn inject(truth: &PathParams, path_index: usize, inj: &ErrorInjection) -> Result<ExtractedParams> {
    inj.validate()?;
    let d = truth.source_rru as u64;
    let u = truth.sink_rru as u64;
    let refl = truth.reflector_id.map_or(0, |r| r as u64 + 1);
    let angle_key = match (truth.kind, inj.shared_angle_error) {
        (PathKind::Nlos, true) => [stream::INJECT_ANGLE, u, refl, u64::MAX],
        _ => [stream::INJECT_ANGLE, u, refl, d],
    };
    let mut out = ExtractedParams {
        source: truth.source_rru,
        sink: truth.sink_rru,
        path_index,
        kind: truth.kind,
        reflector_id: truth.reflector_id,
        tau0: truth.tau,
        phi0: truth.phi,
        theta0: truth.theta,
        nu0: truth.nu,
        alpha0: truth.alpha,
        error_model: inj.clone(),
    };
    if inj.sigma_range > 0.0 {
        out.tau0 += inj.sigma_range / SPEED_OF_LIGHT * standard_normal(inj.seed, &[stream::INJECT_RANGE, u, refl, d]);
    }
    if inj.sigma_angle > 0.0 {
        let mut rng = rng_for(inj.seed, &angle_key);
        let dphi: f64 = StandardNormal.sample(&mut rng);
        let dtheta: f64 = StandardNormal.sample(&mut rng);
        out.phi0 += inj.sigma_angle * dphi;
        out.theta0 += inj.sigma_angle * dtheta;
    }
    if inj.sigma_doppler > 0.0 {
        out.nu0 += inj.sigma_doppler * standard_normal(inj.seed, &[stream::INJECT_DOPPLER, u, refl, d]);
    }
    Ok(out)
}

/// Extract parameters of a separated path. The estimate is the truth plus
/// injected error; the samples only fix the path identity.
pub fn extract_params(path: &SeparatedPath, truth: &PathParams, inj: &ErrorInjection) -> Result<ExtractedParams> {
    if path.sink != truth.sink_rru || path.true_source != truth.source_rru {
        return Err(Error::InvalidConfig(format!(
            "separated path ({}, {}) does not match truth ({}, {})",
            path.true_source, path.sink, truth.source_rru, truth.sink_rru
        )));
    }
    inject(truth, path.path_index, inj)
}

fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

/// Angle error `sqrt(dphi^2 + dtheta^2)`, azimuth difference wrapped to `(-pi, pi]`.
pub fn angle_error(estimate: &ExtractedParams, truth: &PathParams) -> f64 {
    wrap_angle(estimate.phi0 - truth.phi).hypot(estimate.theta0 - truth.theta)
}

#[derive(Serialize)]
struct ParamRow {
    d: RruId,
    u: RruId,
    l: usize,
    tau0: f64,
    phi0: f64,
    theta0: f64,
    nu0: f64,
}

/// CSV with header `d,u,l,tau0,phi0,theta0,nu0`.
pub fn write_params_csv(path: &Path, params: &[ExtractedParams]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in params {
        w.serialize(ParamRow {
            d: p.source,
            u: p.sink,
            l: p.path_index,
            tau0: p.tau0,
            phi0: p.phi0,
            theta0: p.theta0,
            nu0: p.nu0,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal_chain::ComponentLabel;
    use std::collections::BTreeSet;

    fn path(d: RruId, u: RruId, refl: Option<u32>, phi: f64) -> PathParams {
        PathParams {
            alpha: Complex64::new(1e-6, 0.0),
            tau: 3e-6,
            nu: 12.0,
            phi,
            theta: 0.1,
            kind: if refl.is_some() { PathKind::Nlos } else { PathKind::Los },
            reflector_id: refl,
            source_rru: d,
            sink_rru: u,
        }
    }

    fn component(p: PathParams, n: usize) -> PathComponent {
        let a = crate::channel::steering_vector(p.phi, p.theta, 4, 4);
        let x: Vec<Complex64> = (0..n).map(|i| Complex64::from_polar(1.0, 0.3 * i as f64)).collect();
        let samples = crate::channel::propagate(&p, 4, 4, 3.5e9, 1e-6, &x);
        assert_eq!(a.len(), samples.rows());
        PathComponent { path: p, label: ComponentLabel::MobileNlos, samples }
    }

    fn residual(parts: &[&ComplexMatrix]) -> ResidualFrame {
        let mut s = ComplexMatrix::zeros(parts[0].rows(), parts[0].cols());
        for p in parts {
            s += p;
        }
        ResidualFrame { sink: 9, samples: s, components_removed: BTreeSet::new(), suspect: false }
    }

    #[test]
    fn zero_leakage_zero_noise_passes_through() {
        let c1 = component(path(0, 9, Some(0), 0.4), 32);
        let c2 = component(path(1, 9, Some(1), -1.1), 32);
        let res = residual(&[&c1.samples, &c2.samples]);
        let sep = separate_paths(&res, &[c1.clone(), c2.clone()], 0.0).unwrap();
        assert_eq!(sep.paths.len(), 2);
        assert!(sep.paths[0].samples.max_abs_diff(&c1.samples) <= 1e-12 * 1e-6);
        assert!(sep.paths[1].samples.max_abs_diff(&c2.samples) <= 1e-12 * 1e-6);
        assert_eq!(sep.paths[1].true_source, 1);
    }

    #[test]
    fn leakage_mixes_other_paths() {
        let c1 = component(path(0, 9, Some(0), 0.4), 16);
        let c2 = component(path(1, 9, Some(1), -1.1), 16);
        let res = residual(&[&c1.samples, &c2.samples]);
        let sep = separate_paths(&res, &[c1.clone(), c2.clone()], 0.1).unwrap();
        let expected = &c1.samples + &c2.samples.scaled(Complex64::new(0.1, 0.0));
        assert!(sep.paths[0].samples.max_abs_diff(&expected) <= 1e-18);
        assert!(separate_paths(&res, &[c1], 1.0).is_err());
    }

    #[test]
    fn zero_leakage_is_a_partition_with_noise() {
        let c1 = component(path(0, 9, Some(0), 0.4), 16);
        let c2 = component(path(1, 9, Some(1), -1.1), 16);
        let noise = ComplexMatrix::from_fn(16, 16, |r, c| Complex64::new((r as f64).sin(), (c as f64).cos()) * 1e-8);
        let res = residual(&[&c1.samples, &c2.samples, &noise]);
        let sep = separate_paths(&res, &[c1.clone(), c2], 0.0).unwrap();
        let mut acc = sep.unassigned.clone();
        for p in &sep.paths {
            acc += &p.samples;
        }
        assert!(acc.max_abs_diff(&res.samples) <= 1e-20);
        // The noise share lies along the path's own signature.
        let share = &sep.paths[0].samples - &c1.samples;
        let reprojected = project_onto_signature(&c1.samples, &share);
        assert!(reprojected.max_abs_diff(&share) <= 1e-20);
    }

    #[test]
    fn zero_sigma_is_exact() {
        let t = path(2, 7, Some(3), 0.9);
        let e = inject(&t, 0, &ErrorInjection::none()).unwrap();
        assert_eq!((e.tau0, e.phi0, e.theta0, e.nu0), (t.tau, t.phi, t.theta, t.nu));
    }

    #[test]
    fn range_error_has_requested_std() {
        let inj = ErrorInjection { sigma_range: 0.5, ..ErrorInjection::default() };
        let n = 10_000;
        let errs: Vec<f64> = (0..n)
            .map(|i| {
                let inj = ErrorInjection { seed: i, ..inj.clone() };
                let t = path(0, 1, Some(0), 0.0);
                SPEED_OF_LIGHT * (inject(&t, 0, &inj).unwrap().tau0 - t.tau)
            })
            .collect();
        let mean = errs.iter().sum::<f64>() / n as f64;
        let std = (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((0.49..=0.51).contains(&std), "std {std}");
        assert!(mean.abs() < 3.0 * 0.5 / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn angle_error_follows_rayleigh_mean() {
        let sigma = 0.01;
        let n = 10_000;
        let t = path(0, 1, Some(0), 3.1);
        let mean = (0..n)
            .map(|i| {
                let inj = ErrorInjection { sigma_angle: sigma, seed: i, ..ErrorInjection::default() };
                angle_error(&inject(&t, 0, &inj).unwrap(), &t)
            })
            .sum::<f64>()
            / n as f64;
        let expected = sigma * (PI / 2.0).sqrt();
        assert!((mean / expected - 1.0).abs() < 0.03, "mean {mean} vs {expected}");
    }

    #[test]
    fn angle_error_shared_per_sink_and_reflector() {
        let inj = ErrorInjection { sigma_angle: 0.01, sigma_range: 1.0, seed: 3, shared_angle_error: true, ..ErrorInjection::default() };
        let a = inject(&path(0, 5, Some(2), 0.3), 0, &inj).unwrap();
        let b = inject(&path(1, 5, Some(2), 0.3), 0, &inj).unwrap();
        assert_eq!((a.phi0, a.theta0), (b.phi0, b.theta0));
        assert_ne!(a.tau0, b.tau0);
        let unshared = ErrorInjection { shared_angle_error: false, ..inj };
        let c = inject(&path(1, 5, Some(2), 0.3), 0, &unshared).unwrap();
        assert_ne!(a.phi0, c.phi0);
    }

    #[test]
    fn injection_is_deterministic() {
        let inj = ErrorInjection { sigma_range: 0.3, sigma_angle: 0.02, sigma_doppler: 5.0, seed: 77, ..ErrorInjection::default() };
        let t = path(4, 6, Some(1), -0.5);
        assert_eq!(inject(&t, 1, &inj).unwrap(), inject(&t, 1, &inj).unwrap());
        assert!(inject(&t, 1, &ErrorInjection { sigma_range: -1.0, ..inj }).is_err());
    }

    #[test]
    fn extract_rejects_mismatched_truth() {
        let c = component(path(0, 9, Some(0), 0.4), 8);
        let res = residual(&[&c.samples]);
        let sep = separate_paths(&res, &[c], 0.0).unwrap();
        assert!(extract_params(&sep.paths[0], &path(1, 9, Some(0), 0.4), &ErrorInjection::none()).is_err());
        assert!(extract_params(&sep.paths[0], &path(0, 9, Some(0), 0.4), &ErrorInjection::none()).is_ok());
    }

    #[test]
    fn params_csv_has_expected_header() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("params.csv");
        let e = inject(&path(0, 1, Some(0), 0.2), 1, &ErrorInjection::none()).unwrap();
        write_params_csv(&file, &[e]).unwrap();
        let text = std::fs::read_to_string(file).unwrap();
        assert!(text.starts_with("d,u,l,tau0,phi0,theta0,nu0\n0,1,1,"));
    }
}
