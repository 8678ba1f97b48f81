//! Geometric multipath channel between RRUs.
//!
//! Each downlink→uplink pair has one LOS path plus one single-bounce NLOS path
//! per reflector. A path contributes
//!
//! ```text
//! h_l(n) = alpha * exp(-j 2pi f0 tau) * exp(j 2pi T_x nu n) * a(phi, theta)
//! ```
//!
//! at sample `n`, where `a` is the receive steering vector of the sink array.
//! The stacked per-RRU form (gains x steering x delay x Doppler) is never
//! materialized; it is exactly the sum of these per-path terms.

use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::geometry::Position3D;
use crate::matrix::ComplexMatrix;
use crate::scenario::{Reflector, Scenario, UeNode};
use crate::{Error, Result, RruId, SPEED_OF_LIGHT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathKind {
    Los,
    Nlos,
}

/// One propagation path `(alpha, tau, nu, phi, theta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathParams {
    /// Complex fading coefficient.
    pub alpha: Complex64,
    /// Propagation delay, s.
    pub tau: f64,
    /// Doppler shift, Hz.
    pub nu: f64,
    /// Azimuth of arrival at the sink, rad.
    pub phi: f64,
    /// Elevation of arrival at the sink, rad.
    pub theta: f64,
    pub kind: PathKind,
    pub reflector_id: Option<u32>,
    /// Transmitting RRU (or UE id for uplink user links).
    pub source_rru: RruId,
    pub sink_rru: RruId,
}

impl PathParams {
    /// Range-equivalent path length `v_c * tau`, m.
    pub fn path_length(&self) -> f64 {
        SPEED_OF_LIGHT * self.tau
    }
}

/// Receive array response, one unit-modulus entry per antenna.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVector(pub Vec<Complex64>);

impl SteeringVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.0
    }
}

/// Uniform planar array, half-wavelength spacing.
///
/// Element `(m, n)` sits at flat index `m * cols + n` and equals
/// `exp(j pi (m sin(theta) cos(phi) + n sin(theta) sin(phi)))`.
pub fn steering_vector(phi: f64, theta: f64, rows: usize, cols: usize) -> SteeringVector {
    let u = theta.sin() * phi.cos();
    let v = theta.sin() * phi.sin();
    let mut out = Vec::with_capacity(rows * cols);
    for m in 0..rows {
        for n in 0..cols {
            out.push(Complex64::from_polar(1.0, PI * (m as f64 * u + n as f64 * v)));
        }
    }
    SteeringVector(out)
}

/// Free-space amplitude `lambda / (4 pi r)`.
fn free_space_amplitude(wavelength: f64, length: f64) -> f64 {
    wavelength / (4.0 * PI * length)
}

/// Bistatic Doppler of a reflector moving with `velocity`.
///
/// `nu = -(f0 / v_c) dL/dt` with `L = |p_r - p_d| + |p_r - p_u|`, so that the
/// per-sample phasor `exp(j 2pi T_x nu n)` tracks the delay phase
/// `exp(-j 2pi f0 tau(t))` of a path whose length changes over time.
pub fn bistatic_doppler(f0: f64, source: Position3D, sink: Position3D, reflector: Position3D, velocity: Position3D) -> f64 {
    let to_r_from_d = (reflector - source).normalized().unwrap_or(Position3D::ORIGIN);
    let to_r_from_u = (reflector - sink).normalized().unwrap_or(Position3D::ORIGIN);
    let range_rate = velocity.dot(&(to_r_from_d + to_r_from_u));
    -f0 / SPEED_OF_LIGHT * range_rate
}

fn nlos_path(scenario: &Scenario, d: RruId, u: RruId, p_d: Position3D, p_u: Position3D, refl: &Reflector) -> PathParams {
    let r1 = p_d.distance(&refl.position);
    let r2 = refl.position.distance(&p_u);
    let length = r1 + r2;
    let arrival = refl.position - p_u;
    PathParams {
        alpha: refl.reflection_gain * free_space_amplitude(scenario.wavelength(), length),
        tau: length / SPEED_OF_LIGHT,
        nu: bistatic_doppler(scenario.carrier_frequency, p_d, p_u, refl.position, refl.velocity),
        phi: arrival.azimuth(),
        theta: arrival.elevation(),
        kind: PathKind::Nlos,
        reflector_id: Some(refl.id),
        source_rru: d,
        sink_rru: u,
    }
}

/// Ground-truth paths from RRU `d` to RRU `u`: LOS first, then one NLOS path
/// per reflector in scenario order. Every reflector is visible to every pair.
pub fn compute_paths(scenario: &Scenario, d: RruId, u: RruId) -> Result<Vec<PathParams>> {
    if d == u {
        return Err(Error::InvalidConfig(format!("source and sink are the same RRU {d}")));
    }
    let p_d = scenario.position_of(d)?;
    let p_u = scenario.position_of(u)?;
    let los_len = p_d.distance(&p_u);
    let arrival = p_d - p_u;
    let mut paths = Vec::with_capacity(1 + scenario.reflectors.len());
    paths.push(PathParams {
        alpha: Complex64::new(free_space_amplitude(scenario.wavelength(), los_len), 0.0),
        tau: los_len / SPEED_OF_LIGHT,
        nu: 0.0,
        phi: arrival.azimuth(),
        theta: arrival.elevation(),
        kind: PathKind::Los,
        reflector_id: None,
        source_rru: d,
        sink_rru: u,
    });
    paths.extend(scenario.reflectors.iter().map(|r| nlos_path(scenario, d, u, p_d, p_u, r)));
    Ok(paths)
}

/// Direct path from a single-antenna UE to uplink RRU `u`. The UE id is
/// stored in `source_rru`.
pub fn ue_path(scenario: &Scenario, ue: &UeNode, u: RruId) -> Result<PathParams> {
    let p_u = scenario.position_of(u)?;
    let len = ue.position.distance(&p_u);
    let arrival = ue.position - p_u;
    Ok(PathParams {
        alpha: Complex64::new(free_space_amplitude(scenario.wavelength(), len), 0.0),
        tau: len / SPEED_OF_LIGHT,
        nu: 0.0,
        phi: arrival.azimuth(),
        theta: arrival.elevation(),
        kind: PathKind::Los,
        reflector_id: None,
        source_rru: ue.id,
        sink_rru: u,
    })
}

/// Scalar gain of one path at sample `n` (everything but the steering vector).
pub fn path_gain(path: &PathParams, f0: f64, sample_interval: f64, n: usize) -> Complex64 {
    // Reduce to the fractional cycle count before scaling by 2pi.
    let delay_cycles = (f0 * path.tau).fract();
    let doppler_cycles = (sample_interval * path.nu * n as f64).fract();
    path.alpha * Complex64::from_polar(1.0, TAU * (doppler_cycles - delay_cycles))
}

/// Channel vector `sum_l h_l(n)` over `paths` at `sample_index`, length `rows * cols`.
pub fn channel_matrix(
    paths: &[PathParams],
    rows: usize,
    cols: usize,
    f0: f64,
    sample_interval: f64,
    sample_index: usize,
) -> Result<Vec<Complex64>> {
    if paths.is_empty() {
        return Err(Error::EmptyInput("channel_matrix needs at least one path"));
    }
    let mut h = vec![Complex64::new(0.0, 0.0); rows * cols];
    for p in paths {
        let g = path_gain(p, f0, sample_interval, sample_index);
        for (acc, a) in h.iter_mut().zip(steering_vector(p.phi, p.theta, rows, cols).0) {
            *acc += g * a;
        }
    }
    Ok(h)
}

/// Received contribution of `waveform` through one path: antennas x samples.
pub fn propagate(path: &PathParams, rows: usize, cols: usize, f0: f64, sample_interval: f64, waveform: &[Complex64]) -> ComplexMatrix {
    let a = steering_vector(path.phi, path.theta, rows, cols);
    let scalar: Vec<Complex64> = waveform
        .iter()
        .enumerate()
        .map(|(n, x)| path_gain(path, f0, sample_interval, n) * x)
        .collect();
    ComplexMatrix::outer(a.as_slice(), &scalar)
}

/// Paths of one (source, sink) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairChannel {
    pub source: RruId,
    pub sink: RruId,
    pub paths: Vec<PathParams>,
}

/// All downlink→uplink pairs of a scenario for the current role assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRealization {
    pub pairs: Vec<PairChannel>,
}

impl ChannelRealization {
    pub fn pair(&self, source: RruId, sink: RruId) -> Option<&PairChannel> {
        self.pairs.iter().find(|p| p.source == source && p.sink == sink)
    }

    pub fn into_sink(&self, sink: RruId) -> impl Iterator<Item = &PairChannel> {
        self.pairs.iter().filter(move |p| p.sink == sink)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn realize_channel(scenario: &Scenario) -> Result<ChannelRealization> {
    let mut pairs = Vec::new();
    for u in scenario.uplink_ids() {
        for d in scenario.downlink_ids() {
            pairs.push(PairChannel { source: d, sink: u, paths: compute_paths(scenario, d, u)? });
        }
    }
    Ok(ChannelRealization { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Volume;
    use crate::scenario::{ReflectorKind, Role, RruNode};
    use approx::assert_abs_diff_eq;

    fn two_rru_scenario(p_d: Position3D, p_u: Position3D, reflectors: Vec<Reflector>) -> Scenario {
        let rru = |id, position, role| RruNode { id, position, antenna_rows: 4, antenna_cols: 4, role };
        Scenario {
            volume: Volume::new(3000.0, 3000.0, 60.0),
            rrus: vec![rru(0, p_d, Role::Downlink), rru(1, p_u, Role::Uplink)],
            reflectors,
            ues: vec![],
            carrier_frequency: 3.5e9,
            sample_interval: 1e-6,
            rng_seed: 0,
            slot: 0,
        }
    }

    fn reflector(position: Position3D, velocity: Position3D) -> Reflector {
        Reflector {
            id: 7,
            position,
            velocity,
            kind: if velocity == Position3D::ORIGIN { ReflectorKind::LongStanding } else { ReflectorKind::Mobile },
            reflection_gain: Complex64::new(0.3, 0.1),
        }
    }

    #[test]
    fn los_delay_is_distance_over_speed() {
        let s = two_rru_scenario(Position3D::new(0.0, 0.0, 0.0), Position3D::new(300.0, 0.0, 0.0), vec![]);
        let paths = compute_paths(&s, 0, 1).unwrap();
        assert_eq!(paths.len(), 1);
        assert_abs_diff_eq!(paths[0].tau, 1.0e-6, epsilon = 1e-18);
        assert_eq!(paths[0].kind, PathKind::Los);
        assert!(paths[0].reflector_id.is_none());
    }

    #[test]
    fn nlos_geometry_matches_direct_evaluation() {
        let s = two_rru_scenario(
            Position3D::new(0.0, 0.0, 10.0),
            Position3D::new(1000.0, 0.0, 10.0),
            vec![reflector(Position3D::new(500.0, 200.0, 10.0), Position3D::ORIGIN)],
        );
        let paths = compute_paths(&s, 0, 1).unwrap();
        let nlos = &paths[1];
        // 2 * sqrt(500^2 + 200^2)
        assert_abs_diff_eq!(nlos.path_length(), 1077.0329614269008, epsilon = 1e-9);
        assert_abs_diff_eq!(nlos.tau, 3.590109871423003e-6, epsilon = 1e-15);
        assert_abs_diff_eq!(nlos.phi, 2.761086276477428, epsilon = 1e-12);
        assert_abs_diff_eq!(nlos.theta, 0.0, epsilon = 1e-15);
        assert_eq!(nlos.nu, 0.0);
        assert_eq!(nlos.reflector_id, Some(7));
    }

    #[test]
    fn nlos_is_weaker_than_los() {
        let s = two_rru_scenario(
            Position3D::new(0.0, 0.0, 10.0),
            Position3D::new(1000.0, 0.0, 10.0),
            vec![reflector(Position3D::new(500.0, 200.0, 10.0), Position3D::ORIGIN)],
        );
        let paths = compute_paths(&s, 0, 1).unwrap();
        assert!(paths[1].alpha.norm() < paths[0].alpha.norm());
    }

    #[test]
    fn doppler_matches_numeric_path_length_derivative() {
        let p_d = Position3D::new(0.0, 0.0, 20.0);
        let p_u = Position3D::new(800.0, 100.0, 35.0);
        let p_r = Position3D::new(400.0, 300.0, 5.0);
        let v = Position3D::new(12.0, -20.0, 1.5);
        let f0 = 3.5e9;
        let len = |t: f64| {
            let r = p_r + v * t;
            p_d.distance(&r) + r.distance(&p_u)
        };
        let h = 1e-4;
        let dl_dt = (len(h) - len(-h)) / (2.0 * h);
        let nu = bistatic_doppler(f0, p_d, p_u, p_r, v);
        assert_abs_diff_eq!(nu, -f0 / SPEED_OF_LIGHT * dl_dt, epsilon = 1e-6);
        // Same number seen as the rate of the delay phase in cycles per second.
        let delay_phase = |t: f64| -f0 * len(t) / SPEED_OF_LIGHT;
        assert_abs_diff_eq!(nu, (delay_phase(h) - delay_phase(-h)) / (2.0 * h), epsilon = 1e-3);
    }

    #[test]
    fn steering_examples() {
        let broadside = steering_vector(1.234, 0.0, 4, 4);
        assert_eq!(broadside.len(), 16);
        assert!(broadside.0.iter().all(|v| (v - Complex64::new(1.0, 0.0)).norm() < 1e-15));
        assert_eq!(steering_vector(0.3, 0.7, 1, 1).0, vec![Complex64::new(1.0, 0.0)]);
        let endfire = steering_vector(0.0, std::f64::consts::FRAC_PI_2, 2, 1);
        assert_abs_diff_eq!(endfire.0[0].re, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(endfire.0[1].re, -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(endfire.0[1].im, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn single_unit_los_gives_steering_vector() {
        let path = PathParams {
            alpha: Complex64::new(1.0, 0.0),
            tau: 2.0 / 3.5e9,
            nu: 0.0,
            phi: 0.4,
            theta: 0.0,
            kind: PathKind::Los,
            reflector_id: None,
            source_rru: 0,
            sink_rru: 1,
        };
        let h = channel_matrix(&[path], 4, 4, 3.5e9, 1e-6, 17).unwrap();
        for v in h {
            assert_abs_diff_eq!(v.re, 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(v.im, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn opposite_paths_cancel() {
        let mut a = compute_paths(
            &two_rru_scenario(Position3D::new(0.0, 0.0, 10.0), Position3D::new(700.0, 50.0, 30.0), vec![]),
            0,
            1,
        )
        .unwrap()
        .remove(0);
        a.alpha = Complex64::new(1.0, 0.0);
        let mut b = a.clone();
        b.alpha = Complex64::new(-1.0, 0.0);
        let h = channel_matrix(&[a, b], 3, 2, 3.5e9, 1e-6, 5).unwrap();
        assert!(h.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn empty_path_list_is_rejected() {
        assert!(channel_matrix(&[], 2, 2, 1e9, 1e-6, 0).is_err());
    }

    /// Element-by-element evaluation with real trig, no shared helpers.
    fn reference_channel(paths: &[PathParams], rows: usize, cols: usize, f0: f64, tx: f64, n: usize) -> Vec<(f64, f64)> {
        let mut out = vec![(0.0, 0.0); rows * cols];
        for p in paths {
            for m in 0..rows {
                for k in 0..cols {
                    let phase = -2.0 * PI * f0 * p.tau
                        + 2.0 * PI * tx * p.nu * n as f64
                        + PI * (m as f64 * p.theta.sin() * p.phi.cos() + k as f64 * p.theta.sin() * p.phi.sin());
                    let (s, c) = phase.sin_cos();
                    let e = &mut out[m * cols + k];
                    e.0 += p.alpha.re * c - p.alpha.im * s;
                    e.1 += p.alpha.re * s + p.alpha.im * c;
                }
            }
        }
        out
    }

    #[test]
    fn three_path_channel_matches_term_by_term_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let paths: Vec<PathParams> = (0..3)
                .map(|i| PathParams {
                    alpha: Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                    tau: rng.random_range(1e-7..5e-6),
                    nu: rng.random_range(-500.0..500.0),
                    phi: rng.random_range(-PI..PI),
                    theta: rng.random_range(-1.5..1.5),
                    kind: if i == 0 { PathKind::Los } else { PathKind::Nlos },
                    reflector_id: (i > 0).then_some(i),
                    source_rru: 0,
                    sink_rru: 1,
                })
                .collect();
            let n = rng.random_range(0..2000);
            let h = channel_matrix(&paths, 4, 3, 3.5e9, 1e-6, n).unwrap();
            let oracle = reference_channel(&paths, 4, 3, 3.5e9, 1e-6, n);
            let scale = oracle.iter().map(|(r, i)| r.hypot(*i)).fold(0.0, f64::max);
            for (v, (r, i)) in h.iter().zip(oracle) {
                assert!((v.re - r).hypot(v.im - i) <= 1e-10 * scale.max(1e-300));
            }
        }
    }

    #[test]
    fn propagate_matches_channel_times_waveform() {
        let s = two_rru_scenario(
            Position3D::new(0.0, 0.0, 10.0),
            Position3D::new(900.0, 300.0, 40.0),
            vec![reflector(Position3D::new(450.0, 500.0, 25.0), Position3D::new(10.0, 3.0, 0.0))],
        );
        let paths = compute_paths(&s, 0, 1).unwrap();
        let x: Vec<Complex64> = (0..8).map(|n| Complex64::new(n as f64, 1.0)).collect();
        let y = propagate(&paths[1], 4, 4, s.carrier_frequency, s.sample_interval, &x);
        for n in 0..8 {
            let h = channel_matrix(&paths[1..2], 4, 4, s.carrier_frequency, s.sample_interval, n).unwrap();
            for a in 0..16 {
                assert!((y.get(a, n) - h[a] * x[n]).norm() < 1e-15);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn coord() -> impl Strategy<Value = Position3D> {
            (0.0..3000.0f64, 0.0..3000.0f64, 0.0..60.0f64).prop_map(|(x, y, z)| Position3D::new(x, y, z))
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn steering_entries_are_unit_modulus(phi in -PI..PI, theta in -1.57..1.57f64, m in 1usize..9, n in 1usize..9) {
                let a = steering_vector(phi, theta, m, n);
                prop_assert_eq!(a.len(), m * n);
                for v in a.0 {
                    prop_assert!((v.norm() - 1.0).abs() < 1e-12);
                }
            }

            #[test]
            fn swapping_endpoints_preserves_delay_and_amplitude(p_d in coord(), p_u in coord(), p_r in coord()) {
                prop_assume!(p_d.distance(&p_u) > 1.0);
                let s = two_rru_scenario(p_d, p_u, vec![reflector(p_r, Position3D::ORIGIN)]);
                let fwd = compute_paths(&s, 0, 1).unwrap();
                let rev = compute_paths(&s, 1, 0).unwrap();
                for (a, b) in fwd.iter().zip(&rev) {
                    prop_assert!((a.tau - b.tau).abs() <= 1e-15 * a.tau.max(1e-9));
                    prop_assert!((a.alpha.norm() - b.alpha.norm()).abs() <= 1e-12 * a.alpha.norm());
                }
            }

            #[test]
            fn off_segment_reflector_delays_exceed_los(p_d in coord(), p_u in coord(), p_r in coord()) {
                let seg = p_u - p_d;
                let t = ((p_r - p_d).dot(&seg) / seg.dot(&seg)).clamp(0.0, 1.0);
                prop_assume!(seg.norm() > 1.0 && (p_d + seg * t).distance(&p_r) > 1e-3);
                let s = two_rru_scenario(p_d, p_u, vec![reflector(p_r, Position3D::ORIGIN)]);
                let paths = compute_paths(&s, 0, 1).unwrap();
                prop_assert!(paths[1].tau > paths[0].tau);
            }

            #[test]
            fn channel_is_linear_in_path_lists(seed in any::<u64>(), n in 0usize..500) {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let p_r = Position3D::new(rng.random_range(0.0..3000.0), rng.random_range(0.0..3000.0), 20.0);
                let s = two_rru_scenario(
                    Position3D::new(100.0, 100.0, 10.0),
                    Position3D::new(2000.0, 900.0, 40.0),
                    vec![reflector(p_r, Position3D::new(5.0, 5.0, 0.0))],
                );
                let paths = compute_paths(&s, 0, 1).unwrap();
                let whole = channel_matrix(&paths, 4, 4, s.carrier_frequency, s.sample_interval, n).unwrap();
                let a = channel_matrix(&paths[..1], 4, 4, s.carrier_frequency, s.sample_interval, n).unwrap();
                let b = channel_matrix(&paths[1..], 4, 4, s.carrier_frequency, s.sample_interval, n).unwrap();
                for i in 0..16 {
                    prop_assert!((whole[i] - (a[i] + b[i])).norm() <= 1e-15 * whole[i].norm().max(1e-12));
                }
            }
        }
    }
}
