//! Reflector localization from extracted (delay, azimuth, elevation).
//!
//! For a path from source `p_d` to sink `p_u` with total length `R` the
//! reflector lies on the ellipsoid `|p_d - p| + |p - p_u| = R` and on the ray
//! from `p_u` along the arrival direction `dir`. Writing `p = p_u + s dir`
//! and `D = p_d - p_u`, the ellipsoid condition reduces to
//!
//! ```text
//! s = (R^2 - |D|^2) / (2 R - 2 D.dir)
//! ```
//!
//! which is the exact zero of the ellipsoid residual along the ray, so no
//! iterative search is needed. Feasibility requires `R > |D|` (echo longer
//! than the direct path), which makes the denominator positive as well.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geometry::{Position3D, Volume};
use crate::scenario::{Reflector, Scenario};
use crate::sensing::ExtractedParams;
use crate::{Error, Result, RruId};

pub type RruPositions = BTreeMap<RruId, Position3D>;

pub fn rru_positions(scenario: &Scenario) -> RruPositions {
    scenario.rrus.iter().map(|r| (r.id, r.position)).collect()
}

fn position(positions: &RruPositions, id: RruId) -> Result<Position3D> {
    positions.get(&id).copied().ok_or(Error::UnknownRru(id))
}

/// Extracted parameters attributed to a claimed source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionHypothesis {
    pub params: ExtractedParams,
    pub claimed_source: RruId,
    pub sink: RruId,
}

/// `true` iff `| |p_d - p_u| - v_c tau0 | < eps_r` for the claimed source.
pub fn validate_los(hyp: &DetectionHypothesis, positions: &RruPositions, eps_r: f64) -> Result<bool> {
    let p_d = position(positions, hyp.claimed_source)?;
    let p_u = position(positions, hyp.sink)?;
    Ok((p_d.distance(&p_u) - hyp.params.range()).abs() < eps_r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rejection {
    /// Echo not longer than the direct path, or the ray points away from the ellipsoid.
    Infeasible,
    OutOfRange,
    OutsideVolume,
    /// Range error would be amplified beyond the configured limit.
    Dilution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectorEstimate {
    pub position: Position3D,
    /// `| |p_d - p| + |p - p_u| - R |`, m.
    pub residual: f64,
    /// Sensitivity `ds/dR` of the solution to a path-length error.
    pub range_dilution: f64,
    pub hypothesis: DetectionHypothesis,
    pub accepted: bool,
    pub rejection: Option<Rejection>,
}

impl ReflectorEstimate {
    pub fn range_from_sink(&self, positions: &RruPositions) -> Result<f64> {
        Ok(position(positions, self.hypothesis.sink)?.distance(&self.position))
    }
}

fn ellipsoid_residual(p: Position3D, p_d: Position3D, p_u: Position3D, range: f64) -> f64 {
    (p_d.distance(&p) + p.distance(&p_u) - range).abs()
}

/// Closed-form ray/ellipsoid intersection for an NLOS hypothesis.
pub fn solve_reflector(hyp: &DetectionHypothesis, positions: &RruPositions, v_c: f64) -> Result<ReflectorEstimate> {
    let p_d = position(positions, hyp.claimed_source)?;
    let p_u = position(positions, hyp.sink)?;
    let dir = Position3D::from_angles(hyp.params.phi0, hyp.params.theta0);
    let delta = p_d - p_u;
    let range = v_c * hyp.params.tau0;
    let along = delta.dot(&dir);
    let denom = 2.0 * (range - along);
    let numer = range * range - delta.dot(&delta);
    if !(denom > 0.0) || !(numer > 0.0) {
        return Ok(ReflectorEstimate {
            position: p_u,
            residual: ellipsoid_residual(p_u, p_d, p_u, range),
            range_dilution: f64::INFINITY,
            hypothesis: hyp.clone(),
            accepted: false,
            rejection: Some(Rejection::Infeasible),
        });
    }
    let s = numer / denom;
    let p = p_u + dir * s;
    // ds/dR = |p_d - p| / (R - D.dir)
    let range_dilution = (range - s) / (range - along);
    Ok(ReflectorEstimate {
        position: p,
        residual: ellipsoid_residual(p, p_d, p_u, range),
        range_dilution,
        hypothesis: hyp.clone(),
        accepted: true,
        rejection: None,
    })
}

/// Golden-section search for the ray distance `s in (0, s_max]` minimizing
/// the ellipsoid residual. Agrees with [`solve_reflector`] wherever the
/// latter is feasible.
pub fn solve_reflector_line_search(
    hyp: &DetectionHypothesis,
    positions: &RruPositions,
    v_c: f64,
    s_max: f64,
    tolerance: f64,
) -> Result<ReflectorEstimate> {
    let p_d = position(positions, hyp.claimed_source)?;
    let p_u = position(positions, hyp.sink)?;
    let dir = Position3D::from_angles(hyp.params.phi0, hyp.params.theta0);
    let range = v_c * hyp.params.tau0;
    let f = |s: f64| ellipsoid_residual(p_u + dir * s, p_d, p_u, range);
    // The path length along the ray is convex in s, so |length - R| is unimodal.
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (0.0, s_max);
    while b - a > tolerance {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if f(c) <= f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    let s = 0.5 * (a + b);
    let p = p_u + dir * s;
    let residual = f(s);
    let feasible = s > tolerance && residual <= tolerance.max(1e-9 * range);
    Ok(ReflectorEstimate {
        position: p,
        residual,
        range_dilution: (range - s) / (range - (p_d - p_u).dot(&dir)),
        hypothesis: hyp.clone(),
        accepted: feasible,
        rejection: if feasible { None } else { Some(Rejection::Infeasible) },
    })
}

/// Plausibility gates applied to solved estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutlierGate {
    /// Maximum distance between estimate and its sink, m.
    pub max_range: f64,
    /// The volume is inflated by this fraction of each extent before the containment check.
    pub volume_margin: f64,
    /// Upper bound on `ds/dR`; geometries near the direct path amplify range
    /// errors without bound.
    pub max_range_dilution: Option<f64>,
}

impl Default for OutlierGate {
    fn default() -> Self {
        Self { max_range: 300.0, volume_margin: 0.1, max_range_dilution: None }
    }
}

/// Keep accepted estimates that pass every gate.
pub fn reject_outliers(
    estimates: Vec<ReflectorEstimate>,
    positions: &RruPositions,
    volume: &Volume,
    gate: &OutlierGate,
) -> Result<Vec<ReflectorEstimate>> {
    Ok(partition_outliers(estimates, positions, volume, gate)?.0)
}

/// Split into `(kept, rejected)`; rejected estimates carry their reason.
pub fn partition_outliers(
    estimates: Vec<ReflectorEstimate>,
    positions: &RruPositions,
    volume: &Volume,
    gate: &OutlierGate,
) -> Result<(Vec<ReflectorEstimate>, Vec<ReflectorEstimate>)> {
    let mut kept = Vec::with_capacity(estimates.len());
    let mut rejected = Vec::new();
    for mut e in estimates {
        let reason = if !e.accepted {
            e.rejection.or(Some(Rejection::Infeasible))
        } else if e.range_from_sink(positions)? > gate.max_range {
            Some(Rejection::OutOfRange)
        } else if !volume.contains_inflated(&e.position, gate.volume_margin) {
            Some(Rejection::OutsideVolume)
        } else if gate.max_range_dilution.is_some_and(|m| e.range_dilution > m) {
            Some(Rejection::Dilution)
        } else {
            None
        };
        match reason {
            None => kept.push(e),
            Some(r) => {
                e.accepted = false;
                e.rejection = Some(r);
                rejected.push(e);
            }
        }
    }
    Ok((kept, rejected))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedReflector {
    /// Arithmetic mean of the member positions.
    pub mean: Position3D,
    pub members: Vec<ReflectorEstimate>,
    /// RMS distance of the members from the mean, m.
    pub spread: f64,
    pub perception_error: Option<f64>,
    pub matched_reflector: Option<u32>,
}

impl FusedReflector {
    pub fn count(&self) -> usize {
        self.members.len()
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Single-linkage clustering of estimate positions. Clusters come out in
/// order of their first member.
pub fn fuse_detections(estimates: &[ReflectorEstimate], cluster_radius: f64) -> Vec<FusedReflector> {
    let n = estimates.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            if estimates[i].position.distance(&estimates[j].position) <= cluster_radius {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    groups
        .into_values()
        .map(|idx| {
            let members: Vec<ReflectorEstimate> = idx.iter().map(|&i| estimates[i].clone()).collect();
            let points: Vec<Position3D> = members.iter().map(|m| m.position).collect();
            let mean = Position3D::mean(&points).expect("cluster is nonempty");
            let spread = (points.iter().map(|p| p.distance(&mean).powi(2)).sum::<f64>() / points.len() as f64).sqrt();
            FusedReflector { mean, members, spread, perception_error: None, matched_reflector: None }
        })
        .collect()
}

/// `|mean - truth|`, m.
pub fn perception_error(fused: &FusedReflector, truth: &Reflector) -> f64 {
    fused.mean.distance(&truth.position)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    /// `(reflector id, cluster index, perception error)`.
    pub matched: Vec<(u32, usize, f64)>,
    pub missed: Vec<u32>,
    pub false_alarms: Vec<usize>,
}

/// One-to-one greedy nearest-neighbour matching within `gate` meters.
/// Fills `perception_error` and `matched_reflector` of matched clusters.
pub fn match_reflectors(fused: &mut [FusedReflector], truths: &[&Reflector], gate: f64) -> MatchReport {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (t, truth) in truths.iter().enumerate() {
        for (c, cluster) in fused.iter().enumerate() {
            let d = perception_error(cluster, truth);
            if d <= gate {
                pairs.push((d, t, c));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut truth_used = vec![false; truths.len()];
    let mut cluster_used = vec![false; fused.len()];
    let mut report = MatchReport::default();
    for (d, t, c) in pairs {
        if truth_used[t] || cluster_used[c] {
            continue;
        }
        truth_used[t] = true;
        cluster_used[c] = true;
        fused[c].perception_error = Some(d);
        fused[c].matched_reflector = Some(truths[t].id);
        report.matched.push((truths[t].id, c, d));
    }
    report.matched.sort_by_key(|m| m.0);
    report.missed = truths.iter().zip(&truth_used).filter(|(_, u)| !**u).map(|(t, _)| t.id).collect();
    report.false_alarms = (0..fused.len()).filter(|c| !cluster_used[*c]).collect();
    report
}

#[derive(Serialize)]
struct FusedRow {
    x: f64,
    y: f64,
    z: f64,
    #[serde(rename = "P")]
    count: usize,
    spread: f64,
    eps_p: Option<f64>,
}

/// CSV with header `x,y,z,P,spread,eps_p`; `eps_p` is empty for unmatched clusters.
pub fn write_fused_csv(path: &Path, fused: &[FusedReflector]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for f in fused {
        w.serialize(FusedRow {
            x: f.mean.x,
            y: f.mean.y,
            z: f.mean.z,
            count: f.count(),
            spread: f.spread,
            eps_p: f.perception_error,
        })?;
    }
    w.flush()?;
    Ok(())
}
