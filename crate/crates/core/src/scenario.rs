//! Simulation world: RRU placement, reflectors, UEs and the per-slot
//! uplink/downlink role schedule.
//!
//! Scenarios are immutable values; [`assign_roles`] returns a new scenario
//! for the requested slot. Antenna arrays are modelled as horizontal planar
//! arrays facing the upper hemisphere.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Position3D, Volume};
use crate::rng::{rng_for, stream};
use crate::{Error, Result, RruId, SPEED_OF_LIGHT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Uplink,
    Downlink,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RruNode {
    pub id: RruId,
    pub position: Position3D,
    /// Array rows `M`.
    pub antenna_rows: usize,
    /// Array columns `N`.
    pub antenna_cols: usize,
    pub role: Role,
}

impl RruNode {
    pub fn num_antennas(&self) -> usize {
        self.antenna_rows * self.antenna_cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReflectorKind {
    /// Buildings, parked vehicles: removed as historical clutter.
    LongStanding,
    /// Sensing targets.
    Mobile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reflector {
    pub id: u32,
    pub position: Position3D,
    /// m/s; zero for long-standing reflectors.
    pub velocity: Position3D,
    pub kind: ReflectorKind,
    /// Complex reflection coefficient, magnitude in (0, 1].
    pub reflection_gain: Complex64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UeNode {
    pub id: u32,
    pub position: Position3D,
    pub active: bool,
    /// Watts.
    pub tx_power: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub volume: Volume,
    pub rrus: Vec<RruNode>,
    pub reflectors: Vec<Reflector>,
    pub ues: Vec<UeNode>,
    /// Carrier frequency `f0`, Hz.
    pub carrier_frequency: f64,
    /// Sample interval `T_x`, seconds.
    pub sample_interval: f64,
    pub rng_seed: u64,
    /// Slot the current role assignment belongs to.
    pub slot: u64,
}

impl Scenario {
    pub fn rru(&self, id: RruId) -> Result<&RruNode> {
        self.rrus.iter().find(|r| r.id == id).ok_or(Error::UnknownRru(id))
    }

    pub fn position_of(&self, id: RruId) -> Result<Position3D> {
        self.rru(id).map(|r| r.position)
    }

    pub fn ids_with_role(&self, role: Role) -> Vec<RruId> {
        self.rrus.iter().filter(|r| r.role == role).map(|r| r.id).collect()
    }

    pub fn downlink_ids(&self) -> Vec<RruId> {
        self.ids_with_role(Role::Downlink)
    }

    pub fn uplink_ids(&self) -> Vec<RruId> {
        self.ids_with_role(Role::Uplink)
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_frequency
    }

    /// Receiver bandwidth implied by symbol-rate sampling, Hz.
    pub fn bandwidth(&self) -> f64 {
        1.0 / self.sample_interval
    }

    pub fn reflectors_of_kind(&self, kind: ReflectorKind) -> impl Iterator<Item = &Reflector> {
        self.reflectors.iter().filter(move |r| r.kind == kind)
    }

    /// Structural checks shared by generation and deserialization.
    pub fn validate(&self) -> Result<()> {
        if !self.volume.is_valid() {
            return Err(Error::InvalidConfig("volume extents must be positive".into()));
        }
        if !(self.carrier_frequency > 0.0 && self.sample_interval > 0.0) {
            return Err(Error::InvalidConfig("carrier frequency and sample interval must be positive".into()));
        }
        let mut ids = BTreeSet::new();
        for r in &self.rrus {
            if !ids.insert(r.id) {
                return Err(Error::InvalidConfig(format!("duplicate RRU id {}", r.id)));
            }
            if r.antenna_rows == 0 || r.antenna_cols == 0 {
                return Err(Error::InvalidConfig(format!("RRU {} has an empty antenna array", r.id)));
            }
            if !r.position.is_finite() {
                return Err(Error::InvalidConfig(format!("RRU {} position is not finite", r.id)));
            }
        }
        for (i, a) in self.rrus.iter().enumerate() {
            for b in &self.rrus[i + 1..] {
                if a.position == b.position {
                    return Err(Error::InvalidConfig(format!("RRUs {} and {} share a position", a.id, b.id)));
                }
            }
        }
        for refl in &self.reflectors {
            let g = refl.reflection_gain.norm();
            if !(g > 0.0 && g <= 1.0) {
                return Err(Error::InvalidConfig(format!("reflector {} gain magnitude {g} outside (0, 1]", refl.id)));
            }
            if refl.kind == ReflectorKind::LongStanding && refl.velocity != Position3D::ORIGIN {
                return Err(Error::InvalidConfig(format!("long-standing reflector {} is moving", refl.id)));
            }
        }
        Ok(())
    }

    pub fn save_toml(&self, config: &ScenarioConfig, path: &Path) -> Result<()> {
        let file = ScenarioFile { config: config.clone(), scenario: self.clone() };
        std::fs::write(path, toml::to_string(&file)?)?;
        Ok(())
    }

    pub fn load_toml(path: &Path) -> Result<(ScenarioConfig, Scenario)> {
        let file: ScenarioFile = toml::from_str(&std::fs::read_to_string(path)?)?;
        file.scenario.validate()?;
        Ok((file.config, file.scenario))
    }
}

/// On-disk form: the generating configuration plus the realized world.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub config: ScenarioConfig,
    pub scenario: Scenario,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub volume: Volume,
    /// Total RRU count `Q`.
    pub num_rrus: usize,
    pub antenna_rows: usize,
    pub antenna_cols: usize,
    /// RRU mast heights are uniform in this range, meters.
    pub rru_height_range: (f64, f64),
    pub min_rru_separation: f64,
    /// `K_a`.
    pub num_static_reflectors: usize,
    /// `K_b`.
    pub num_mobile_reflectors: usize,
    pub max_reflector_speed: f64,
    /// Reflection gain magnitude is log-uniform in this range.
    pub reflection_gain_range: (f64, f64),
    /// When set, each reflector is placed within this horizontal radius of a
    /// randomly chosen RRU instead of uniformly over the whole area.
    pub reflector_anchor_radius: Option<f64>,
    pub num_ues: usize,
    pub ue_tx_power: f64,
    pub ue_height: f64,
    pub ues_active: bool,
    pub carrier_frequency: f64,
    pub sample_interval: f64,
    /// Downlink count of the role split applied at generation time.
    pub initial_downlink: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            volume: Volume::new(3000.0, 3000.0, 60.0),
            num_rrus: 10,
            antenna_rows: 4,
            antenna_cols: 4,
            rru_height_range: (10.0, 60.0),
            min_rru_separation: 50.0,
            num_static_reflectors: 5,
            num_mobile_reflectors: 3,
            max_reflector_speed: 30.0,
            reflection_gain_range: (0.05, 0.5),
            reflector_anchor_radius: None,
            num_ues: 0,
            ue_tx_power: 0.2,
            ue_height: 1.5,
            ues_active: false,
            carrier_frequency: 3.5e9,
            sample_interval: 1.0e-6,
            initial_downlink: 5,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !self.volume.is_valid() {
            return bad("volume extents must be positive".into());
        }
        if self.num_rrus < 2 {
            return bad(format!("need at least 2 RRUs for a bistatic pair, got {}", self.num_rrus));
        }
        if self.antenna_rows == 0 || self.antenna_cols == 0 {
            return bad("antenna array dimensions must be >= 1".into());
        }
        let (h_lo, h_hi) = self.rru_height_range;
        if !(0.0 <= h_lo && h_lo <= h_hi && h_hi <= self.volume.z_extent) {
            return bad(format!("RRU height range ({h_lo}, {h_hi}) outside [0, {}]", self.volume.z_extent));
        }
        let (g_lo, g_hi) = self.reflection_gain_range;
        if !(0.0 < g_lo && g_lo <= g_hi && g_hi <= 1.0) {
            return bad(format!("reflection gain range ({g_lo}, {g_hi}) outside (0, 1]"));
        }
        if self.max_reflector_speed < 0.0 || self.min_rru_separation < 0.0 {
            return bad("speeds and separations must be nonnegative".into());
        }
        if !(self.carrier_frequency > 0.0 && self.sample_interval > 0.0) {
            return bad("carrier frequency and sample interval must be positive".into());
        }
        if self.initial_downlink == 0 || self.initial_downlink >= self.num_rrus {
            return bad(format!(
                "initial downlink count {} leaves an empty role set among {} RRUs",
                self.initial_downlink, self.num_rrus
            ));
        }
        if let Some(r) = self.reflector_anchor_radius {
            if !(r > 0.0) {
                return bad("reflector anchor radius must be positive".into());
            }
        }
        Ok(())
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 100_000;

/// Sample a scenario. Pure function of `(config, seed)`.
pub fn generate_scenario(config: &ScenarioConfig, seed: u64) -> Result<Scenario> {
    config.validate()?;
    let mut rng = rng_for(seed, &[stream::GEOMETRY]);
    let vol = config.volume;

    let mut rrus: Vec<RruNode> = Vec::with_capacity(config.num_rrus);
    for id in 0..config.num_rrus {
        let mut attempts = 0;
        let position = loop {
            let (lo, hi) = config.rru_height_range;
            let p = Position3D::new(
                rng.random_range(0.0..=vol.x_extent),
                rng.random_range(0.0..=vol.y_extent),
                if hi > lo { rng.random_range(lo..=hi) } else { lo },
            );
            if rrus.iter().all(|r| r.position.distance(&p) >= config.min_rru_separation) {
                break p;
            }
            attempts += 1;
            if attempts >= MAX_PLACEMENT_ATTEMPTS {
                return Err(Error::InvalidConfig(format!(
                    "cannot place {} RRUs with {} m separation",
                    config.num_rrus, config.min_rru_separation
                )));
            }
        };
        rrus.push(RruNode {
            id: id as RruId,
            position,
            antenna_rows: config.antenna_rows,
            antenna_cols: config.antenna_cols,
            role: if id < config.initial_downlink { Role::Downlink } else { Role::Uplink },
        });
    }

    let total = config.num_static_reflectors + config.num_mobile_reflectors;
    let mut reflectors = Vec::with_capacity(total);
    for i in 0..total {
        let kind = if i < config.num_static_reflectors {
            ReflectorKind::LongStanding
        } else {
            ReflectorKind::Mobile
        };
        let position = match config.reflector_anchor_radius {
            None => Position3D::new(
                rng.random_range(0.0..=vol.x_extent),
                rng.random_range(0.0..=vol.y_extent),
                rng.random_range(0.0..=vol.z_extent),
            ),
            Some(radius) => {
                let anchor = rrus[rng.random_range(0..rrus.len())].position;
                let r = radius * rng.random::<f64>().sqrt();
                let a = rng.random_range(-PI..PI);
                Position3D::new(
                    (anchor.x + r * a.cos()).clamp(0.0, vol.x_extent),
                    (anchor.y + r * a.sin()).clamp(0.0, vol.y_extent),
                    rng.random_range(0.0..=vol.z_extent),
                )
            }
        };
        let velocity = match kind {
            ReflectorKind::LongStanding => Position3D::ORIGIN,
            ReflectorKind::Mobile => {
                let speed = rng.random_range(0.0..=config.max_reflector_speed);
                let heading = rng.random_range(-PI..PI);
                Position3D::new(speed * heading.cos(), speed * heading.sin(), 0.0)
            }
        };
        let (g_lo, g_hi) = config.reflection_gain_range;
        let magnitude = if g_hi > g_lo {
            (rng.random_range(g_lo.ln()..=g_hi.ln())).exp()
        } else {
            g_lo
        };
        let phase = rng.random_range(-PI..PI);
        reflectors.push(Reflector {
            id: i as u32,
            position,
            velocity,
            kind,
            reflection_gain: Complex64::from_polar(magnitude, phase),
        });
    }

    let ues = (0..config.num_ues)
        .map(|i| UeNode {
            id: i as u32,
            position: Position3D::new(
                rng.random_range(0.0..=vol.x_extent),
                rng.random_range(0.0..=vol.y_extent),
                config.ue_height.min(vol.z_extent),
            ),
            active: config.ues_active,
            tx_power: config.ue_tx_power,
        })
        .collect();

    let scenario = Scenario {
        volume: vol,
        rrus,
        reflectors,
        ues,
        carrier_frequency: config.carrier_frequency,
        sample_interval: config.sample_interval,
        rng_seed: seed,
        slot: 0,
    };
    scenario.validate()?;
    Ok(scenario)
}

/// How the EDU splits RRUs into uplink and downlink sets per slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SchedulePolicy {
    /// The first `downlink` RRUs (by position in the list) transmit.
    FixedSplit { downlink: usize },
    /// RRU at index `i` transmits when `i + slot` is even.
    Alternating,
    /// One RRU transmits, all others receive. Defaults to index `slot mod Q`.
    SingleDownlink { rru: Option<RruId> },
    /// Explicit downlink set.
    Explicit { downlink: Vec<RruId> },
}

/// Return a copy of `scenario` with roles set for `slot` under `policy`.
pub fn assign_roles(scenario: &Scenario, slot: u64, policy: &SchedulePolicy) -> Result<Scenario> {
    let q = scenario.rrus.len();
    let downlink: Vec<bool> = match policy {
        SchedulePolicy::FixedSplit { downlink } => (0..q).map(|i| i < *downlink).collect(),
        SchedulePolicy::Alternating => (0..q).map(|i| (i as u64 + slot).is_multiple_of(2)).collect(),
        SchedulePolicy::SingleDownlink { rru } => {
            let chosen = match rru {
                Some(id) => scenario.rrus.iter().position(|r| r.id == *id).ok_or(Error::UnknownRru(*id))?,
                None if q == 0 => 0,
                None => (slot % q as u64) as usize,
            };
            (0..q).map(|i| i == chosen).collect()
        }
        SchedulePolicy::Explicit { downlink } => {
            for id in downlink {
                scenario.rru(*id)?;
            }
            scenario.rrus.iter().map(|r| downlink.contains(&r.id)).collect()
        }
    };
    let n_down = downlink.iter().filter(|d| **d).count();
    if n_down == 0 || n_down == q {
        return Err(Error::RoleAssignment(format!(
            "policy {policy:?} yields {n_down} downlink of {q} RRUs; both sets must be nonempty"
        )));
    }
    let mut out = scenario.clone();
    out.slot = slot;
    for (rru, is_down) in out.rrus.iter_mut().zip(downlink) {
        rru.role = if is_down { Role::Downlink } else { Role::Uplink };
    }
    Ok(out)
}
