//! System geometry, random scenario sampling and channel synthesis.
//!
//! Coordinates are in metres. The transmit waveguides lie in the `xy`-plane
//! parallel to the `y`-axis, waveguide `n` at `x = n·D_t/(N_t-1)`; each carries
//! one pinching antenna at offset `y_{t,n}`. Users move their antennas inside
//! a `D_k × D_k` square parallel to the `xy`-plane anchored at the user origin.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{CMatrix, LinalgError};

pub type Point3 = [f64; 3];

pub fn distance(a: &Point3, b: &Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("invalid system config: {0}")]
    InvalidConfig(String),
    #[error("invalid placement: {0}")]
    InvalidPlacement(String),
    #[error("coincident points: channel undefined at zero distance")]
    ZeroDistance,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Axis-aligned sampling box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    pub const fn new(min: Point3, max: Point3) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    fn is_valid(&self) -> bool {
        (0..3).all(|a| self.min[a].is_finite() && self.max[a].is_finite() && self.min[a] <= self.max[a])
    }

    fn sample(&self, rng: &mut impl Rng) -> Point3 {
        let mut p = [0.0; 3];
        for (a, v) in p.iter_mut().enumerate() {
            *v = if self.min[a] == self.max[a] { self.min[a] } else { rng.gen_range(self.min[a]..=self.max[a]) };
        }
        p
    }
}

/// Physical constants, array sizes, penalties and sampling regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    /// λ (m).
    pub wavelength: f64,
    pub carrier_hz: f64,
    /// n_e of the dielectric waveguide.
    pub refractive_index: f64,
    /// N_t: waveguides, one pinching antenna each.
    pub n_tx: usize,
    /// N_r: fixed sensing receive antennas.
    pub n_rx: usize,
    /// N_k: movable antennas per user.
    pub n_ma: usize,
    /// K.
    pub users: usize,
    /// L.
    pub scatterers: usize,
    /// D_t (m).
    pub waveguide_length: f64,
    /// D_r (m).
    pub rx_array_length: f64,
    /// D_k (m).
    pub ma_region: f64,
    pub d_min: f64,
    pub rician_k: f64,
    /// σ_c² (W).
    pub noise_comm: f64,
    /// σ_z² (W).
    pub noise_sens: f64,
    pub p_max: f64,
    /// γ₀.
    pub gamma0: f64,
    /// ν_s.
    pub nu_sinr: f64,
    /// ν_{d,k}, shared by every user.
    pub nu_spacing: f64,
    pub rx_midpoint: Point3,
    pub user_boxes: Vec<Aabb>,
    pub target_box: Aabb,
    pub scatterer_box: Aabb,
    pub seed: u64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl SystemConfig {
    /// Full-size simulation setup (N_t = 6, N_k = 3, two users).
    pub fn full() -> Self {
        Self {
            wavelength: 0.06,
            carrier_hz: 5e9,
            refractive_index: 1.4,
            n_tx: 6,
            n_rx: 4,
            n_ma: 3,
            users: 2,
            scatterers: 2,
            waveguide_length: 10.0,
            rx_array_length: 0.3,
            ma_region: 0.15,
            d_min: 0.03,
            rician_k: 2.0,
            noise_comm: 1e-12,
            noise_sens: 1e-12,
            p_max: 1.0,
            gamma0: 0.01,
            nu_sinr: 1000.0,
            nu_spacing: 100.0,
            rx_midpoint: [20.0, 20.0, 1.0],
            user_boxes: vec![
                Aabb::new([-5.0, -5.0, 5.0], [-3.0, -3.0, 10.0]),
                Aabb::new([-5.0, 13.0, 5.0], [-3.0, 15.0, 10.0]),
            ],
            target_box: Aabb::new([12.0, 0.0, 1.0], [15.0, 5.0, 5.0]),
            scatterer_box: Aabb::new([-2.0, 3.0, 0.0], [0.0, 7.0, 3.0]),
            seed: 0,
        }
    }

    /// Reduced setup used for desk-scale training runs.
    pub fn desk() -> Self {
        Self { n_tx: 4, n_rx: 4, n_ma: 2, ..Self::full() }
    }

    /// Smallest setup used for end-to-end gradient checks.
    pub fn tiny() -> Self {
        let full = Self::full();
        Self {
            n_tx: 3,
            n_rx: 2,
            n_ma: 2,
            users: 1,
            scatterers: 1,
            user_boxes: vec![full.user_boxes[0]],
            ..full
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::InvalidConfig(m.to_string()));
        if self.n_tx < 2 || self.n_rx < 2 {
            return bad("n_tx and n_rx must be at least 2");
        }
        if self.n_ma < 1 || self.users < 1 {
            return bad("n_ma and users must be at least 1");
        }
        for (name, v) in [
            ("wavelength", self.wavelength),
            ("carrier_hz", self.carrier_hz),
            ("refractive_index", self.refractive_index),
            ("waveguide_length", self.waveguide_length),
            ("rx_array_length", self.rx_array_length),
            ("ma_region", self.ma_region),
            ("d_min", self.d_min),
            ("noise_comm", self.noise_comm),
            ("noise_sens", self.noise_sens),
            ("p_max", self.p_max),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be positive and finite"));
            }
        }
        if self.d_min > self.ma_region {
            return bad("d_min must not exceed ma_region");
        }
        for (name, v) in [
            ("rician_k", self.rician_k),
            ("gamma0", self.gamma0),
            ("nu_sinr", self.nu_sinr),
            ("nu_spacing", self.nu_spacing),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be non-negative and finite"));
            }
        }
        if self.user_boxes.len() != self.users {
            return bad(&format!("expected {} user boxes, got {}", self.users, self.user_boxes.len()));
        }
        if !self.user_boxes.iter().chain([&self.target_box, &self.scatterer_box]).all(Aabb::is_valid) {
            return bad("every box needs min <= max on each axis");
        }
        Ok(())
    }

    /// x-coordinate of waveguide `n` (0-based).
    pub fn waveguide_x(&self, n: usize) -> f64 {
        n as f64 * self.waveguide_length / (self.n_tx - 1) as f64
    }

    /// Receive array positions, spaced along `y` symmetrically about the midpoint.
    pub fn rx_positions(&self) -> Vec<Point3> {
        let [x, y, z] = self.rx_midpoint;
        let step = self.rx_array_length / (self.n_rx - 1) as f64;
        (0..self.n_rx).map(|m| [x, y - 0.5 * self.rx_array_length + m as f64 * step, z]).collect()
    }
}

/// One sampled environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub user_origins: Vec<Point3>,
    pub scatterers: Vec<Point3>,
    pub target: Point3,
}

impl Scenario {
    pub fn is_inside(&self, config: &SystemConfig) -> bool {
        self.user_origins.len() == config.users
            && self.scatterers.len() == config.scatterers
            && self.user_origins.iter().zip(&config.user_boxes).all(|(p, b)| b.contains(p))
            && self.scatterers.iter().all(|p| config.scatterer_box.contains(p))
            && config.target_box.contains(&self.target)
    }
}

/// Draws every coordinate independently and uniformly from its box.
pub fn sample_scenario(config: &SystemConfig, seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let user_origins = config.user_boxes.iter().map(|b| b.sample(&mut rng)).collect();
    let scatterers = (0..config.scatterers).map(|_| config.scatterer_box.sample(&mut rng)).collect();
    let target = config.target_box.sample(&mut rng);
    Scenario { user_origins, scatterers, target }
}

/// Pinching antenna offsets `y_{t,n}` along each waveguide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaPlacement {
    pub y: Vec<f64>,
}

impl PaPlacement {
    /// Uniform grid `(n-1)·D_t/(N_t-1)`.
    pub fn uniform(config: &SystemConfig) -> Self {
        Self { y: (0..config.n_tx).map(|n| config.waveguide_x(n)).collect() }
    }

    pub fn validate(&self, config: &SystemConfig) -> Result<(), ScenarioError> {
        if self.y.len() != config.n_tx {
            return Err(ScenarioError::InvalidPlacement(format!("expected {} PA offsets", config.n_tx)));
        }
        if let Some(y) = self.y.iter().find(|y| !(**y >= 0.0 && **y <= config.waveguide_length)) {
            return Err(ScenarioError::InvalidPlacement(format!("PA offset {y} outside [0, D_t]")));
        }
        Ok(())
    }

    pub fn positions(&self, config: &SystemConfig) -> Vec<Point3> {
        self.y.iter().enumerate().map(|(n, &y)| [config.waveguide_x(n), y, 0.0]).collect()
    }
}

/// Local movable-antenna coordinates `(x̃, ỹ)` per user and antenna.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaPlacement {
    pub local: Vec<Vec<[f64; 2]>>,
}

impl MaPlacement {
    /// Fixed linear array parallel to `y`, centred in `x`.
    pub fn fixed_ula(config: &SystemConfig) -> Self {
        let x = 0.5 * config.ma_region;
        let step = if config.n_ma > 1 { config.ma_region / (config.n_ma - 1) as f64 } else { 0.0 };
        let ula: Vec<[f64; 2]> = (0..config.n_ma).map(|b| [x, b as f64 * step]).collect();
        Self { local: vec![ula; config.users] }
    }

    pub fn validate(&self, config: &SystemConfig) -> Result<(), ScenarioError> {
        if self.local.len() != config.users || self.local.iter().any(|u| u.len() != config.n_ma) {
            return Err(ScenarioError::InvalidPlacement(format!(
                "expected {}x{} MA coordinates",
                config.users, config.n_ma
            )));
        }
        let inside = |v: f64| v >= 0.0 && v <= config.ma_region;
        if self.local.iter().flatten().any(|p| !inside(p[0]) || !inside(p[1])) {
            return Err(ScenarioError::InvalidPlacement("MA coordinate outside [0, D_k]".into()));
        }
        Ok(())
    }

    /// Global position `ũ_{k,b} + b_k`.
    pub fn global(&self, k: usize, b: usize, scenario: &Scenario) -> Point3 {
        let o = scenario.user_origins[k];
        let p = self.local[k][b];
        [o[0] + p[0], o[1] + p[1], o[2]]
    }
}

/// Diagonal in-waveguide phase matrix, `F(n,n) = exp(-j 2π y_{t,n} n_e / λ)`.
pub fn waveguide_matrix(pa: &PaPlacement, config: &SystemConfig) -> CMatrix {
    let n = pa.y.len();
    CMatrix::from_fn(n, n, |i, j| {
        if i == j {
            let phase = -2.0 * PI * pa.y[i] * config.refractive_index / config.wavelength;
            (phase.cos(), phase.sin())
        } else {
            (0.0, 0.0)
        }
    })
}

fn spherical_wave(d: f64, wavelength: f64) -> (f64, f64) {
    let mag = wavelength / (4.0 * PI * d);
    let phase = -2.0 * PI * d / wavelength;
    (mag * phase.cos(), mag * phase.sin())
}

/// Free-space line-of-sight coefficient between two points.
pub fn los_channel(t: &Point3, u: &Point3, wavelength: f64) -> Result<(f64, f64), ScenarioError> {
    let d = distance(t, u);
    if d <= 0.0 {
        return Err(ScenarioError::ZeroDistance);
    }
    Ok(spherical_wave(d, wavelength))
}

/// Single-bounce scattered coefficient summed over all scatterers.
pub fn nlos_channel(t: &Point3, u: &Point3, scatterers: &[Point3], wavelength: f64) -> Result<(f64, f64), ScenarioError> {
    let mut acc = (0.0, 0.0);
    for xi in scatterers {
        let dt = distance(t, xi);
        let du = distance(u, xi);
        if dt <= 0.0 || du <= 0.0 {
            return Err(ScenarioError::ZeroDistance);
        }
        let mag = wavelength / (4.0 * PI) / (dt * du);
        let phase = -2.0 * PI / wavelength * (du - dt);
        acc.0 += mag * phase.cos();
        acc.1 += mag * phase.sin();
    }
    Ok(acc)
}

/// Rician channel `H_k` (`N_k × N_t`) for user `k`.
pub fn user_channel(
    k: usize,
    pa: &PaPlacement,
    ma: &MaPlacement,
    scenario: &Scenario,
    config: &SystemConfig,
) -> Result<CMatrix, ScenarioError> {
    let w_los = (config.rician_k / (config.rician_k + 1.0)).sqrt();
    let w_nlos = (1.0 / (config.rician_k + 1.0)).sqrt();
    let tx = pa.positions(config);
    let mut h = CMatrix::zeros(config.n_ma, config.n_tx);
    for b in 0..config.n_ma {
        let u = ma.global(k, b, scenario);
        for (n, t) in tx.iter().enumerate() {
            let los = los_channel(t, &u, config.wavelength)?;
            let nlos = nlos_channel(t, &u, &scenario.scatterers, config.wavelength)?;
            h.set(b, n, (w_los * los.0 + w_nlos * nlos.0, w_los * los.1 + w_nlos * nlos.1));
        }
    }
    Ok(h)
}

/// Column of free-space coefficients from each position to the target.
pub fn target_steering(positions: &[Point3], target: &Point3, wavelength: f64) -> Result<CMatrix, ScenarioError> {
    let entries = positions
        .iter()
        .map(|p| los_channel(p, target, wavelength))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CMatrix::column(&entries))
}

/// Rank-one point-target channel `G = f_r f_tᴴ`.
pub fn sensing_channel(f_t: &CMatrix, f_r: &CMatrix) -> Result<CMatrix, ScenarioError> {
    if f_t.cols() != 1 || f_r.cols() != 1 {
        return Err(LinalgError::DimensionMismatch { op: "sensing_channel", lhs: f_r.shape(), rhs: f_t.shape() }.into());
    }
    Ok(f_r.cmul(&f_t.adjoint())?)
}

/// Every channel needed to score one decision in one scenario.
#[derive(Debug, Clone)]
pub struct Channels {
    pub h: Vec<CMatrix>,
    pub f: CMatrix,
    pub f_t: CMatrix,
    pub f_r: CMatrix,
    pub g: CMatrix,
}

impl Channels {
    pub fn synthesize(
        pa: &PaPlacement,
        ma: &MaPlacement,
        scenario: &Scenario,
        config: &SystemConfig,
    ) -> Result<Self, ScenarioError> {
        pa.validate(config)?;
        ma.validate(config)?;
        let h = (0..config.users)
            .map(|k| user_channel(k, pa, ma, scenario, config))
            .collect::<Result<Vec<_>, _>>()?;
        let f = waveguide_matrix(pa, config);
        let f_t = target_steering(&pa.positions(config), &scenario.target, config.wavelength)?;
        let f_r = target_steering(&config.rx_positions(), &scenario.target, config.wavelength)?;
        let g = sensing_channel(&f_t, &f_r)?;
        Ok(Self { h, f, f_t, f_r, g })
    }
}
