//! Synthetic HCCI-like engine used as ground truth.
//!
//! Two states carry information from one cycle to the next: a normalized
//! residual-gas thermal state and the last indicated load. Each cycle the
//! thermal drive (residual heat, NVO trapping, water cooling) sets combustion
//! phasing and a smooth misfire factor; load follows fuel, and the outputs feed
//! back into the next cycle's residual heat.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{sigmoid, ModelOutput};

/// Injector and valve commands for one engine cycle.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Actuation {
    /// ms
    pub doi_fuel: f64,
    /// ms
    pub doi_water: f64,
    /// CAD
    pub nvo: f64,
}

impl Actuation {
    pub const fn new(doi_fuel: f64, doi_water: f64, nvo: f64) -> Self {
        Self {
            doi_fuel,
            doi_water,
            nvo,
        }
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.doi_fuel, self.doi_water, self.nvo]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Box bounds on the three actuators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuatorBounds {
    pub min: Actuation,
    pub max: Actuation,
}

impl Default for ActuatorBounds {
    /// Injector and valve hardware limits.
    fn default() -> Self {
        Self {
            min: Actuation::new(0.0, 0.0, 150.0),
            max: Actuation::new(1.5, 1.0, 360.0),
        }
    }
}

impl ActuatorBounds {
    pub fn contains(&self, a: &Actuation) -> bool {
        let (lo, hi, v) = (self.min.to_array(), self.max.to_array(), a.to_array());
        (0..3).all(|j| v[j] >= lo[j] && v[j] <= hi[j])
    }

    pub fn clamp(&self, a: &Actuation) -> Actuation {
        let (lo, hi, v) = (self.min.to_array(), self.max.to_array(), a.to_array());
        Actuation::from_array(std::array::from_fn(|j| v[j].clamp(lo[j], hi[j])))
    }

    pub fn midpoint(&self) -> Actuation {
        let (lo, hi) = (self.min.to_array(), self.max.to_array());
        Actuation::from_array(std::array::from_fn(|j| 0.5 * (lo[j] + hi[j])))
    }

    pub fn range(&self) -> [f64; 3] {
        let (lo, hi) = (self.min.to_array(), self.max.to_array());
        std::array::from_fn(|j| hi[j] - lo[j])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    /// Residual thermal state, normalized to [0, 2].
    pub t_res: f64,
    /// Indicated load of the previous cycle, bar.
    pub last_imep: f64,
}

impl Default for PlantState {
    fn default() -> Self {
        Self {
            t_res: 1.0,
            last_imep: 3.0,
        }
    }
}

/// Standard deviations of the additive measurement noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputNoise {
    pub imep: f64,
    pub ca50: f64,
    pub nox: f64,
    pub mprr: f64,
}

impl Default for OutputNoise {
    fn default() -> Self {
        Self {
            imep: 0.1,
            ca50: 0.45,
            nox: 8.0,
            mprr: 0.25,
        }
    }
}

impl OutputNoise {
    pub fn zero() -> Self {
        Self {
            imep: 0.0,
            ca50: 0.0,
            nox: 0.0,
            mprr: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantParams {
    /// Load per ms of fuel at full combustion quality, bar/ms.
    pub imep_per_fuel: f64,
    /// Efficiency loss for phasing away from `phasing_optimum`.
    pub phasing_loss: f64,
    /// CAD aTDC
    pub phasing_optimum: f64,
    /// Thermal drive per unit of normalized NVO ((nvo - 255) / 105).
    pub nvo_thermal_gain: f64,
    /// Thermal drive lost per ms of water.
    pub water_cooling: f64,
    /// Thermal drive at which combustion quality is one half.
    pub misfire_threshold: f64,
    pub misfire_width: f64,
    /// CA50 at unit thermal drive and no water, CAD aTDC.
    pub ca50_nominal: f64,
    /// CA50 advance per unit thermal drive, CAD.
    pub ca50_thermal_gain: f64,
    /// CA50 retard per ms of water, CAD.
    pub ca50_water_gain: f64,
    /// CA50 reported for a fully misfired cycle.
    pub ca50_late: f64,
    /// MPRR per bar of load at optimum phasing, (bar/CAD)/bar.
    pub mprr_gain: f64,
    /// CAD
    pub mprr_phasing_scale: f64,
    /// ppm at 3 bar and optimum phasing.
    pub nox_base: f64,
    /// per bar
    pub nox_load_gain: f64,
    /// per CAD
    pub nox_phasing_gain: f64,
    pub residual_memory: f64,
    pub residual_load_gain: f64,
    pub residual_water_cooling: f64,
    pub residual_nvo_gain: f64,
    pub noise: OutputNoise,
    /// Standard deviation of the cycle-to-cycle thermal disturbance.
    pub thermal_noise: f64,
    pub seed: u64,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            imep_per_fuel: 4.0,
            phasing_loss: 0.3,
            phasing_optimum: 6.0,
            nvo_thermal_gain: 0.35,
            water_cooling: 0.5,
            misfire_threshold: 0.25,
            misfire_width: 0.08,
            ca50_nominal: 7.0,
            ca50_thermal_gain: 9.0,
            ca50_water_gain: 3.0,
            ca50_late: 20.0,
            mprr_gain: 1.0,
            mprr_phasing_scale: 7.0,
            nox_base: 60.0,
            nox_load_gain: 0.7,
            nox_phasing_gain: 0.08,
            residual_memory: 0.8,
            residual_load_gain: 0.5,
            residual_water_cooling: 0.8,
            residual_nvo_gain: 0.6,
            noise: OutputNoise::default(),
            thermal_noise: 0.02,
            seed: 7,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PlantError {
    #[error("plant parameter `{0}` must be strictly positive")]
    NonPositiveGain(&'static str),
    #[error("noise amplitude `{0}` must be non-negative")]
    NegativeNoise(&'static str),
    #[error("misfire phasing must be later than the combustion phasing ceiling")]
    LateBelowCeiling,
    #[error("bounds for {0} are empty or non-finite")]
    EmptyBounds(&'static str),
    #[error("sequence length must be at least 1")]
    EmptySequence,
}

/// Upper end of the smooth phasing saturation (must stay below `ca50_late`).
const CA50_CEILING: f64 = 19.0;
const CA50_FLOOR: f64 = -4.0;

impl PlantParams {
    pub fn without_noise(mut self) -> Self {
        self.noise = OutputNoise::zero();
        self.thermal_noise = 0.0;
        self
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        let gains = [
            ("imep_per_fuel", self.imep_per_fuel),
            ("nvo_thermal_gain", self.nvo_thermal_gain),
            ("water_cooling", self.water_cooling),
            ("misfire_width", self.misfire_width),
            ("ca50_thermal_gain", self.ca50_thermal_gain),
            ("ca50_water_gain", self.ca50_water_gain),
            ("mprr_gain", self.mprr_gain),
            ("mprr_phasing_scale", self.mprr_phasing_scale),
            ("nox_base", self.nox_base),
            ("nox_load_gain", self.nox_load_gain),
            ("nox_phasing_gain", self.nox_phasing_gain),
            ("residual_load_gain", self.residual_load_gain),
            ("residual_water_cooling", self.residual_water_cooling),
            ("residual_nvo_gain", self.residual_nvo_gain),
        ];
        for (name, v) in gains {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PlantError::NonPositiveGain(name));
            }
        }
        if !(self.phasing_loss >= 0.0) {
            return Err(PlantError::NegativeNoise("phasing_loss"));
        }
        let n = &self.noise;
        for (name, v) in [
            ("imep", n.imep),
            ("ca50", n.ca50),
            ("nox", n.nox),
            ("mprr", n.mprr),
            ("thermal_noise", self.thermal_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(PlantError::NegativeNoise(name));
            }
        }
        if !(self.ca50_late > CA50_CEILING) {
            return Err(PlantError::LateBelowCeiling);
        }
        Ok(())
    }
}

/// Everything one noise-free cycle computes; useful for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleDetail {
    pub thermal_drive: f64,
    /// Smooth combustion-quality factor in (0, 1); near zero means misfire.
    pub quality: f64,
    pub output: ModelOutput,
    pub next_t_res: f64,
}

/// Noise-free cycle map.
pub fn cycle_detail(state: &PlantState, a: &Actuation, p: &PlantParams) -> CycleDetail {
    let nvo_n = (a.nvo - 255.0) / 105.0;
    let theta = state.t_res + p.nvo_thermal_gain * nvo_n - p.water_cooling * a.doi_water;
    let quality = sigmoid((theta - p.misfire_threshold) / p.misfire_width);

    let raw = p.ca50_nominal - p.ca50_thermal_gain * (theta - 1.0) + p.ca50_water_gain * a.doi_water;
    let span = CA50_CEILING - CA50_FLOOR;
    let mid = 0.5 * (CA50_CEILING + CA50_FLOOR);
    let burn = CA50_FLOOR + span * sigmoid(4.0 * (raw - mid) / span);
    let ca50 = quality * burn + (1.0 - quality) * p.ca50_late;

    let dphase = (ca50 - p.phasing_optimum) / 10.0;
    let efficiency = 1.0 / (1.0 + p.phasing_loss * dphase * dphase);
    let imep = quality * p.imep_per_fuel * a.doi_fuel * efficiency;

    let mprr = p.mprr_gain * imep * (-(ca50 - p.phasing_optimum) / p.mprr_phasing_scale).exp();
    let nox = p.nox_base
        * (p.nox_load_gain * (imep - 3.0) - p.nox_phasing_gain * (ca50 - p.phasing_optimum)).exp();

    let drive = p.residual_memory * (state.t_res - 1.0) + p.residual_load_gain * (imep - 3.0)
        - p.residual_water_cooling * a.doi_water
        + p.residual_nvo_gain * nvo_n;
    CycleDetail {
        thermal_drive: theta,
        quality,
        output: ModelOutput {
            imep,
            ca50,
            nox,
            mprr,
        },
        next_t_res: 2.0 * sigmoid(drive),
    }
}

/// One engine cycle: returns the next state and the measured (noisy) outputs.
pub fn plant_step<R: Rng + ?Sized>(
    state: &PlantState,
    a: &Actuation,
    params: &PlantParams,
    rng: &mut R,
) -> (PlantState, ModelOutput) {
    let d = cycle_detail(state, a, params);
    let y = d.output;
    let n = &params.noise;
    let measured = ModelOutput {
        imep: y.imep + gaussian(rng, n.imep),
        ca50: y.ca50 + gaussian(rng, n.ca50),
        nox: (y.nox + gaussian(rng, n.nox)).max(0.0),
        mprr: (y.mprr + gaussian(rng, n.mprr)).max(0.0),
    };
    let t_res = (d.next_t_res + gaussian(rng, params.thermal_noise)).clamp(0.0, 2.0);
    (
        PlantState {
            t_res,
            last_imep: y.imep,
        },
        measured,
    )
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    // Always draw so the stream position is independent of the amplitudes.
    let z: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(rng);
    std * z
}

/// Noise-free state reached by holding `a` for `cycles` cycles.
pub fn settle(params: &PlantParams, a: &Actuation, cycles: usize) -> (PlantState, ModelOutput) {
    let mut s = PlantState::default();
    let mut y = ModelOutput::default();
    for _ in 0..cycles.max(1) {
        let d = cycle_detail(&s, a, params);
        s = PlantState {
            t_res: d.next_t_res,
            last_imep: d.output.imep,
        };
        y = d.output;
    }
    (s, y)
}

/// Amplitude- and hold-time-randomized excitation within `bounds`.
///
/// Each channel independently holds a uniformly drawn level for a uniformly
/// drawn number of cycles in `hold`.
pub fn excitation_sequence<R: Rng + ?Sized>(
    n_cycles: usize,
    bounds: &ActuatorBounds,
    hold: (usize, usize),
    rng: &mut R,
) -> Result<Vec<Actuation>, PlantError> {
    if n_cycles == 0 {
        return Err(PlantError::EmptySequence);
    }
    let names = ["doi_fuel", "doi_water", "nvo"];
    let (lo, hi) = (bounds.min.to_array(), bounds.max.to_array());
    for j in 0..3 {
        if !(lo[j].is_finite() && hi[j].is_finite() && lo[j] <= hi[j]) {
            return Err(PlantError::EmptyBounds(names[j]));
        }
    }
    let (hmin, hmax) = (hold.0.max(1), hold.1.max(hold.0.max(1)));
    let mut channels = [[0.0; 3]; 0].to_vec();
    channels.resize(n_cycles, [0.0; 3]);
    for j in 0..3 {
        let mut k = 0;
        while k < n_cycles {
            let level = if hi[j] > lo[j] {
                rng.random_range(lo[j]..=hi[j])
            } else {
                lo[j]
            };
            let len = rng.random_range(hmin..=hmax);
            for row in channels.iter_mut().skip(k).take(len) {
                row[j] = level;
            }
            k += len;
        }
    }
    Ok(channels.into_iter().map(Actuation::from_array).collect())
}

/// A plant instance with its own random stream.
#[derive(Debug, Clone)]
pub struct SurrogatePlant {
    pub params: PlantParams,
    pub state: PlantState,
    rng: rand_chacha::ChaCha8Rng,
}

impl SurrogatePlant {
    pub fn new(params: PlantParams, state: PlantState) -> Self {
        use rand::SeedableRng;
        let rng = rand_chacha::ChaCha8Rng::seed_from_u64(params.seed);
        Self { params, state, rng }
    }

    pub fn step(&mut self, a: &Actuation) -> ModelOutput {
        let (s, y) = plant_step(&self.state, a, &self.params, &mut self.rng);
        self.state = s;
        y
    }
}
