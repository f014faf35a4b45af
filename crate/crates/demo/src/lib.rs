//! Browser front end over `hcci-nmpc`: a steady-state plant map, a
//! closed-loop NMPC run and a single OCP solve. [`Demo`] is plain Rust;
//! [`App`] wraps it for JavaScript and speaks JSON.

use std::sync::Arc;

use hcci_nmpc::config::ExperimentConfig;
use hcci_nmpc::nn::{ModelOutput, NetworkWeights};
use hcci_nmpc::ocp::Feedback;
use hcci_nmpc::plant::{settle, Actuation, ActuatorBounds, PlantParams, SurrogatePlant};
use hcci_nmpc::sim::{run_closed_loop, Controller, ReferenceProfile};
use hcci_nmpc::sqp::solve_ocp;
use hcci_nmpc::trainer::{generate_dataset, train, TrainConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, Serialize)]
pub struct MapPoint {
    pub doi_fuel: f64,
    pub imep: f64,
    pub ca50: f64,
    pub nox: f64,
    pub mprr: f64,
}

/// Noise-free settled outputs over the fuel range at fixed water and NVO.
pub fn plant_map(doi_water: f64, nvo: f64, points: usize) -> Result<Vec<MapPoint>, String> {
    let b = ActuatorBounds::default();
    if !(b.min.doi_water..=b.max.doi_water).contains(&doi_water) || !(b.min.nvo..=b.max.nvo).contains(&nvo) {
        return Err(format!("water must lie in [{}, {}] and NVO in [{}, {}]", b.min.doi_water, b.max.doi_water, b.min.nvo, b.max.nvo));
    }
    let params = PlantParams::default().without_noise();
    let n = points.clamp(2, 400);
    Ok((0..n)
        .map(|k| {
            let f = b.min.doi_fuel + (b.max.doi_fuel - b.min.doi_fuel) * k as f64 / (n - 1) as f64;
            let (_, y) = settle(&params, &Actuation::new(f, doi_water, nvo), 200);
            MapPoint {
                doi_fuel: f,
                imep: y.imep,
                ca50: y.ca50,
                nox: y.nox,
                mprr: y.mprr,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub parameters: usize,
    pub validation_nrmse: [f64; 4],
    pub epochs: usize,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct LoopTrace {
    pub r_imep: Vec<f64>,
    pub r_ca50: Vec<f64>,
    pub imep: Vec<f64>,
    pub ca50: Vec<f64>,
    pub nox: Vec<f64>,
    pub mprr: Vec<f64>,
    pub doi_fuel: Vec<f64>,
    pub doi_water: Vec<f64>,
    pub nvo: Vec<f64>,
    pub imep_rmse: f64,
    pub ca50_rmse: f64,
    pub output_violations: usize,
    pub worst_violation: f64,
    pub input_violations: usize,
    pub nox_cap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationTrace {
    pub cost: f64,
    pub kkt: f64,
    pub qp_iterations: usize,
    pub step_norm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveTrace {
    pub applied: Actuation,
    /// Stage 0 is the measured cycle; stages 1.. are predictions.
    pub outputs: Vec<ModelOutput>,
    pub inputs: Vec<Actuation>,
    pub iterations: Vec<IterationTrace>,
    pub status: String,
}

#[derive(Default)]
pub struct Demo {
    model: Option<Arc<NetworkWeights>>,
    config: ExperimentConfig,
}

impl Demo {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn has_model(&self) -> bool {
        self.model.is_some()
    }

    fn model(&self) -> Result<Arc<NetworkWeights>, String> {
        self.model.clone().ok_or_else(|| "train or load a model first".to_string())
    }

    /// Generates `cycles` of plant data and fits a fresh surrogate.
    pub fn train(&mut self, cycles: usize, epochs: usize, seed: u64) -> Result<TrainSummary, String> {
        let c = &self.config;
        let ds = generate_dataset(&c.plant, &c.actuators, cycles, seed, c.data.train_fraction).map_err(|e| e.to_string())?;
        let tc = TrainConfig {
            max_epochs: epochs,
            seed,
            ..c.train.clone()
        };
        let spec = c.network.spec();
        let (w, fit) = train(&ds, &spec, &tc).map_err(|e| e.to_string())?;
        self.model = Some(Arc::new(w));
        Ok(TrainSummary {
            parameters: spec.param_count(),
            validation_nrmse: fit.validation.nrmse,
            epochs: fit.history.len(),
        })
    }

    /// Loads a weights file written by `hcci train`.
    pub fn load_weights(&mut self, bytes: &[u8]) -> Result<usize, String> {
        let w = NetworkWeights::from_bytes(bytes).map_err(|e| e.to_string())?;
        let n = w.params.len();
        self.model = Some(Arc::new(w));
        Ok(n)
    }

    pub fn closed_loop(&self, cycles: usize, noisy: bool, nox_cap: f64) -> Result<LoopTrace, String> {
        let model = self.model()?;
        let mut cl = self.config.closed_loop();
        cl.controller.bounds.output_max.nox = nox_cap;
        cl.controller.bounds.validate().map_err(|e| e.to_string())?;
        let mut profile = ReferenceProfile::default();
        profile.cycles = cycles.clamp(1, 2000);
        profile.points.retain(|p| p.cycle < profile.cycles);

        let params = if noisy { self.config.plant.clone() } else { self.config.plant.clone().without_noise() };
        let (state, y0) = settle(&params, &cl.initial_actuation, self.config.run.settle_cycles);
        let mut plant = SurrogatePlant::new(params, state);
        let run = run_closed_loop(model, &mut plant, y0, &profile, &cl).map_err(|e| e.to_string())?;

        let mut t = LoopTrace {
            imep_rmse: run.report.imep_rmse,
            ca50_rmse: run.report.ca50_rmse,
            output_violations: run.report.violations,
            worst_violation: run.report.worst_violation,
            input_violations: run.report.input_violations,
            nox_cap,
            ..LoopTrace::default()
        };
        for r in &run.records {
            t.r_imep.push(r.r_imep);
            t.r_ca50.push(r.r_ca50);
            t.imep.push(r.measured.imep);
            t.ca50.push(r.measured.ca50);
            t.nox.push(r.measured.nox);
            t.mprr.push(r.measured.mprr);
            t.doi_fuel.push(r.applied.doi_fuel);
            t.doi_water.push(r.applied.doi_water);
            t.nvo.push(r.applied.nvo);
        }
        Ok(t)
    }

    /// One SQP solve from a steady state at the default actuation with the
    /// measured IMEP and CA50 replaced by `imep` and `ca50`.
    pub fn solve_once(&self, imep: f64, ca50: f64, r_imep: f64, r_ca50: f64, horizon: usize) -> Result<SolveTrace, String> {
        let model = self.model()?;
        let mut cc = self.config.controller.clone();
        cc.horizon = horizon.clamp(1, 20);
        let a0 = self.config.run.initial_actuation;
        let (_, base) = settle(&self.config.plant, &a0, self.config.run.settle_cycles);
        let y = ModelOutput { imep, ca50, ..base };
        let ctrl = Controller::settled(model, cc, &y, a0).map_err(|e| e.to_string())?;
        let problem = ctrl.problem(Feedback::from(&y), r_imep, r_ca50).map_err(|e| e.to_string())?;
        let r = solve_ocp(&problem, None, &ctrl.config.solver).map_err(|e| e.to_string())?;
        Ok(SolveTrace {
            applied: r.applied,
            outputs: r.trajectory.outputs.clone(),
            inputs: r.trajectory.inputs.clone(),
            iterations: r
                .iterations
                .iter()
                .map(|l| IterationTrace {
                    cost: l.cost,
                    kkt: l.kkt,
                    qp_iterations: l.qp_iterations,
                    step_norm: l.step_norm,
                })
                .collect(),
            status: format!("{:?}", r.status),
        })
    }
}

fn json<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub struct App {
    inner: Demo,
}

#[wasm_bindgen]
impl App {
    #[wasm_bindgen(constructor)]
    pub fn new() -> App {
        App { inner: Demo::new() }
    }

    #[wasm_bindgen(js_name = hasModel)]
    pub fn has_model(&self) -> bool {
        self.inner.has_model()
    }

    pub fn train(&mut self, cycles: usize, epochs: usize, seed: u32) -> Result<String, JsError> {
        json(self.inner.train(cycles, epochs, seed as u64))
    }

    #[wasm_bindgen(js_name = loadWeights)]
    pub fn load_weights(&mut self, bytes: &[u8]) -> Result<usize, JsError> {
        self.inner.load_weights(bytes).map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = plantMap)]
    pub fn plant_map(&self, doi_water: f64, nvo: f64, points: usize) -> Result<String, JsError> {
        json(plant_map(doi_water, nvo, points))
    }

    #[wasm_bindgen(js_name = closedLoop)]
    pub fn closed_loop(&self, cycles: usize, noisy: bool, nox_cap: f64) -> Result<String, JsError> {
        json(self.inner.closed_loop(cycles, noisy, nox_cap))
    }

    #[wasm_bindgen(js_name = solveOnce)]
    pub fn solve_once(&self, imep: f64, ca50: f64, r_imep: f64, r_ca50: f64, horizon: usize) -> Result<String, JsError> {
        json(self.inner.solve_once(imep, ca50, r_imep, r_ca50, horizon))
    }
}

impl Default for App {
    fn default() -> Self {
        Self::new()
    }
}
