//! Python bindings for the drivelab core: town construction and routing, the
//! deterministic simulator, the expert demonstrator, the steering-noise
//! model, and the variance decomposition.

use drivelab_core::expert::{
    apply_noise, expert_act, noise_schedule, noise_value, ExpertConfig, ExpertState, NoiseImpulse,
};
use drivelab_core::model::{load_checkpoint, predict};
use drivelab_core::sim::{
    render_observation, spawn_scenario, step, ControlCommand, DensityProfile, HighLevelCommand,
    WorldState, DT, OBS_CHANNELS, OBS_HEIGHT, OBS_WIDTH,
};
use drivelab_core::town::{build_town, plan_route, Route, TownId, TownMap, Weather, WeatherId};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn parse_town(name: &str) -> PyResult<TownId> {
    TownId::parse(name).ok_or_else(|| PyValueError::new_err(format!("unknown town '{name}'")))
}

fn parse_weather(name: &str) -> PyResult<Weather> {
    WeatherId::parse(name)
        .map(Weather::from_id)
        .ok_or_else(|| PyValueError::new_err(format!("unknown weather '{name}'")))
}

fn parse_density(name: &str) -> PyResult<DensityProfile> {
    DensityProfile::parse(name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown density '{name}'")))
}

/// A procedurally built town.
#[pyclass(name = "Town")]
struct PyTown {
    map: TownMap,
}

#[pymethods]
impl PyTown {
    #[new]
    fn new(name: &str, seed: u64) -> PyResult<Self> {
        Ok(PyTown {
            map: build_town(parse_town(name)?, seed),
        })
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        TownMap::from_text(text)
            .map(|map| PyTown { map })
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn lane_count(&self) -> usize {
        self.map.lanes.len()
    }

    fn intersection_count(&self) -> usize {
        self.map.intersections.len()
    }

    fn spawn_count(&self) -> usize {
        self.map.spawn_points.len()
    }

    fn traffic_light_count(&self) -> usize {
        self.map.traffic_lights.len()
    }

    /// Versioned plain-text serialization of the map.
    fn to_text(&self) -> String {
        self.map.to_text()
    }

    fn plan_route(&self, start: usize, goal: usize) -> PyResult<PyRoute> {
        plan_route(&self.map, start, goal)
            .map(|route| PyRoute { route })
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!(
            "Town({}, lanes={}, intersections={}, spawns={})",
            self.map.id,
            self.map.lanes.len(),
            self.map.intersections.len(),
            self.map.spawn_points.len()
        )
    }
}

/// A planned route between two spawn points.
#[pyclass(name = "Route")]
struct PyRoute {
    route: Route,
}

#[pymethods]
impl PyRoute {
    #[getter]
    fn length_m(&self) -> f64 {
        self.route.length_m
    }

    fn waypoints(&self) -> Vec<(f64, f64)> {
        self.route.waypoints.iter().map(|p| (p.x, p.y)).collect()
    }

    /// Integer-encoded command per waypoint (2 lane-follow, 3 left, 4 right,
    /// 5 straight).
    fn commands(&self) -> Vec<u8> {
        self.route.commands.iter().map(|c| c.code()).collect()
    }

    fn __len__(&self) -> usize {
        self.route.waypoints.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Route(length_m={:.1}, waypoints={})",
            self.route.length_m,
            self.route.waypoints.len()
        )
    }
}

/// A stepped world: fixed 100 ms ticks, deterministic per seed.
#[pyclass(name = "Simulation", unsendable)]
struct PySimulation {
    map: TownMap,
    state: WorldState,
}

#[pymethods]
impl PySimulation {
    #[new]
    #[pyo3(signature = (town, density="Empty", seed=1, ego_spawn=0))]
    fn new(town: &PyTown, density: &str, seed: u64, ego_spawn: usize) -> PyResult<Self> {
        let density = parse_density(density)?;
        let state = spawn_scenario(&town.map, density, seed, ego_spawn)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PySimulation {
            map: town.map.clone(),
            state,
        })
    }

    /// Advance one tick; returns collision kinds reported this tick.
    fn step(&mut self, steer: f64, throttle: f64, brake: f64) -> Vec<String> {
        let control = ControlCommand::new(steer, throttle, brake);
        let (next, events) = step(&self.state, control, &self.map);
        self.state = next;
        events.iter().map(|e| format!("{:?}", e.kind)).collect()
    }

    /// Ego pose and speed: (x, y, heading, speed).
    fn ego(&self) -> (f64, f64, f64, f64) {
        (
            self.state.ego.pose.pos.x,
            self.state.ego.pose.pos.y,
            self.state.ego.pose.heading,
            self.state.ego.speed,
        )
    }

    #[getter]
    fn tick(&self) -> u64 {
        self.state.tick
    }

    #[getter]
    fn time_s(&self) -> f64 {
        self.state.time_s
    }

    fn npc_count(&self) -> usize {
        self.state.npcs.len()
    }

    fn pedestrian_count(&self) -> usize {
        self.state.pedestrians.len()
    }

    /// Render the ego-centric observation grid; returns (values, channels,
    /// height, width) with values flattened channel-major in [0, 1].
    #[pyo3(signature = (weather="ClearNoon", command=2))]
    fn render(&self, weather: &str, command: u8) -> PyResult<(Vec<f32>, usize, usize, usize)> {
        let weather = parse_weather(weather)?;
        let command = HighLevelCommand::from_code(command)
            .ok_or_else(|| PyValueError::new_err(format!("bad command code {command}")))?;
        let obs = render_observation(&self.state, &self.map, &weather, command);
        Ok((obs.grid, OBS_CHANNELS, OBS_HEIGHT, OBS_WIDTH))
    }
}

/// Evaluate the triangular steering impulse at time `t`.
#[pyfunction]
#[pyo3(name = "noise_value")]
fn py_noise_value(t0: f64, tau: f64, sigma: f64, gamma: f64, t: f64) -> f64 {
    noise_value(
        &NoiseImpulse {
            t0,
            tau,
            sigma,
            gamma,
        },
        t,
    )
}

/// Draw the per-second impulse schedule; returns (t0, tau, sigma, gamma) rows.
#[pyfunction]
#[pyo3(name = "noise_schedule")]
fn py_noise_schedule(duration_s: f64, seed: u64) -> Vec<(f64, f64, f64, f64)> {
    noise_schedule(duration_s, seed)
        .into_iter()
        .map(|i| (i.t0, i.tau, i.sigma, i.gamma))
        .collect()
}

/// Split a score matrix (rows = init seeds, cols = sampling seeds) into
/// (total, within_init, between_data) population variances.
#[pyfunction]
#[pyo3(name = "variance_decomposition")]
fn py_variance_decomposition(matrix: Vec<Vec<f64>>) -> PyResult<(f64, f64, f64)> {
    drivelab_core::bench::variance_decomposition(&matrix)
        .map(|v| (v.total, v.within_init, v.between_data))
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Drive the privileged expert from one spawn point to another in an empty
/// or populated town; returns (success, collisions, red_crossings, ticks).
#[pyfunction]
#[pyo3(signature = (town, start, goal, density="Empty", seed=1, noise_seed=None))]
fn run_expert_episode(
    town: &PyTown,
    start: usize,
    goal: usize,
    density: &str,
    seed: u64,
    noise_seed: Option<u64>,
) -> PyResult<(bool, u32, u32, u64)> {
    let map = &town.map;
    let density = parse_density(density)?;
    let route =
        plan_route(map, start, goal).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let mut world = spawn_scenario(map, density, seed, start)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let cfg = ExpertConfig::default();
    let mut mem = ExpertState::new();
    let schedule = noise_seed.map(|s| noise_schedule(300.0, s)).unwrap_or_default();
    let goal_pos = *route.waypoints.last().unwrap();
    let limit = ((route.length_m / (10.0 / 3.6) + 10.0) / DT).ceil() as u64;
    let mut collisions = 0u32;
    let mut red = 0u32;
    for _ in 0..limit {
        let Ok((clean, _, _)) = expert_act(&world, &route, map, &cfg, &mut mem) else {
            break;
        };
        let offset = drivelab_core::expert::noise_offset(&schedule, world.time_s);
        let control = apply_noise(clean, offset);
        let (next, events) = step(&world, control, map);
        collisions += events.len() as u32;
        if let Some(c) = drivelab_core::sim::check_traffic_light_crossing(&world, &next, map) {
            if c.violation {
                red += 1;
            }
        }
        world = next;
        if world.ego.pose.pos.dist(goal_pos) < 3.0 {
            return Ok((true, collisions, red, world.tick));
        }
    }
    Ok((false, collisions, red, world.tick))
}

/// Load a checkpoint and run one forward pass; returns ((steer, throttle,
/// brake), predicted_speed_mps).
#[pyfunction]
fn checkpoint_predict(
    path: &str,
    grid: Vec<f64>,
    speed_mps: f64,
    command: u8,
) -> PyResult<((f64, f64, f64), f64)> {
    let (net, _, _) =
        load_checkpoint(std::path::Path::new(path)).map_err(|e| PyIOError::new_err(e.to_string()))?;
    let command = HighLevelCommand::from_code(command)
        .ok_or_else(|| PyValueError::new_err(format!("bad command code {command}")))?;
    let (action, speed) = predict(&net, &grid, speed_mps, command)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(((action[0], action[1], action[2]), speed))
}

#[pymodule]
fn drivelab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTown>()?;
    m.add_class::<PyRoute>()?;
    m.add_class::<PySimulation>()?;
    m.add_function(wrap_pyfunction!(py_noise_value, m)?)?;
    m.add_function(wrap_pyfunction!(py_noise_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(py_variance_decomposition, m)?)?;
    m.add_function(wrap_pyfunction!(run_expert_episode, m)?)?;
    m.add_function(wrap_pyfunction!(checkpoint_predict, m)?)?;
    m.add("GRID_CHANNELS", OBS_CHANNELS)?;
    m.add("GRID_HEIGHT", OBS_HEIGHT)?;
    m.add("GRID_WIDTH", OBS_WIDTH)?;
    m.add("TICK_SECONDS", DT)?;
    Ok(())
}
