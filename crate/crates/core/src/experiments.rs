//! The mini-fab step-demand scenario and reusable closed-loop experiment
//! harnesses with metrics.

use rayon::prelude::*;

use crate::control::CostWeights;
use crate::error::{CoreError, Result};
use crate::linear::build_ladder;
use crate::regulator::{build_staged_controller, run_tracking, DemandSignal, TrackingRun};
use crate::scalar::Scalar;
use crate::transport::{steady_density_for_flux, DensityField, TimeSeries, VelocityParams};

/// Mini-fab plant: six processing steps on three workstation groups, half of
/// the processing time re-entrant, one unit per six hours when empty.
pub fn minifab_params<T: Scalar>() -> VelocityParams<T> {
    VelocityParams::re_entrant(T::of(4.0), T::half(), 3).expect("mini-fab parameters are valid")
}

/// The step-demand scenario: hold 4 units/day, then track 60/11 units/day.
#[derive(Debug, Clone, PartialEq)]
pub struct MinifabScenario<T = f64> {
    pub params: VelocityParams<T>,
    pub initial_flux: T,
    pub demand_rate: T,
    pub d: usize,
}

impl<T: Scalar> MinifabScenario<T> {
    pub fn new(d: usize) -> Result<Self, T> {
        if d < 2 {
            return Err(CoreError::InvalidLadder(format!(
                "at least two ladder rungs are needed, got d = {d}"
            )));
        }
        Ok(Self {
            params: minifab_params(),
            initial_flux: T::of(4.0),
            demand_rate: T::of(60.0 / 11.0),
            d,
        })
    }

    /// Weights used for the replication runs. The state weight is strong
    /// enough that the deviation feedback absorbs the frozen-velocity bias
    /// of the last stage; R keeps the control bounded.
    pub fn default_weights() -> CostWeights<T> {
        CostWeights::constant(T::of(200.0), T::one()).expect("valid default weights")
    }
}

/// Grid, horizon and measurement configuration of a tracking experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridConfig<T = f64> {
    pub n: usize,
    pub t_end: T,
    /// Demand step time: the controller engages here.
    pub engage_time: T,
    /// Settling band as a fraction of the demand rate.
    pub band_fraction: T,
}

impl<T: Scalar> Default for GridConfig<T> {
    fn default() -> Self {
        Self {
            n: 200,
            t_end: T::of(10.0),
            engage_time: T::one(),
            band_fraction: T::of(0.02),
        }
    }
}

/// Scalar summary of one tracking run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingMetrics<T = f64> {
    /// Drop from the pre-step outflux to its post-step minimum (positive
    /// when the inverse response is present).
    pub dip_magnitude: T,
    /// First time after which |e(t)| stays inside the band; `None` when the
    /// run never settles.
    pub settling_time: Option<T>,
    /// |e(T)| at the end of the run.
    pub terminal_error: T,
    /// Fraction of control evaluations hitting the nonnegativity clamp.
    pub clamp_fraction: T,
}

/// Metrics from a finished run.
pub fn compute_metrics<T: Scalar>(
    run: &TrackingRun<T>,
    engage_time: T,
    demand_rate: T,
    band_fraction: T,
) -> TrackingMetrics<T> {
    let series = &run.series;
    let errors = series
        .tracking_error
        .as_ref()
        .expect("tracking runs always record the error");
    let band = band_fraction * demand_rate;

    let mut pre_step = series.outflux[0];
    let mut post_min = T::infinity();
    for (k, &t) in series.times.iter().enumerate() {
        if t < engage_time {
            pre_step = series.outflux[k];
        } else {
            post_min = post_min.min(series.outflux[k]);
        }
    }

    let mut settling_time = None;
    for k in (0..series.len()).rev() {
        if errors[k].abs() > band {
            break;
        }
        if series.times[k] >= engage_time {
            settling_time = Some(series.times[k]);
        }
    }

    TrackingMetrics {
        dip_magnitude: pre_step - post_min,
        settling_time,
        terminal_error: errors.last().unwrap().abs(),
        clamp_fraction: if run.steps == 0 {
            T::zero()
        } else {
            T::of_usize(run.clamped_steps) / T::of_usize(run.steps)
        },
    }
}

/// Full step-demand experiment: build the ladder 1.5 → 2.5, solve per-stage
/// kernels and regulators, hold the nominal influx until the step time, then
/// run the staged law against the nonlinear plant.
pub fn run_step_demand<T: Scalar>(
    d: usize,
    weights: &CostWeights<T>,
    cfg: &GridConfig<T>,
) -> Result<(TimeSeries<T>, TrackingMetrics<T>), T> {
    let scenario = MinifabScenario::new(d)?;
    let params = &scenario.params;
    // Reject over-capacity demand at construction, not mid-run.
    let rho_start = steady_density_for_flux(params, scenario.initial_flux)?;
    let rho_target = steady_density_for_flux(params, scenario.demand_rate)?;
    let ladder = build_ladder(params, rho_start, rho_target, d)?;

    let controller = build_staged_controller(
        params,
        ladder,
        weights,
        DemandSignal::Step,
        cfg.n,
        cfg.engage_time,
        T::of(1e-9) * weights.q0().max(T::one()),
        200 * cfg.n.max(64),
    )?;
    let rho0 = DensityField::uniform(cfg.n, rho_start)?;
    let dt = rho0.dz() / params.max_speed();
    let run = run_tracking(params, &controller, &rho0, cfg.t_end, dt)?;
    let metrics = compute_metrics(&run, cfg.engage_time, controller.demand_rate, cfg.band_fraction);
    Ok((run.series, metrics))
}

/// One row of a sweep table.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow<T = f64> {
    pub d: usize,
    pub n: usize,
    pub q0: T,
    pub r: T,
    pub outcome: std::result::Result<TrackingMetrics<T>, String>,
}

/// Cartesian product of step-demand runs over ladder depths, grid sizes and
/// weight settings. Failures become labeled rows instead of aborting the
/// sweep; row order is the deterministic product order regardless of how the
/// runs are scheduled.
pub fn sweep<T: Scalar>(
    ds: &[usize],
    ns: &[usize],
    weights: &[CostWeights<T>],
    cfg: &GridConfig<T>,
    threads: Option<usize>,
) -> Vec<SweepRow<T>> {
    let combos: Vec<(usize, usize, CostWeights<T>)> = ds
        .iter()
        .flat_map(|&d| {
            ns.iter()
                .flat_map(move |&n| weights.iter().map(move |w| (d, n, *w)))
        })
        .collect();

    let run_one = |&(d, n, w): &(usize, usize, CostWeights<T>)| -> SweepRow<T> {
        let cfg_n = GridConfig { n, ..*cfg };
        let outcome = run_step_demand(d, &w, &cfg_n)
            .map(|(_, metrics)| metrics)
            .map_err(|e| e.to_string());
        SweepRow {
            d,
            n,
            q0: w.q0(),
            r: w.input,
            outcome,
        }
    };

    match threads {
        Some(1) => combos.iter().map(run_one).collect(),
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .expect("thread pool");
            pool.install(|| combos.par_iter().map(run_one).collect())
        }
        None => combos.par_iter().map(run_one).collect(),
    }
}

/// Metrics table header, fixed column order.
pub const METRICS_CSV_HEADER: &str = "d,N,q0,R,dip,settling,terminal_error,clamp_fraction";

/// Render sweep rows as CSV. Failed rows carry `error:<label>` in the `dip`
/// column and leave the remaining metric columns empty.
pub fn metrics_csv<T: Scalar>(rows: &[SweepRow<T>]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for row in rows {
        match &row.outcome {
            Ok(m) => {
                let settling = m
                    .settling_time
                    .map(|t| format!("{t}"))
                    .unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    row.d,
                    row.n,
                    row.q0,
                    row.r,
                    m.dip_magnitude,
                    settling,
                    m.terminal_error,
                    m.clamp_fraction
                ));
            }
            Err(label) => {
                out.push_str(&format!(
                    "{},{},{},{},error:{},,,\n",
                    row.d,
                    row.n,
                    row.q0,
                    row.r,
                    label.replace([',', '\n'], ";")
                ));
            }
        }
    }
    out
}
