//! Nonlinear continuum production model: velocity laws, WIP, and a
//! conservative semi-Lagrangian advection integrator with boundary influx.
//!
//! The plant state is a density profile on the unit production stage
//! `z ∈ [0, 1]`; the transport speed is spatially uniform and depends only on
//! the total work-in-progress `L(t) = ∫ρ dz`. Each step freezes the speed,
//! shifts the profile along the exact characteristic and refills the inflow
//! boundary from the influx.

use crate::error::{CoreError, Result};
use crate::scalar::{trapezoid, Scalar};

/// Which velocity law closes the model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VelocityVariant<T = f64> {
    /// Re-entrant law `v = v_max / (1 + c L)` with `c = α² + (1−α)²/m`.
    ReEntrant,
    /// Large-scale queueing law `v = v_max / (1 + L)`.
    Mm1,
    /// Affine clearing law `v = v0 (1 − L / L_max)`.
    Linear { empty_speed: T, max_load: T },
}

/// Parameters of the WIP-dependent velocity law.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityParams<T = f64> {
    v_max: T,
    alpha: T,
    stations: u32,
    variant: VelocityVariant<T>,
}

impl<T: Scalar> VelocityParams<T> {
    /// Re-entrant line with maximum speed `v_max`, re-entrant factor `alpha`
    /// and `stations` workstation groups.
    pub fn re_entrant(v_max: T, alpha: T, stations: u32) -> Result<Self, T> {
        let p = Self {
            v_max,
            alpha,
            stations,
            variant: VelocityVariant::ReEntrant,
        };
        p.validate()?;
        Ok(p)
    }

    /// M/M/1 queueing closure; only `v_max` matters.
    pub fn mm1(v_max: T) -> Result<Self, T> {
        let p = Self {
            v_max,
            alpha: T::one(),
            stations: 1,
            variant: VelocityVariant::Mm1,
        };
        p.validate()?;
        Ok(p)
    }

    /// Affine clearing law with empty-system speed `v0` and maximum load.
    pub fn linear(empty_speed: T, max_load: T) -> Result<Self, T> {
        let p = Self {
            v_max: empty_speed,
            alpha: T::one(),
            stations: 1,
            variant: VelocityVariant::Linear {
                empty_speed,
                max_load,
            },
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<(), T> {
        if !(self.v_max > T::zero()) {
            return Err(CoreError::InvalidParams(format!(
                "v_max must be positive, got {}",
                self.v_max
            )));
        }
        if !(self.alpha >= T::zero() && self.alpha <= T::one()) {
            return Err(CoreError::InvalidParams(format!(
                "alpha must satisfy 0 <= alpha <= 1, got {}",
                self.alpha
            )));
        }
        if self.stations == 0 {
            return Err(CoreError::InvalidParams(
                "workstation count must be at least 1".into(),
            ));
        }
        if let VelocityVariant::Linear {
            empty_speed,
            max_load,
        } = self.variant
        {
            if !(empty_speed > T::zero()) || !(max_load > T::zero()) {
                return Err(CoreError::InvalidParams(format!(
                    "linear law requires v0 > 0 and L_max > 0, got v0 = {empty_speed}, L_max = {max_load}"
                )));
            }
        }
        Ok(())
    }

    pub fn v_max(&self) -> T {
        self.v_max
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn stations(&self) -> u32 {
        self.stations
    }

    pub fn variant(&self) -> &VelocityVariant<T> {
        &self.variant
    }

    /// Congestion factor `c = α² + (1−α)²/m` (1 for the M/M/1 law).
    pub fn congestion(&self) -> T {
        match self.variant {
            VelocityVariant::ReEntrant => {
                let a = self.alpha;
                a * a + (T::one() - a) * (T::one() - a) / T::of_usize(self.stations as usize)
            }
            VelocityVariant::Mm1 => T::one(),
            VelocityVariant::Linear { .. } => T::one(),
        }
    }

    /// Speed of the empty line; the global bound on the transport speed.
    pub fn max_speed(&self) -> T {
        match self.variant {
            VelocityVariant::Linear { empty_speed, .. } => empty_speed,
            _ => self.v_max,
        }
    }

    /// Throughput capacity `sup_L v(L)·L` (infeasible flux threshold).
    pub fn capacity(&self) -> T {
        match self.variant {
            VelocityVariant::ReEntrant => self.v_max / self.congestion(),
            VelocityVariant::Mm1 => self.v_max,
            VelocityVariant::Linear {
                empty_speed,
                max_load,
            } => empty_speed * max_load / T::of(4.0),
        }
    }
}

/// Transport speed for total load `L`.
pub fn velocity<T: Scalar>(params: &VelocityParams<T>, load: T) -> Result<T, T> {
    debug_assert!(load >= T::zero() || load.is_nan());
    match params.variant {
        VelocityVariant::ReEntrant => {
            Ok(params.v_max / (T::one() + params.congestion() * load))
        }
        VelocityVariant::Mm1 => Ok(params.v_max / (T::one() + load)),
        VelocityVariant::Linear {
            empty_speed,
            max_load,
        } => {
            if load >= max_load {
                Err(CoreError::NonPositiveVelocity { load, max_load })
            } else {
                Ok(empty_speed * (T::one() - load / max_load))
            }
        }
    }
}

/// Uniform steady density solving `v(ρ̄)·ρ̄ = flux` for the hyperbolic laws.
pub fn steady_density_for_flux<T: Scalar>(params: &VelocityParams<T>, flux: T) -> Result<T, T> {
    if !(flux > T::zero()) {
        return Err(CoreError::InvalidParams(format!(
            "flux must be positive, got {flux}"
        )));
    }
    let c = match params.variant {
        VelocityVariant::ReEntrant => params.congestion(),
        VelocityVariant::Mm1 => T::one(),
        VelocityVariant::Linear { .. } => {
            return Err(CoreError::InvalidParams(
                "steady density is defined for the re-entrant and M/M/1 laws".into(),
            ))
        }
    };
    let headroom = params.v_max - c * flux;
    if headroom <= T::zero() {
        return Err(CoreError::InfeasibleFlux {
            flux,
            capacity: params.v_max / c,
        });
    }
    Ok(flux / headroom)
}

/// Density samples at `z_i = i/N` over the unit stage interval.
///
/// Plant entry points check nonnegativity; deviation profiles built for the
/// linearized model may carry signed samples.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField<T = f64> {
    values: Vec<T>,
}

impl<T: Scalar> DensityField<T> {
    /// Field from raw samples (at least two, finite); sign is not checked.
    pub fn from_samples(values: Vec<T>) -> Result<Self, T> {
        if values.len() < 2 {
            return Err(CoreError::InvalidParams(
                "a density field needs at least two samples".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidParams(
                "density samples must be finite".into(),
            ));
        }
        Ok(Self { values })
    }

    /// Field from samples that must all be nonnegative.
    pub fn nonnegative(values: Vec<T>) -> Result<Self, T> {
        let field = Self::from_samples(values)?;
        field.check_nonnegative()?;
        Ok(field)
    }

    /// Constant field on an `n`-cell grid.
    pub fn uniform(n_cells: usize, value: T) -> Result<Self, T> {
        if n_cells == 0 {
            return Err(CoreError::InvalidParams("grid needs at least one cell".into()));
        }
        Ok(Self {
            values: vec![value; n_cells + 1],
        })
    }

    /// Field sampled from `f(z_i)` on an `n`-cell grid.
    pub fn from_fn(n_cells: usize, f: impl Fn(T) -> T) -> Result<Self, T> {
        if n_cells == 0 {
            return Err(CoreError::InvalidParams("grid needs at least one cell".into()));
        }
        let dz = T::one() / T::of_usize(n_cells);
        Ok(Self {
            values: (0..=n_cells).map(|i| f(T::of_usize(i) * dz)).collect(),
        })
    }

    pub(crate) fn check_nonnegative(&self) -> Result<(), T> {
        if self.values.iter().any(|v| *v < T::zero()) {
            return Err(CoreError::InvalidParams(
                "density samples must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.values.len() - 1
    }

    pub fn dz(&self) -> T {
        T::one() / T::of_usize(self.n_cells())
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut Vec<T> {
        &mut self.values
    }

    /// Sample at the inflow boundary `z = 0`.
    pub fn inflow(&self) -> T {
        self.values[0]
    }

    /// Sample at the outflow boundary `z = 1`.
    pub fn outflow(&self) -> T {
        *self.values.last().unwrap()
    }
}

/// Total work-in-progress `L = ∫₀¹ ρ dz` by trapezoidal quadrature.
pub fn wip<T: Scalar>(field: &DensityField<T>) -> T {
    trapezoid(field.values(), field.dz())
}

/// Per-step scalar records of a simulation run.
///
/// Entries are at step ends; index 0 holds the initial values.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries<T = f64> {
    pub times: Vec<T>,
    pub influx: Vec<T>,
    pub outflux: Vec<T>,
    pub wip: Vec<T>,
    pub velocity: Vec<T>,
    pub tracking_error: Option<Vec<T>>,
}

impl<T: Scalar> TimeSeries<T> {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            times: Vec::with_capacity(n),
            influx: Vec::with_capacity(n),
            outflux: Vec::with_capacity(n),
            wip: Vec::with_capacity(n),
            velocity: Vec::with_capacity(n),
            tracking_error: None,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub(crate) fn push(&mut self, time: T, influx: T, outflux: T, wip: T, velocity: T) {
        self.times.push(time);
        self.influx.push(influx);
        self.outflux.push(outflux);
        self.wip.push(wip);
        self.velocity.push(velocity);
    }
}

/// Allow `dt` to sit exactly on the resolution bound despite rounding.
fn resolution_slack<T: Scalar>() -> T {
    T::of(1.0 + 1e-9)
}

/// Number of whole steps covering `[0, t_end]`.
pub(crate) fn step_count<T: Scalar>(t_end: T, dt: T) -> Result<usize, T> {
    if !(dt > T::zero()) || !(t_end > T::zero()) {
        return Err(CoreError::InvalidParams(format!(
            "horizon and step must be positive, got T = {t_end}, dt = {dt}"
        )));
    }
    let raw = (t_end / dt).to_f64().unwrap();
    let steps = if (raw - raw.round()).abs() < 1e-9 * raw.max(1.0) {
        raw.round() as usize
    } else {
        raw.ceil() as usize
    };
    Ok(steps.max(1))
}

/// One reusable semi-Lagrangian integrator for the nonlinear plant.
///
/// The speed is frozen over each step at its start-of-step value; the profile
/// is shifted right by `v·dt` with linear interpolation and the uncovered
/// inflow samples are refilled from `u(τ)/v` at their characteristic entry
/// times.
pub struct NonlinearStepper<'p, T: Scalar = f64> {
    params: &'p VelocityParams<T>,
    field: DensityField<T>,
    scratch: Vec<T>,
    time: T,
    dt: T,
    dz: T,
    load: T,
    speed: T,
}

/// Post-step scalar record.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord<T = f64> {
    pub time: T,
    pub outflux: T,
    pub wip: T,
    pub velocity: T,
}

impl<'p, T: Scalar> NonlinearStepper<'p, T> {
    pub fn new(params: &'p VelocityParams<T>, initial: DensityField<T>, dt: T) -> Result<Self, T> {
        initial.check_nonnegative()?;
        let dz = initial.dz();
        let bound = dz / params.max_speed();
        if dt > bound * resolution_slack() {
            return Err(CoreError::ResolutionViolation { dt, bound });
        }
        if !(dt > T::zero()) {
            return Err(CoreError::InvalidParams(format!(
                "time step must be positive, got {dt}"
            )));
        }
        let load = wip(&initial);
        let speed = velocity(params, load)?;
        let scratch = vec![T::zero(); initial.values().len()];
        Ok(Self {
            params,
            field: initial,
            scratch,
            time: T::zero(),
            dt,
            dz,
            load,
            speed,
        })
    }

    pub fn time(&self) -> T {
        self.time
    }

    pub fn field(&self) -> &DensityField<T> {
        &self.field
    }

    pub fn load(&self) -> T {
        self.load
    }

    /// Speed that will carry the next step.
    pub fn speed(&self) -> T {
        self.speed
    }

    /// Outflux `y = v·ρ(1)` at the current record.
    pub fn outflux(&self) -> T {
        self.speed * self.field.outflow()
    }

    /// Advance one step, drawing boundary values from `influx(τ)`.
    pub fn step(&mut self, influx: &mut dyn FnMut(T) -> T) -> Result<StepRecord<T>, T> {
        let v = self.speed;
        let shift = v * self.dt;
        let mut theta = shift / self.dz;
        if theta > T::one() {
            // Rounding can push v·dt a hair over one cell; the resolution
            // check has already bounded it.
            debug_assert!(theta < T::one() + T::of(1e-6));
            theta = T::one();
        }
        let t_next = self.time + self.dt;

        let values = self.field.values();
        let n = values.len() - 1;
        // Interior: foot point z_i − v·dt lands in [z_{i−1}, z_i].
        for i in (1..=n).rev() {
            self.scratch[i] = theta * values[i - 1] + (T::one() - theta) * values[i];
        }
        // Inflow fill: characteristics entering through z = 0 carry u(τ)/v.
        let mut i = 0usize;
        loop {
            let z = T::of_usize(i) * self.dz;
            if z >= shift && i > 0 {
                break;
            }
            let entry_time = t_next - z / v;
            let u = influx(entry_time);
            if u < T::zero() {
                return Err(CoreError::NegativeInflux {
                    time: entry_time,
                    value: u,
                });
            }
            self.scratch[i] = u / v;
            i += 1;
            if i > n {
                break;
            }
        }

        std::mem::swap(&mut self.field.values, &mut self.scratch);
        self.time = t_next;
        self.load = wip(&self.field);
        self.speed = velocity(self.params, self.load)?;
        Ok(StepRecord {
            time: self.time,
            outflux: self.outflux(),
            wip: self.load,
            velocity: self.speed,
        })
    }
}

/// Run the nonlinear plant under the influx `u(t)` over `[0, t_end]`.
pub fn simulate_nonlinear<T: Scalar>(
    params: &VelocityParams<T>,
    rho0: &DensityField<T>,
    influx: impl Fn(T) -> T,
    t_end: T,
    dt: T,
) -> Result<(TimeSeries<T>, DensityField<T>), T> {
    let steps = step_count(t_end, dt)?;
    let mut stepper = NonlinearStepper::new(params, rho0.clone(), dt)?;
    let mut series = TimeSeries::with_capacity(steps + 1);

    let u0 = influx(T::zero());
    if u0 < T::zero() {
        return Err(CoreError::NegativeInflux {
            time: T::zero(),
            value: u0,
        });
    }
    series.push(
        T::zero(),
        u0,
        stepper.outflux(),
        stepper.load(),
        stepper.speed(),
    );

    let mut u_fn = |t: T| influx(t);
    for _ in 0..steps {
        let rec = stepper.step(&mut u_fn)?;
        series.push(rec.time, influx(rec.time), rec.outflux, rec.wip, rec.velocity);
    }
    Ok((series, stepper.field))
}
