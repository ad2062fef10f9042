//! Frozen-velocity transport model around a set point and the staging ladder
//! that bridges the current operating density to the demand-implied one.

use crate::error::{CoreError, Result};
use crate::scalar::{trapezoid, Scalar};
use crate::transport::{step_count, velocity, DensityField, TimeSeries, VelocityParams};

/// Linearized model: constant transport speed `v(ρ̄)` around set point `ρ̄`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearModel<T = f64> {
    /// Frozen transport speed `v(ρ̄)`.
    pub speed: T,
    /// Set-point density the model was linearized around.
    pub set_point: T,
}

impl<T: Scalar> LinearModel<T> {
    pub fn new(speed: T, set_point: T) -> Result<Self, T> {
        if !(speed > T::zero()) {
            return Err(CoreError::InvalidParams(format!(
                "linear model speed must be positive, got {speed}"
            )));
        }
        Ok(Self { speed, set_point })
    }
}

/// First-order model around `ρ̄`: only the frozen speed survives truncation.
pub fn linearize<T: Scalar>(params: &VelocityParams<T>, rho_bar: T) -> Result<LinearModel<T>, T> {
    if rho_bar < T::zero() {
        return Err(CoreError::InvalidParams(format!(
            "set point must be nonnegative, got {rho_bar}"
        )));
    }
    LinearModel::new(velocity(params, rho_bar)?, rho_bar)
}

/// Arithmetic ladder of linearization set points `ρ̄₁ < … < ρ̄_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageLadder<T = f64> {
    levels: Vec<T>,
    density_step: T,
    speeds: Vec<T>,
}

impl<T: Scalar> StageLadder<T> {
    /// Number of rungs `d`.
    pub fn d(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[T] {
        &self.levels
    }

    /// Uniform step `Δρ` between consecutive rungs.
    pub fn density_step(&self) -> T {
        self.density_step
    }

    /// Frozen speed `v(ρ̄_k)` at each rung.
    pub fn stage_speeds(&self) -> &[T] {
        &self.speeds
    }

    pub fn top(&self) -> T {
        *self.levels.last().unwrap()
    }
}

/// Build the `d`-rung ladder from `rho_start` to `rho_target`.
pub fn build_ladder<T: Scalar>(
    params: &VelocityParams<T>,
    rho_start: T,
    rho_target: T,
    d: usize,
) -> Result<StageLadder<T>, T> {
    if d < 2 {
        return Err(CoreError::InvalidLadder(format!(
            "at least two rungs are needed, got d = {d}"
        )));
    }
    if !(rho_start > T::zero()) || rho_target <= rho_start {
        return Err(CoreError::InvalidLadder(format!(
            "need 0 < start < target, got start = {rho_start}, target = {rho_target}"
        )));
    }
    let density_step = (rho_target - rho_start) / T::of_usize(d - 1);
    let levels: Vec<T> = (0..d)
        .map(|k| rho_start + T::of_usize(k) * density_step)
        .collect();
    let speeds = levels
        .iter()
        .map(|&l| velocity(params, l))
        .collect::<Result<Vec<T>, T>>()?;
    debug_assert!(speeds.windows(2).all(|w| w[0] > w[1]));
    Ok(StageLadder {
        levels,
        density_step,
        speeds,
    })
}

/// Constant-speed semi-Lagrangian integrator for deviation profiles.
pub struct LinearStepper<T: Scalar = f64> {
    speed: T,
    field: DensityField<T>,
    scratch: Vec<T>,
    time: T,
    dt: T,
    theta: T,
}

impl<T: Scalar> LinearStepper<T> {
    pub fn new(model: &LinearModel<T>, initial: DensityField<T>, dt: T) -> Result<Self, T> {
        let dz = initial.dz();
        let bound = dz / model.speed;
        if dt > bound * T::of(1.0 + 1e-9) {
            return Err(CoreError::ResolutionViolation { dt, bound });
        }
        if !(dt > T::zero()) {
            return Err(CoreError::InvalidParams(format!(
                "time step must be positive, got {dt}"
            )));
        }
        let mut theta = model.speed * dt / dz;
        if theta > T::one() {
            theta = T::one();
        }
        let scratch = vec![T::zero(); initial.values().len()];
        Ok(Self {
            speed: model.speed,
            field: initial,
            scratch,
            time: T::zero(),
            dt,
            theta,
        })
    }

    pub fn time(&self) -> T {
        self.time
    }

    pub fn field(&self) -> &DensityField<T> {
        &self.field
    }

    /// Deviation outflux `ỹ = v̄·ρ̃(1)`.
    pub fn outflux(&self) -> T {
        self.speed * self.field.outflow()
    }

    /// Advance one step with inflow `ρ̃(0, τ) = ũ(τ)/v̄`.
    pub fn step(&mut self, control: &mut dyn FnMut(T) -> T) {
        let values = self.field.values();
        let n = values.len() - 1;
        let theta = self.theta;
        for i in (1..=n).rev() {
            self.scratch[i] = theta * values[i - 1] + (T::one() - theta) * values[i];
        }
        let t_next = self.time + self.dt;
        self.scratch[0] = control(t_next) / self.speed;
        std::mem::swap(self.field.values_mut(), &mut self.scratch);
        self.time = t_next;
    }
}

/// Largest deviation-output mismatch between the nonlinear plant and its
/// frozen-velocity linearization, for a run driven by `influx_deviation`.
///
/// Both systems start at the uniform set point. The deviation input fed to
/// the linear model is the one measured on the nonlinear run,
/// `ũ(t) = u(t) − ṽ(t)·ρ̄`, and the nonlinear deviation output is
/// `ỹ(t) = y(t) − ṽ(t)·ρ̄`, so the comparison isolates the first-order
/// Taylor truncation of the velocity: the returned gap shrinks quadratically
/// with the deviation amplitude.
pub fn linearization_gap<T: Scalar>(
    params: &VelocityParams<T>,
    rho_bar: T,
    influx_deviation: impl Fn(T) -> T,
    t_end: T,
    n: usize,
) -> Result<T, T> {
    let model = linearize(params, rho_bar)?;
    let rho0 = DensityField::uniform(n, rho_bar)?;
    let dt = rho0.dz() / params.max_speed();
    let nominal = model.speed * rho_bar;
    let (nonlinear, _) = crate::transport::simulate_nonlinear(
        params,
        &rho0,
        |t| nominal + influx_deviation(t),
        t_end,
        dt,
    )?;
    let measured_dev: Vec<T> = nonlinear
        .influx
        .iter()
        .zip(&nonlinear.velocity)
        .map(|(&u, &v)| u - v * rho_bar)
        .collect();
    let dev0 = DensityField::uniform(n, T::zero())?;
    let sampled = |t: T| {
        let k = (t / dt).round().to_f64().unwrap() as usize;
        measured_dev[k.min(measured_dev.len() - 1)]
    };
    let (linearized, _) = simulate_linear(&model, &dev0, sampled, t_end, dt)?;
    let gap = nonlinear
        .outflux
        .iter()
        .zip(&nonlinear.velocity)
        .zip(&linearized.outflux)
        .map(|((&y, &v), &yt)| (y - v * rho_bar - yt).abs())
        .fold(T::zero(), T::max);
    Ok(gap)
}

/// Run the linearized model under the boundary control `ũ(t)`.
///
/// Deviation samples may be negative; records hold `ũ`, `ỹ`, the deviation of
/// the WIP and the constant stage speed.
pub fn simulate_linear<T: Scalar>(
    model: &LinearModel<T>,
    rho_tilde0: &DensityField<T>,
    u_tilde: impl Fn(T) -> T,
    t_end: T,
    dt: T,
) -> Result<(TimeSeries<T>, DensityField<T>), T> {
    let steps = step_count(t_end, dt)?;
    let mut stepper = LinearStepper::new(model, rho_tilde0.clone(), dt)?;
    let mut series = TimeSeries::with_capacity(steps + 1);
    series.push(
        T::zero(),
        u_tilde(T::zero()),
        stepper.outflux(),
        trapezoid(stepper.field().values(), rho_tilde0.dz()),
        model.speed,
    );
    let mut ctrl = |t: T| u_tilde(t);
    for _ in 0..steps {
        stepper.step(&mut ctrl);
        series.push(
            stepper.time(),
            u_tilde(stepper.time()),
            stepper.outflux(),
            trapezoid(stepper.field().values(), rho_tilde0.dz()),
            model.speed,
        );
    }
    Ok((series, stepper.field))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::simulate_nonlinear;
    use approx::assert_abs_diff_eq;

    fn minifab() -> VelocityParams {
        VelocityParams::re_entrant(4.0, 0.5, 3).unwrap()
    }

    #[test]
    fn linearize_reproduces_the_stage_speeds() {
        let p = minifab();
        assert_abs_diff_eq!(linearize(&p, 1.5).unwrap().speed, 8.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(linearize(&p, 2.0).unwrap().speed, 2.4, epsilon = 1e-12);
        assert_eq!(linearize(&p, 0.0).unwrap().speed, 4.0);
    }

    #[test]
    fn ladder_levels_and_speeds() {
        let p = minifab();
        let two = build_ladder(&p, 1.5, 2.5, 2).unwrap();
        assert_eq!(two.density_step(), 1.0);
        assert_eq!(two.levels(), &[1.5, 2.5]);
        assert_abs_diff_eq!(two.stage_speeds()[0], 8.0 / 3.0, epsilon = 1e-12);

        let three = build_ladder(&p, 1.5, 2.5, 3).unwrap();
        assert_eq!(three.density_step(), 0.5);
        assert_eq!(three.levels(), &[1.5, 2.0, 2.5]);
        assert_abs_diff_eq!(three.stage_speeds()[1], 2.4, epsilon = 1e-12);
        assert_abs_diff_eq!(three.stage_speeds()[2], 24.0 / 11.0, epsilon = 1e-12);

        let eleven = build_ladder(&p, 1.5, 2.5, 11).unwrap();
        assert_eq!(eleven.d(), 11);
        assert_abs_diff_eq!(eleven.density_step(), 0.1, epsilon = 1e-15);
    }

    #[test]
    fn ladder_counting_rule_is_exact() {
        let p = minifab();
        let ladder = build_ladder(&p, 1.5, 2.5, 7).unwrap();
        let span = ladder.top() - ladder.levels()[0];
        let d_rebuilt = (span / ladder.density_step()).round() as usize + 1;
        assert_eq!(d_rebuilt, ladder.d());
        assert_abs_diff_eq!(
            ladder.density_step() * 6.0,
            span,
            epsilon = 1e-15
        );
    }

    #[test]
    fn ladder_rejects_bad_inputs() {
        let p = minifab();
        assert!(matches!(
            build_ladder(&p, 1.5, 2.5, 1),
            Err(CoreError::InvalidLadder(_))
        ));
        assert!(matches!(
            build_ladder(&p, 2.5, 1.5, 3),
            Err(CoreError::InvalidLadder(_))
        ));
    }

    #[test]
    fn zero_data_gives_zero_output() {
        let model = LinearModel::new(8.0 / 3.0, 1.5).unwrap();
        let zero = DensityField::uniform(100, 0.0).unwrap();
        let dt = zero.dz() / model.speed;
        let (series, _) = simulate_linear(&model, &zero, |_| 0.0, 1.0, dt).unwrap();
        assert!(series.outflux.iter().all(|&y| y == 0.0));
    }

    #[test]
    fn step_control_arrives_after_one_transit() {
        let model = LinearModel::new(8.0 / 3.0, 1.5).unwrap();
        let zero = DensityField::uniform(200, 0.0).unwrap();
        let dt = zero.dz() / model.speed;
        let du = model.speed * 0.5;
        let (series, _) = simulate_linear(&model, &zero, |_| du, 1.0, dt).unwrap();
        let transit = 1.0 / model.speed;
        for (k, &y) in series.outflux.iter().enumerate() {
            let t = series.times[k];
            if t < transit {
                assert_abs_diff_eq!(y, 0.0, epsilon = 1e-12);
            } else if t > transit + 2.0 * dt {
                assert_abs_diff_eq!(y, du, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn impulse_transit_delay_in_steps() {
        let model = LinearModel::new(2.0, 1.0).unwrap();
        let zero: DensityField = DensityField::uniform(150, 0.0).unwrap();
        let dt = zero.dz() / model.speed;
        let (series, _) =
            simulate_linear(&model, &zero, |t| if t < 3.0 * dt { 1.0 } else { 0.0 }, 1.0, dt)
                .unwrap();
        let first = series.outflux.iter().position(|&y| y.abs() > 1e-12).unwrap();
        let expected = 1.0 / model.speed;
        assert!((series.times[first] - expected).abs() <= 2.0 * dt);
    }

    #[test]
    fn periodic_profile_follows_the_characteristics() {
        // dt chosen off the cell size so interpolation is actually exercised.
        let model = LinearModel::new(8.0 / 3.0, 1.5).unwrap();
        let n = 200;
        let two_pi = 2.0 * std::f64::consts::PI;
        let rho0 = DensityField::from_fn(n, |z: f64| (two_pi * z).sin()).unwrap();
        let dz = rho0.dz();
        let dt = 0.37 * dz / model.speed;
        let u = |t: f64| model.speed * (two_pi * (-model.speed * t)).sin();
        let (series, _) = simulate_linear(&model, &rho0, u, 0.9, dt).unwrap();
        let mut worst: f64 = 0.0;
        for (k, &y) in series.outflux.iter().enumerate() {
            let t = series.times[k];
            let exact = model.speed * (two_pi * (1.0 - model.speed * t)).sin();
            worst = worst.max((y - exact).abs());
        }
        assert!(worst < 35.0 * dz, "characteristic error {worst}");
    }

    #[test]
    fn advection_error_decays_at_first_order_under_refinement() {
        let model = LinearModel::new(2.0, 1.0).unwrap();
        let two_pi = 2.0 * std::f64::consts::PI;
        let err = |n: usize| -> f64 {
            let rho0 = DensityField::from_fn(n, |z: f64| (two_pi * z).sin()).unwrap();
            let dt = 0.37 * rho0.dz() / model.speed;
            let u = |t: f64| model.speed * (two_pi * (-model.speed * t)).sin();
            let (_, last) = simulate_linear(&model, &rho0, u, 1.0, dt).unwrap();
            let t_end = (1.0 / dt).ceil() * dt;
            last.values()
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let z = i as f64 * rho0.dz();
                    (v - (two_pi * (z - model.speed * t_end)).sin()).abs()
                })
                .fold(0.0, f64::max)
        };
        let e100 = err(100);
        let e200 = err(200);
        let e400 = err(400);
        assert!(e200 < 0.65 * e100, "refinement 100->200: {e100} -> {e200}");
        assert!(e400 < 0.65 * e200, "refinement 200->400: {e200} -> {e400}");
    }

    /// Deviation-variable mismatch between the nonlinear plant and the
    /// frozen-velocity model, for an influx pulse of amplitude ε.
    ///
    /// The deviation input and output carry the true velocity,
    /// `ũ = ṽ·ρ̃(0,t)` and `ỹ = ṽ·ρ̃(1,t)`; the linear model freezes ṽ at
    fn pulse_gap(n: usize, eps: f64) -> f64 {
        let p = minifab();
        let speed = linearize(&p, 1.5).unwrap().speed;
        let bump = move |t: f64| {
            if t < 0.5 {
                eps * speed * (std::f64::consts::PI * t / 0.5).sin().powi(2)
            } else {
                0.0
            }
        };
        linearization_gap(&p, 1.5, bump, 1.2, n).unwrap()
    }

    #[test]
    fn linearization_error_is_second_order_in_amplitude() {
        let mut eps = 0.4;
        for _ in 0..3 {
            let ratio = pulse_gap(200, eps) / pulse_gap(200, eps / 2.0);
            assert!(
                (3.2..=4.8).contains(&ratio),
                "expected quadratic scaling, eps = {eps}: ratio {ratio}"
            );
            eps /= 2.0;
        }
    }
}
