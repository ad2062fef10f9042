//! Demand tracking: exosystem signal models, the regulator equation solution
//! `m(z)`, the feedforward gain, and the staged control law driven against
//! the nonlinear plant.

use crate::control::{feedback_from_samples, solve_riccati_steady, CostWeights, RiccatiKernel};
use crate::error::{CoreError, Result};
use crate::linear::StageLadder;
use crate::scalar::{trapezoid_product, Scalar};
use crate::transport::{step_count, DensityField, NonlinearStepper, TimeSeries, VelocityParams};

/// One block of the signal-model generator: marginally stable by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExoBlock<T = f64> {
    /// 1×1 zero block: a constant (steplike) mode.
    Zero,
    /// 2×2 rotation generator `[[0, ω], [−ω, 0]]`: a sinusoidal mode.
    Rotation { omega: T },
}

impl<T: Scalar> ExoBlock<T> {
    fn dim(&self) -> usize {
        match self {
            ExoBlock::Zero => 1,
            ExoBlock::Rotation { .. } => 2,
        }
    }
}

/// Finite-dimensional signal generator `ẇ = S w`, `r(t) = q_r · w(t)`.
///
/// `S` is block diagonal with zero and rotation blocks, so every eigenvalue
/// sits on the imaginary axis and the reference stays bounded.
#[derive(Debug, Clone, PartialEq)]
pub struct Exosystem<T = f64> {
    blocks: Vec<ExoBlock<T>>,
    w0: Vec<T>,
    q_r: Vec<T>,
}

impl<T: Scalar> Exosystem<T> {
    pub fn new(blocks: Vec<ExoBlock<T>>, w0: Vec<T>, q_r: Vec<T>) -> Result<Self, T> {
        let dim: usize = blocks.iter().map(ExoBlock::dim).sum();
        if dim == 0 {
            return Err(CoreError::InvalidParams("exosystem needs at least one block".into()));
        }
        if w0.len() != dim || q_r.len() != dim {
            return Err(CoreError::DimensionMismatch(format!(
                "exosystem dimension {dim} does not match w0 ({}) / q_r ({})",
                w0.len(),
                q_r.len()
            )));
        }
        Ok(Self { blocks, w0, q_r })
    }

    /// Constant reference `r(t) = value` (one zero block).
    pub fn step_signal(value: T) -> Self {
        Self {
            blocks: vec![ExoBlock::Zero],
            w0: vec![T::one()],
            q_r: vec![value],
        }
    }

    pub fn dim(&self) -> usize {
        self.w0.len()
    }

    pub fn blocks(&self) -> &[ExoBlock<T>] {
        &self.blocks
    }

    pub fn w0(&self) -> &[T] {
        &self.w0
    }

    pub fn q_r(&self) -> &[T] {
        &self.q_r
    }

    /// Reference output `q_r · w(t)`.
    pub fn reference(&self, t: T) -> T {
        let w = exo_state(self, t);
        self.q_r.iter().zip(&w).map(|(&q, &wi)| q * wi).sum()
    }

    /// Dense `S` matrix, mostly for diagnostics and residual checks.
    pub fn dense_s(&self) -> Vec<Vec<T>> {
        let n = self.dim();
        let mut s = vec![vec![T::zero(); n]; n];
        let mut at = 0usize;
        for b in &self.blocks {
            if let ExoBlock::Rotation { omega } = b {
                s[at][at + 1] = *omega;
                s[at + 1][at] = -*omega;
            }
            at += b.dim();
        }
        s
    }
}

/// Signal-model state `w(t) = exp(S t) w0`, evaluated blockwise in closed
/// form: zero blocks stay constant, rotation blocks rotate by `ωt`.
pub fn exo_state<T: Scalar>(exo: &Exosystem<T>, t: T) -> Vec<T> {
    let mut w = Vec::with_capacity(exo.dim());
    let mut at = 0usize;
    for b in &exo.blocks {
        match b {
            ExoBlock::Zero => {
                w.push(exo.w0[at]);
            }
            ExoBlock::Rotation { omega } => {
                let (s, c) = (*omega * t).sin_cos();
                let (a, b) = (exo.w0[at], exo.w0[at + 1]);
                w.push(c * a + s * b);
                w.push(-s * a + c * b);
            }
        }
        at += b.dim();
    }
    w
}

/// Row-vector multiplication by `exp(S s)`, blockwise.
fn row_times_exp<T: Scalar>(exo: &Exosystem<T>, row: &[T], s: T) -> Vec<T> {
    let mut out = Vec::with_capacity(exo.dim());
    let mut at = 0usize;
    for b in &exo.blocks {
        match b {
            ExoBlock::Zero => out.push(row[at]),
            ExoBlock::Rotation { omega } => {
                // exp(S s) = [[cos, sin], [−sin, cos]] applied from the left
                // by a row vector.
                let (sn, cs) = (*omega * s).sin_cos();
                let (a, b) = (row[at], row[at + 1]);
                out.push(a * cs - b * sn);
                out.push(a * sn + b * cs);
            }
        }
        at += b.dim();
    }
    out
}

/// Solution of the regulator equations for one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedforwardSolution<T = f64> {
    /// Row vectors `m(z_i)`, one per grid node.
    pub m_of_z: Vec<Vec<T>>,
    /// Stage transport speed `v(ρ̄_k)`.
    pub speed: T,
    /// Feedforward gain `m_w`; `solve_regulator` seeds it with `m(0)` (the
    /// kernel-free value), [`feedforward_gain`] adds the kernel correction.
    pub gain: Vec<T>,
}

impl<T: Scalar> FeedforwardSolution<T> {
    pub fn n_cells(&self) -> usize {
        self.m_of_z.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.gain.len()
    }
}

/// Closed-form regulator solution `m(z) = (q_r / v̄) · exp(S (1−z)/v̄)` on an
/// `n`-cell grid; satisfies `v̄ m'(z) + m(z) S = 0` and `m(1) = q_r / v̄`.
pub fn solve_regulator<T: Scalar>(
    speed: T,
    exo: &Exosystem<T>,
    n: usize,
) -> Result<FeedforwardSolution<T>, T> {
    if !(speed > T::zero()) {
        return Err(CoreError::InvalidParams(format!(
            "stage speed must be positive, got {speed}"
        )));
    }
    if n < 2 {
        return Err(CoreError::InvalidParams("grid needs at least two cells".into()));
    }
    let boundary: Vec<T> = exo.q_r.iter().map(|&q| q / speed).collect();
    let dz = T::one() / T::of_usize(n);
    let m_of_z: Vec<Vec<T>> = (0..=n)
        .map(|i| {
            let z = T::of_usize(i) * dz;
            row_times_exp(exo, &boundary, (T::one() - z) / speed)
        })
        .collect();
    let gain = m_of_z[0].clone();
    Ok(FeedforwardSolution {
        m_of_z,
        speed,
        gain,
    })
}

/// Feedforward gain `m_w = (1/(v̄ R)) ∫ P(0,y) m(y) dy + m(0)`.
pub fn feedforward_gain<T: Scalar>(
    kernel: &RiccatiKernel<T>,
    regulator: &FeedforwardSolution<T>,
) -> Result<Vec<T>, T> {
    if kernel.n_cells() != regulator.n_cells() {
        return Err(CoreError::DimensionMismatch(format!(
            "kernel grid ({}) does not match regulator grid ({})",
            kernel.n_cells(),
            regulator.n_cells()
        )));
    }
    let dim = regulator.dim();
    let dz = kernel.dz();
    let row = kernel.feedback_row();
    let mut gain = Vec::with_capacity(dim);
    let mut component = vec![T::zero(); regulator.m_of_z.len()];
    for c in 0..dim {
        for (i, m) in regulator.m_of_z.iter().enumerate() {
            component[i] = m[c];
        }
        let integral = trapezoid_product(row, &component, dz);
        gain.push(integral / (regulator.speed * kernel.weights.input) + regulator.m_of_z[0][c]);
    }
    Ok(gain)
}

/// Everything one rung of the ladder needs to produce its control.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage<T = f64> {
    /// Set point `ρ̄_k`.
    pub level: T,
    /// Frozen speed `v(ρ̄_k)`.
    pub speed: T,
    pub kernel: RiccatiKernel<T>,
    pub feedforward: FeedforwardSolution<T>,
    pub exo: Exosystem<T>,
}

/// Staged tracking controller: one (kernel, feedforward) pair per rung
/// transition, switching on the exit density `ρ(1,t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StagedController<T = f64> {
    pub ladder: StageLadder<T>,
    pub stages: Vec<Stage<T>>,
    /// Controller stays at the nominal influx until this time.
    pub engage_time: T,
    /// Influx holding the initial steady state, `v(ρ̄₁)·ρ̄₁`.
    pub nominal_influx: T,
    /// Demand rate implied by the ladder top, `v(ρ̄_d)·ρ̄_d`.
    pub demand_rate: T,
    /// Sinusoidal demand modulation on top of the step (zero for pure steps).
    pub ripple: Option<(T, T)>,
}

impl<T: Scalar> StagedController<T> {
    /// Time-varying demand rate the run is measured against.
    pub fn reference_rate(&self, t: T) -> T {
        if t < self.engage_time {
            return self.nominal_influx;
        }
        let mut r = self.demand_rate;
        if let Some((amp, omega)) = self.ripple {
            r += amp * (omega * (t - self.engage_time)).sin();
        }
        r
    }

    fn validate(&self, n: usize) -> Result<(), T> {
        if self.stages.len() + 1 != self.ladder.d() {
            return Err(CoreError::InvalidParams(format!(
                "{} stages do not fit a {}-rung ladder",
                self.stages.len(),
                self.ladder.d()
            )));
        }
        for s in &self.stages {
            if s.kernel.n_cells() != n || s.feedforward.n_cells() != n {
                return Err(CoreError::DimensionMismatch(format!(
                    "stage grids (kernel {}, feedforward {}) do not match plant grid {}",
                    s.kernel.n_cells(),
                    s.feedforward.n_cells(),
                    n
                )));
            }
        }
        Ok(())
    }
}

/// The staged tracking law for one stage: nominal flux, optimal feedback on
/// the deviation from the stage set point, and exosystem feedforward. The
/// result is clamped at zero; the flag reports when clamping was active.
pub fn stage_control<T: Scalar>(
    stage: &Stage<T>,
    field: &DensityField<T>,
    w: &[T],
) -> Result<(T, bool), T> {
    if w.len() != stage.exo.dim() {
        return Err(CoreError::DimensionMismatch(format!(
            "exosystem state has {} entries, expected {}",
            w.len(),
            stage.exo.dim()
        )));
    }
    let deviation: Vec<T> = field.values().iter().map(|&v| v - stage.level).collect();
    let feedback = feedback_from_samples(&stage.kernel, &deviation)?;
    let feedforward: T = stage
        .feedforward
        .gain
        .iter()
        .zip(w)
        .map(|(&g, &wi)| g * wi)
        .sum();
    let raw = stage.speed * stage.level + feedback + stage.speed * feedforward;
    if raw < T::zero() {
        Ok((T::zero(), true))
    } else {
        Ok((raw, false))
    }
}

/// Closed-loop tracking run against the nonlinear plant.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingRun<T = f64> {
    pub series: TimeSeries<T>,
    /// Control evaluations where the nonnegativity clamp was active.
    pub clamped_steps: usize,
    /// Total applied control steps.
    pub steps: usize,
    /// Active stage index (0-based) at the end of the run.
    pub final_stage: usize,
}

/// Simulate the nonlinear plant under the staged law. The active stage
/// latches upward the first time `ρ(1,t) ≥ ρ̄_{k+1}`; ties advance; the
/// index never decreases.
pub fn run_tracking<T: Scalar>(
    params: &VelocityParams<T>,
    controller: &StagedController<T>,
    rho0: &DensityField<T>,
    t_end: T,
    dt: T,
) -> Result<TrackingRun<T>, T> {
    controller.validate(rho0.n_cells())?;
    let steps = step_count(t_end, dt)?;
    let mut stepper = NonlinearStepper::new(params, rho0.clone(), dt)?;
    let mut series = TimeSeries::with_capacity(steps + 1);
    let mut errors = Vec::with_capacity(steps + 1);
    let mut clamped_steps = 0usize;
    let mut active = 0usize;

    let control_at = |t: T,
                          field: &DensityField<T>,
                          active: &mut usize,
                          clamped: &mut usize|
     -> Result<T, T> {
        if t < controller.engage_time {
            return Ok(controller.nominal_influx);
        }
        let exit_density = field.outflow();
        while *active + 1 < controller.stages.len()
            && exit_density >= controller.ladder.levels()[*active + 1]
        {
            *active += 1;
        }
        let stage = &controller.stages[*active];
        let w = exo_state(&stage.exo, t - controller.engage_time);
        let (u, was_clamped) = stage_control(stage, field, &w)?;
        if was_clamped {
            *clamped += 1;
        }
        Ok(u)
    };

    let u0 = control_at(T::zero(), stepper.field(), &mut active, &mut clamped_steps)?;
    series.push(T::zero(), u0, stepper.outflux(), stepper.load(), stepper.speed());
    errors.push(stepper.outflux() - controller.reference_rate(T::zero()));

    for k in 0..steps {
        let t = T::of_usize(k) * dt;
        let u = control_at(t, stepper.field(), &mut active, &mut clamped_steps)?;
        let rec = stepper.step(&mut |_| u)?;
        series.push(rec.time, u, rec.outflux, rec.wip, rec.velocity);
        errors.push(rec.outflux - controller.reference_rate(rec.time));
    }
    series.tracking_error = Some(errors);
    Ok(TrackingRun {
        series,
        clamped_steps,
        steps,
        final_stage: active,
    })
}

/// Demand shape a staged controller is built for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DemandSignal<T = f64> {
    /// Pure step up the ladder.
    Step,
    /// Step plus a sinusoidal ripple of the given amplitude and frequency.
    Ripple { amplitude: T, omega: T },
}

/// Solve the per-stage kernels and regulators for a ladder and assemble the
/// staged controller.
pub fn build_staged_controller<T: Scalar>(
    params: &VelocityParams<T>,
    ladder: StageLadder<T>,
    weights: &CostWeights<T>,
    signal: DemandSignal<T>,
    n: usize,
    engage_time: T,
    riccati_tol: T,
    riccati_max_steps: usize,
) -> Result<StagedController<T>, T> {
    let d = ladder.d();
    let delta = ladder.density_step();
    let mut stages = Vec::with_capacity(d - 1);
    for k in 0..d - 1 {
        let level = ladder.levels()[k];
        let speed = ladder.stage_speeds()[k];
        let model = crate::linear::LinearModel::new(speed, level)?;
        let kernel = solve_riccati_steady(&model, weights, n, None, riccati_tol, riccati_max_steps)?;
        let exo = match signal {
            DemandSignal::Step => Exosystem::step_signal(speed * delta),
            DemandSignal::Ripple { amplitude, omega } => Exosystem::new(
                vec![ExoBlock::Zero, ExoBlock::Rotation { omega }],
                vec![T::one(), T::one(), T::zero()],
                vec![speed * delta, T::zero(), -amplitude],
            )?,
        };
        let mut feedforward = solve_regulator(speed, &exo, n)?;
        feedforward.gain = feedforward_gain(&kernel, &feedforward)?;
        stages.push(Stage {
            level,
            speed,
            kernel,
            feedforward,
            exo,
        });
    }
    let nominal_influx = ladder.stage_speeds()[0] * ladder.levels()[0];
    let top = ladder.top();
    let demand_rate = crate::transport::velocity(params, top)? * top;
    let ripple = match signal {
        DemandSignal::Step => None,
        DemandSignal::Ripple { amplitude, omega } => Some((amplitude, omega)),
    };
    Ok(StagedController {
        ladder,
        stages,
        engage_time,
        nominal_influx,
        demand_rate,
        ripple,
    })
}

/// Plain-text audit bundle: ladder row, kernel file references, regulator
/// samples and gains, one section per stage.
pub fn write_bundle<T: Scalar>(
    controller: &StagedController<T>,
    kernel_refs: &[String],
    mut out: impl std::io::Write,
) -> Result<(), T> {
    if kernel_refs.len() != controller.stages.len() {
        return Err(CoreError::DimensionMismatch(format!(
            "{} kernel references for {} stages",
            kernel_refs.len(),
            controller.stages.len()
        )));
    }
    writeln!(
        out,
        "controller-bundle d {} engage {:e} nominal {:e} demand {:e}",
        controller.ladder.d(),
        controller.engage_time,
        controller.nominal_influx,
        controller.demand_rate
    )?;
    let mut ladder_line = String::from("ladder");
    for l in controller.ladder.levels() {
        ladder_line.push_str(&format!(" {l:e}"));
    }
    writeln!(out, "{ladder_line}")?;
    for (k, stage) in controller.stages.iter().enumerate() {
        writeln!(out, "stage {} level {:e} speed {:e}", k + 1, stage.level, stage.speed)?;
        writeln!(out, "kernel {}", kernel_refs[k])?;
        let mut gain_line = String::from("m_w");
        for g in &stage.feedforward.gain {
            gain_line.push_str(&format!(" {g:e}"));
        }
        writeln!(out, "{gain_line}")?;
        for (i, m) in stage.feedforward.m_of_z.iter().enumerate() {
            let mut line = format!("m {i}");
            for c in m {
                line.push_str(&format!(" {c:e}"));
            }
            writeln!(out, "{line}")?;
        }
    }
    Ok(())
}
