//! Optimal boundary control of the frozen-velocity transport model: quadratic
//! cost, open-loop optimality system via a forward/backward adjoint sweep, and
//! the steady kernel Riccati solver behind the state-feedback law.
//!
//! The adjoint sweep is the exact transpose of the discrete forward dynamics
//! and quadratures, so the stationarity gradient it produces differentiates
//! the discrete cost to round-off; the returned co-state field is rescaled to
//! physical units and is a first-order approximation of the continuous
//! co-state. The kernel Riccati equation is relaxed in pseudo-time along its
//! diagonal characteristics, which drain into the zero boundaries at z = 1
//! and y = 1.

use std::io::{BufRead, Write};

use crate::error::{CoreError, Result};
use crate::linear::{LinearModel, LinearStepper};
use crate::scalar::{trapezoid, trapezoid_product, Scalar};
use crate::transport::{step_count, DensityField};

/// State weighting kernel `q₁(z, y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StateWeight<T = f64> {
    /// `q₁(z,y) = q0`; the state cost becomes `q0 (∫ρ̃)²`, a WIP penalty.
    Constant(T),
    /// `q₁(z,y) = q0 exp(−(z−y)²/(2σ²))`, a near-pointwise ridge.
    GaussianRidge { q0: T, sigma: T },
}

/// Terminal weighting kernel `P_f(z, y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TerminalWeight<T = f64> {
    Zero,
    Constant(T),
}

/// Weights of the quadratic tracking cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostWeights<T = f64> {
    pub state: StateWeight<T>,
    /// Input weight `R > 0`.
    pub input: T,
    pub terminal: TerminalWeight<T>,
}

impl<T: Scalar> CostWeights<T> {
    pub fn new(state: StateWeight<T>, input: T, terminal: TerminalWeight<T>) -> Result<Self, T> {
        let w = Self {
            state,
            input,
            terminal,
        };
        w.validate()?;
        Ok(w)
    }

    /// Constant state kernel `q0` with input weight `r` and no terminal cost.
    pub fn constant(q0: T, r: T) -> Result<Self, T> {
        Self::new(StateWeight::Constant(q0), r, TerminalWeight::Zero)
    }

    pub fn validate(&self) -> Result<(), T> {
        if !(self.input > T::zero()) {
            return Err(CoreError::InvalidParams(format!(
                "input weight R must be positive, got {}",
                self.input
            )));
        }
        match self.state {
            StateWeight::Constant(q0) => {
                if q0 < T::zero() {
                    return Err(CoreError::InvalidParams(format!(
                        "state weight q0 must be nonnegative, got {q0}"
                    )));
                }
            }
            StateWeight::GaussianRidge { q0, sigma } => {
                if q0 < T::zero() || !(sigma > T::zero()) {
                    return Err(CoreError::InvalidParams(format!(
                        "gaussian ridge needs q0 >= 0 and sigma > 0, got q0 = {q0}, sigma = {sigma}"
                    )));
                }
            }
        }
        if let TerminalWeight::Constant(p0) = self.terminal {
            if p0 < T::zero() {
                return Err(CoreError::InvalidParams(format!(
                    "terminal weight p0 must be nonnegative, got {p0}"
                )));
            }
        }
        Ok(())
    }

    /// Point evaluation of the state kernel; symmetric by construction.
    pub fn q1_eval(&self, z: T, y: T) -> T {
        match self.state {
            StateWeight::Constant(q0) => q0,
            StateWeight::GaussianRidge { q0, sigma } => {
                let d = (z - y) / sigma;
                q0 * (-d * d * T::half()).exp()
            }
        }
    }

    /// Magnitude scale of the state kernel (used for tolerances).
    pub fn q0(&self) -> T {
        match self.state {
            StateWeight::Constant(q0) => q0,
            StateWeight::GaussianRidge { q0, .. } => q0,
        }
    }
}

impl Default for CostWeights<f64> {
    fn default() -> Self {
        Self {
            state: StateWeight::Constant(1.0),
            input: 1.0,
            terminal: TerminalWeight::Zero,
        }
    }
}

/// Space-time grid of samples, time-major: row `k` is the profile at `t_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeGrid<T = f64> {
    n_space: usize,
    n_time: usize,
    dz: T,
    dt: T,
    data: Vec<T>,
}

impl<T: Scalar> SpaceTimeGrid<T> {
    pub fn zeros(n_space: usize, n_time: usize, dz: T, dt: T) -> Self {
        Self {
            n_space,
            n_time,
            dz,
            dt,
            data: vec![T::zero(); n_space * n_time],
        }
    }

    pub fn n_space(&self) -> usize {
        self.n_space
    }

    pub fn n_time(&self) -> usize {
        self.n_time
    }

    pub fn dz(&self) -> T {
        self.dz
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    pub fn row(&self, k: usize) -> &[T] {
        &self.data[k * self.n_space..(k + 1) * self.n_space]
    }

    pub fn row_mut(&mut self, k: usize) -> &mut [T] {
        &mut self.data[k * self.n_space..(k + 1) * self.n_space]
    }

    pub fn at(&self, k: usize, i: usize) -> T {
        self.data[k * self.n_space + i]
    }

    /// Final-time profile.
    pub fn last_row(&self) -> &[T] {
        self.row(self.n_time - 1)
    }
}

/// Trapezoid weight in space.
fn cw<T: Scalar>(j: usize, n: usize) -> T {
    if j == 0 || j == n {
        T::half()
    } else {
        T::one()
    }
}

/// Trapezoid weight in time.
fn tw<T: Scalar>(k: usize, m: usize) -> T {
    if k == 0 || k == m {
        T::half()
    } else {
        T::one()
    }
}

/// Grid realization of the integral operator `ρ ↦ ∫ q₁(z,y) ρ(y) dy`.
enum QOperator<T> {
    Constant(T),
    Dense {
        n: usize,
        matrix: Vec<T>,
    },
}

impl<T: Scalar> QOperator<T> {
    fn new(weights: &CostWeights<T>, n: usize, dz: T) -> Self {
        match weights.state {
            StateWeight::Constant(q0) => QOperator::Constant(q0),
            StateWeight::GaussianRidge { .. } => {
                let mut matrix = vec![T::zero(); (n + 1) * (n + 1)];
                for i in 0..=n {
                    let z = T::of_usize(i) * dz;
                    for j in 0..=n {
                        let y = T::of_usize(j) * dz;
                        matrix[i * (n + 1) + j] = weights.q1_eval(z, y);
                    }
                }
                QOperator::Dense { n, matrix }
            }
        }
    }

    fn apply_into(&self, rho: &[T], dz: T, out: &mut [T]) {
        match self {
            QOperator::Constant(q0) => {
                let v = *q0 * trapezoid(rho, dz);
                out.fill(v);
            }
            QOperator::Dense { n, matrix, .. } => {
                let n = *n;
                for i in 0..=n {
                    let row = &matrix[i * (n + 1)..(i + 1) * (n + 1)];
                    out[i] = trapezoid_product(row, rho, dz);
                }
            }
        }
    }

    /// Quadratic form `⟨ρ, q₁(ρ)⟩` by double trapezoidal quadrature.
    fn quad_form(&self, rho: &[T], dz: T, scratch: &mut [T]) -> T {
        match self {
            QOperator::Constant(q0) => {
                let s = trapezoid(rho, dz);
                *q0 * s * s
            }
            QOperator::Dense { .. } => {
                self.apply_into(rho, dz, scratch);
                trapezoid_product(rho, scratch, dz)
            }
        }
    }
}

/// Terminal operator `ρ ↦ ∫ P_f(z,y) ρ(y) dy`.
fn terminal_apply<T: Scalar>(weights: &CostWeights<T>, rho: &[T], dz: T, out: &mut [T]) {
    match weights.terminal {
        TerminalWeight::Zero => out.fill(T::zero()),
        TerminalWeight::Constant(p0) => out.fill(p0 * trapezoid(rho, dz)),
    }
}

fn terminal_form<T: Scalar>(weights: &CostWeights<T>, rho: &[T], dz: T) -> T {
    match weights.terminal {
        TerminalWeight::Zero => T::zero(),
        TerminalWeight::Constant(p0) => {
            let s = trapezoid(rho, dz);
            p0 * s * s
        }
    }
}

/// Quadratic tracking cost over a state trajectory and a sampled control.
pub fn cost<T: Scalar>(
    _model: &LinearModel<T>,
    weights: &CostWeights<T>,
    state: &SpaceTimeGrid<T>,
    control: &[T],
) -> Result<T, T> {
    weights.validate()?;
    if control.len() != state.n_time() {
        return Err(CoreError::DimensionMismatch(format!(
            "control has {} samples, state has {} time records",
            control.len(),
            state.n_time()
        )));
    }
    let m = state.n_time() - 1;
    let dz = state.dz();
    let q = QOperator::new(weights, state.n_space() - 1, dz);
    let mut scratch = vec![T::zero(); state.n_space()];
    let mut running = T::zero();
    for k in 0..=m {
        let rho = state.row(k);
        let stage = q.quad_form(rho, dz, &mut scratch) + weights.input * control[k] * control[k];
        running += tw::<T>(k, m) * stage;
    }
    Ok(T::half() * state.dt() * running + T::half() * terminal_form(weights, state.last_row(), dz))
}

/// Forward solve of the linear model on the full space-time grid.
///
/// `controls[k]` is the boundary control sample at `t_k`; the sample at
/// `t_0` never enters the dynamics because row 0 is the initial condition.
pub fn simulate_linear_grid<T: Scalar>(
    model: &LinearModel<T>,
    initial: &DensityField<T>,
    controls: &[T],
    dt: T,
) -> Result<SpaceTimeGrid<T>, T> {
    if controls.is_empty() {
        return Err(CoreError::DimensionMismatch(
            "need at least one control sample".into(),
        ));
    }
    let mut stepper = LinearStepper::new(model, initial.clone(), dt)?;
    let n_space = initial.values().len();
    let mut grid = SpaceTimeGrid::zeros(n_space, controls.len(), initial.dz(), dt);
    grid.row_mut(0).copy_from_slice(initial.values());
    for k in 1..controls.len() {
        let u = controls[k];
        stepper.step(&mut |_| u);
        grid.row_mut(k).copy_from_slice(stepper.field().values());
    }
    Ok(grid)
}

/// Backward adjoint sweep along the reversed characteristics.
///
/// Returns the co-state field λ(z_i, t_k) in physical units. The inflow
/// column λ(0, ·) is scaled so that `R·ũ(t_k) + λ(0, t_k)` is exactly the
/// discrete cost gradient density for `k ≥ 1`; the `t_0` sample of the
/// control carries no dynamic sensitivity. The z = 1 boundary is drained by
/// the scheme itself and is exactly zero at unit CFL.
pub fn costate_sweep<T: Scalar>(
    model: &LinearModel<T>,
    weights: &CostWeights<T>,
    state: &SpaceTimeGrid<T>,
) -> Result<SpaceTimeGrid<T>, T> {
    weights.validate()?;
    let n = state.n_space() - 1;
    let m = state.n_time() - 1;
    let dz = state.dz();
    let dt = state.dt();
    let bound = dz / model.speed;
    if dt > bound * T::of(1.0 + 1e-9) {
        return Err(CoreError::ResolutionViolation { dt, bound });
    }
    let mut theta = model.speed * dt / dz;
    if theta > T::one() {
        theta = T::one();
    }

    let q = QOperator::new(weights, n, dz);
    let mut qrho = vec![T::zero(); n + 1];
    let mut pf = vec![T::zero(); n + 1];
    let mut lambda = SpaceTimeGrid::zeros(n + 1, m + 1, dz, dt);

    // Raw sensitivities ∂J/∂ρ_j at the current and next time level.
    let mut bar_next = vec![T::zero(); n + 1];
    let mut bar = vec![T::zero(); n + 1];

    // Terminal level: running-cost half weight plus the terminal kernel.
    q.apply_into(state.row(m), dz, &mut qrho);
    terminal_apply(weights, state.row(m), dz, &mut pf);
    for j in 0..=n {
        bar_next[j] = cw::<T>(j, n) * dz * (dt * tw::<T>(m, m) * qrho[j] + pf[j]);
    }
    write_physical_row(&mut lambda, m, &bar_next, model.speed, dz, dt, tw::<T>(m, m), n);

    for k in (0..m).rev() {
        q.apply_into(state.row(k), dz, &mut qrho);
        let w = tw::<T>(k, m);
        for j in 0..=n {
            let transported = if j == 0 {
                theta * bar_next[1]
            } else if j < n {
                (T::one() - theta) * bar_next[j] + theta * bar_next[j + 1]
            } else {
                (T::one() - theta) * bar_next[n]
            };
            bar[j] = transported + dt * w * cw::<T>(j, n) * dz * qrho[j];
        }
        // The t_0 trace keeps the full-step scaling: its half source weight
        // belongs to the quadrature, not to the transported sensitivity.
        let trace_w = if k == 0 { T::one() } else { w };
        write_physical_row(&mut lambda, k, &bar, model.speed, dz, dt, trace_w, n);
        std::mem::swap(&mut bar, &mut bar_next);
    }
    Ok(lambda)
}

fn write_physical_row<T: Scalar>(
    lambda: &mut SpaceTimeGrid<T>,
    k: usize,
    bar: &[T],
    speed: T,
    dz: T,
    dt: T,
    trace_weight: T,
    n: usize,
) {
    let row = lambda.row_mut(k);
    row[0] = bar[0] / (speed * dt * trace_weight);
    for j in 1..=n {
        row[j] = bar[j] / (cw::<T>(j, n) * dz);
    }
}

/// Stationarity gradient density `g(t_k) = R·ũ(t_k) + λ(0, t_k)`.
///
/// Differentiates the discrete cost exactly: `Σ_k w_k dt g_k δu_k` equals the
/// directional derivative of [`cost`] for every perturbation with
/// `δu_0 = 0`, and the `t_0` component is the bare `R·ũ(t_0)` term.
pub fn stationarity_gradient<T: Scalar>(
    weights: &CostWeights<T>,
    costate: &SpaceTimeGrid<T>,
    control: &[T],
) -> Result<Vec<T>, T> {
    if control.len() != costate.n_time() {
        return Err(CoreError::DimensionMismatch(format!(
            "control has {} samples, costate has {} time records",
            control.len(),
            costate.n_time()
        )));
    }
    let r = weights.input;
    Ok(control
        .iter()
        .enumerate()
        .map(|(k, &u)| {
            if k == 0 {
                r * u
            } else {
                r * u + costate.at(k, 0)
            }
        })
        .collect())
}

/// Solution of the finite-horizon open-loop problem.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenLoopSolution<T = f64> {
    /// Optimal boundary control samples `ũ*(t_k)`.
    pub control: Vec<T>,
    /// State trajectory under the optimal control.
    pub state: SpaceTimeGrid<T>,
    /// Co-state field in physical units.
    pub costate: SpaceTimeGrid<T>,
    /// Achieved cost.
    pub cost: T,
    /// Accepted descent iterations.
    pub iterations: usize,
    /// Final stationarity residual `max_k |R ũ_k + λ(0, t_k)|`.
    pub residual: T,
}

/// Iterate forward state solves, backward adjoint sweeps and steepest-descent
/// control updates with backtracking until the stationarity residual drops
/// below `tol`.
pub fn solve_open_loop<T: Scalar>(
    model: &LinearModel<T>,
    weights: &CostWeights<T>,
    rho_tilde0: &DensityField<T>,
    t_end: T,
    dt: T,
    max_iter: usize,
    tol: T,
) -> Result<OpenLoopSolution<T>, T> {
    weights.validate()?;
    if !(tol > T::zero()) {
        return Err(CoreError::InvalidParams(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let steps = step_count(t_end, dt)?;
    let mut control = vec![T::zero(); steps + 1];
    let mut step_size = T::one() / weights.input;
    let mut iterations = 0usize;

    let mut state = simulate_linear_grid(model, rho_tilde0, &control, dt)?;
    let mut j = cost(model, weights, &state, &control)?;

    loop {
        let costate = costate_sweep(model, weights, &state)?;
        let grad = stationarity_gradient(weights, &costate, &control)?;
        let residual = grad.iter().fold(T::zero(), |a, g| a.max(g.abs()));

        if residual <= tol {
            return Ok(OpenLoopSolution {
                control,
                state,
                costate,
                cost: j,
                iterations,
                residual,
            });
        }
        if iterations >= max_iter {
            return Err(CoreError::OpenLoopNoConvergence {
                residual,
                best: Box::new(OpenLoopSolution {
                    control,
                    state,
                    costate,
                    cost: j,
                    iterations,
                    residual,
                }),
            });
        }

        // Backtracking line search along the negative gradient.
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<T> = control
                .iter()
                .zip(&grad)
                .map(|(&u, &g)| u - step_size * g)
                .collect();
            let trial_state = simulate_linear_grid(model, rho_tilde0, &trial, dt)?;
            let trial_j = cost(model, weights, &trial_state, &trial)?;
            if trial_j <= j {
                control = trial;
                state = trial_state;
                j = trial_j;
                accepted = true;
                break;
            }
            step_size = step_size * T::half();
        }
        if !accepted {
            return Err(CoreError::OpenLoopNoConvergence {
                residual,
                best: Box::new(OpenLoopSolution {
                    control,
                    state,
                    costate,
                    cost: j,
                    iterations,
                    residual,
                }),
            });
        }
        iterations += 1;
    }
}

/// Steady feedback kernel `P(z, y)` sampled on the unit square.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiKernel<T = f64> {
    n: usize,
    values: Vec<T>,
    /// Transport speed the kernel was solved for.
    pub speed: T,
    /// Weights the kernel was solved for.
    pub weights: CostWeights<T>,
    /// Final pseudo-time update norm `‖ΔP‖_∞ / Δτ` (zero for imported kernels).
    pub residual: T,
}

impl<T: Scalar> RiccatiKernel<T> {
    /// All-zero kernel: the steady solution for `q₁ = 0`, `P_f = 0`; also the
    /// "feedback off" controller.
    pub fn zero(n: usize, speed: T, weights: CostWeights<T>) -> Self {
        Self {
            n,
            values: vec![T::zero(); (n + 1) * (n + 1)],
            speed,
            weights,
            residual: T::zero(),
        }
    }

    /// Kernel from explicit samples, row-major `P(z_i, y_j)`.
    pub fn from_values(n: usize, values: Vec<T>, speed: T, weights: CostWeights<T>) -> Result<Self, T> {
        if values.len() != (n + 1) * (n + 1) {
            return Err(CoreError::DimensionMismatch(format!(
                "expected {} kernel samples, got {}",
                (n + 1) * (n + 1),
                values.len()
            )));
        }
        Ok(Self {
            n,
            values,
            speed,
            weights,
            residual: T::zero(),
        })
    }

    pub fn n_cells(&self) -> usize {
        self.n
    }

    pub fn dz(&self) -> T {
        T::one() / T::of_usize(self.n)
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.values[i * (self.n + 1) + j]
    }

    /// Boundary row `P(0, ·)` that defines the feedback law.
    pub fn feedback_row(&self) -> &[T] {
        &self.values[0..=self.n]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Largest asymmetry `|P(z,y) − P(y,z)|` over the grid.
    pub fn symmetry_defect(&self) -> T {
        let mut worst = T::zero();
        for i in 0..=self.n {
            for j in 0..i {
                worst = worst.max((self.at(i, j) - self.at(j, i)).abs());
            }
        }
        worst
    }
}

/// One pseudo-time step of the kernel equation; `out` receives the update.
///
/// The linear part is advected along the diagonal characteristic toward the
/// zero boundaries; the source `q₁ − P(z,0)P(0,y)/R` is integrated by the
/// trapezoidal rule along the characteristic segment.
fn riccati_step<T: Scalar>(
    p: &[T],
    n: usize,
    q_grid: &dyn Fn(usize, usize) -> T,
    r: T,
    theta: T,
    dtau: T,
    out: &mut [T],
) {
    let stride = n + 1;
    let src = |i: usize, j: usize| -> T { q_grid(i, j) - p[i * stride] * p[j] / r };
    for i in 0..n {
        for j in 0..n {
            let here = p[i * stride + j];
            let ahead = p[(i + 1) * stride + j + 1];
            let shifted = (T::one() - theta) * here + theta * ahead;
            let s0 = src(i, j);
            let s1 = src(i + 1, j + 1);
            let departure = (T::one() - theta) * s0 + theta * s1;
            out[i * stride + j] = shifted + dtau * T::half() * (s0 + departure);
        }
    }
    for j in 0..=n {
        out[n * stride + j] = T::zero();
        out[j * stride + n] = T::zero();
    }
}

fn q_grid_eval<T: Scalar>(weights: &CostWeights<T>, n: usize) -> Box<dyn Fn(usize, usize) -> T> {
    let dz = T::one() / T::of_usize(n);
    match weights.state {
        StateWeight::Constant(q0) => Box::new(move |_, _| q0),
        StateWeight::GaussianRidge { q0, sigma } => Box::new(move |i, j| {
            let d = (T::of_usize(i) - T::of_usize(j)) * dz / sigma;
            q0 * (-d * d * T::half()).exp()
        }),
    }
}

fn terminal_kernel_init<T: Scalar>(weights: &CostWeights<T>, n: usize) -> Vec<T> {
    let stride = n + 1;
    let mut p = vec![T::zero(); stride * stride];
    if let TerminalWeight::Constant(p0) = weights.terminal {
        for i in 0..n {
            for j in 0..n {
                p[i * stride + j] = p0;
            }
        }
    }
    p
}

/// Relax the kernel Riccati equation backward in pseudo-time from `P_f`
/// until the update norm `‖ΔP‖_∞/Δτ` drops below `tol`.
pub fn solve_riccati_steady<T: Scalar>(
    model: &LinearModel<T>,
    weights: &CostWeights<T>,
    n: usize,
    pseudo_dt: Option<T>,
    tol: T,
    max_steps: usize,
) -> Result<RiccatiKernel<T>, T> {
    weights.validate()?;
    if n < 2 {
        return Err(CoreError::InvalidParams(
            "kernel grid needs at least two cells".into(),
        ));
    }
    if !(tol > T::zero()) {
        return Err(CoreError::InvalidParams(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let dz = T::one() / T::of_usize(n);
    let dtau = pseudo_dt.unwrap_or(dz / model.speed);
    let bound = dz / model.speed;
    if dtau > bound * T::of(1.0 + 1e-9) || !(dtau > T::zero()) {
        return Err(CoreError::ResolutionViolation { dt: dtau, bound });
    }
    let mut theta = model.speed * dtau / dz;
    if theta > T::one() {
        theta = T::one();
    }

    let q_grid = q_grid_eval(weights, n);
    let mut p = terminal_kernel_init(weights, n);
    let mut next = p.clone();
    let mut residual = T::infinity();
    for _ in 0..max_steps {
        riccati_step(&p, n, q_grid.as_ref(), weights.input, theta, dtau, &mut next);
        residual = p
            .iter()
            .zip(&next)
            .fold(T::zero(), |a, (&old, &new)| a.max((new - old).abs()))
            / dtau;
        std::mem::swap(&mut p, &mut next);
        if residual <= tol {
            let kernel = RiccatiKernel {
                n,
                values: p,
                speed: model.speed,
                weights: *weights,
                residual,
            };
            let defect = kernel.symmetry_defect();
            if defect > T::of(100.0) * tol {
                return Err(CoreError::NonSymmetricKernel { defect });
            }
            return Ok(kernel);
        }
    }
    Err(CoreError::RiccatiNoConvergence {
        residual,
        best: Box::new(RiccatiKernel {
            n,
            values: p,
            speed: model.speed,
            weights: *weights,
            residual,
        }),
    })
}

/// Transient kernel solve backward from `t = T`; returns the boundary rows
/// `P(0, ·, t_k)` for `k = 0..=M`, the data the time-varying feedback needs.
pub fn solve_riccati_transient<T: Scalar>(
    model: &LinearModel<T>,
    weights: &CostWeights<T>,
    n: usize,
    t_end: T,
    dt: T,
) -> Result<Vec<Vec<T>>, T> {
    weights.validate()?;
    let steps = step_count(t_end, dt)?;
    let dz = T::one() / T::of_usize(n);
    let bound = dz / model.speed;
    if dt > bound * T::of(1.0 + 1e-9) {
        return Err(CoreError::ResolutionViolation { dt, bound });
    }
    let mut theta = model.speed * dt / dz;
    if theta > T::one() {
        theta = T::one();
    }
    let q_grid = q_grid_eval(weights, n);
    let mut p = terminal_kernel_init(weights, n);
    let mut next = p.clone();
    let mut rows = vec![Vec::new(); steps + 1];
    rows[steps] = p[0..=n].to_vec();
    for k in (0..steps).rev() {
        riccati_step(&p, n, q_grid.as_ref(), weights.input, theta, dt, &mut next);
        std::mem::swap(&mut p, &mut next);
        rows[k] = p[0..=n].to_vec();
    }
    Ok(rows)
}

/// Steady feedback law `ũ = −(1/R) ∫ P(0,y) ρ̃(y) dy`.
pub fn feedback_control<T: Scalar>(
    kernel: &RiccatiKernel<T>,
    rho_tilde: &DensityField<T>,
) -> Result<T, T> {
    feedback_from_samples(kernel, rho_tilde.values())
}

pub(crate) fn feedback_from_samples<T: Scalar>(kernel: &RiccatiKernel<T>, rho: &[T]) -> Result<T, T> {
    if rho.len() != kernel.n + 1 {
        return Err(CoreError::DimensionMismatch(format!(
            "kernel has {} samples per row, field has {}",
            kernel.n + 1,
            rho.len()
        )));
    }
    let inner = trapezoid_product(kernel.feedback_row(), rho, kernel.dz());
    Ok(-inner / kernel.weights.input)
}

impl RiccatiKernel<f64> {
    /// Plain-text export: header `riccati-kernel N v_bar R`, then N+1 rows of
    /// N+1 space-separated decimals. Values use the shortest exact
    /// representation, so a re-import is bit-identical.
    pub fn write_text(&self, mut out: impl Write) -> Result<(), f64> {
        writeln!(out, "riccati-kernel {} {:e} {:e}", self.n, self.speed, self.weights.input)?;
        for i in 0..=self.n {
            let row = &self.values[i * (self.n + 1)..(i + 1) * (self.n + 1)];
            let mut line = String::with_capacity(row.len() * 24);
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    line.push(' ');
                }
                line.push_str(&format!("{v:e}"));
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    /// Re-import an exported kernel. The caller supplies the weights the
    /// kernel was solved for; the stored input weight must match.
    pub fn read_text(input: impl BufRead, weights: CostWeights<f64>) -> Result<Self, f64> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| CoreError::KernelFormat("empty file".into()))??;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("riccati-kernel") {
            return Err(CoreError::KernelFormat(
                "missing riccati-kernel header".into(),
            ));
        }
        let n: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CoreError::KernelFormat("bad grid size in header".into()))?;
        let speed: f64 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CoreError::KernelFormat("bad speed in header".into()))?;
        let r: f64 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CoreError::KernelFormat("bad input weight in header".into()))?;
        if r != weights.input {
            return Err(CoreError::KernelFormat(format!(
                "input weight mismatch: file has {r}, expected {}",
                weights.input
            )));
        }
        let mut values = Vec::with_capacity((n + 1) * (n + 1));
        for i in 0..=n {
            let line = lines.next().ok_or_else(|| {
                CoreError::KernelFormat(format!("missing row {i} of {}", n + 1))
            })??;
            let mut count = 0usize;
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| CoreError::KernelFormat(format!("bad value in row {i}")))?;
                values.push(v);
                count += 1;
            }
            if count != n + 1 {
                return Err(CoreError::KernelFormat(format!(
                    "row {i} has {count} values, expected {}",
                    n + 1
                )));
            }
        }
        Ok(Self {
            n,
            values,
            speed,
            weights,
            residual: 0.0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::{Rng, SeedableRng};

    fn stage_one() -> LinearModel {
        LinearModel::new(8.0 / 3.0, 1.5).unwrap()
    }

    fn unit_weights() -> CostWeights {
        CostWeights::constant(1.0, 1.0).unwrap()
    }

    #[test]
    fn weight_validation() {
        assert!(CostWeights::constant(1.0, 0.0).is_err());
        assert!(CostWeights::constant(-1.0, 1.0).is_err());
        assert!(CostWeights::new(
            StateWeight::GaussianRidge { q0: 1.0, sigma: 0.0 },
            1.0,
            TerminalWeight::Zero
        )
        .is_err());
        let w = CostWeights::new(
            StateWeight::GaussianRidge { q0: 2.0, sigma: 0.3 },
            1.0,
            TerminalWeight::Zero,
        )
        .unwrap();
        assert_eq!(w.q1_eval(0.2, 0.7), w.q1_eval(0.7, 0.2));
    }

    #[test]
    fn cost_oracles() {
        let model = stage_one();
        let n = 100;
        let m = 60;
        let t_end = 1.5;
        let dt = t_end / m as f64;
        let dz = 1.0 / n as f64;

        let zeros = SpaceTimeGrid::zeros(n + 1, m + 1, dz, dt);
        let control = vec![0.0; m + 1];
        assert_eq!(cost(&model, &unit_weights(), &zeros, &control).unwrap(), 0.0);

        // Constant unit state: ⟨1, q₁(1)⟩ = q0 so J = q0·T/2.
        let q0 = 1.7;
        let w = CostWeights::constant(q0, 1.0).unwrap();
        let mut ones = SpaceTimeGrid::zeros(n + 1, m + 1, dz, dt);
        for k in 0..=m {
            ones.row_mut(k).fill(1.0);
        }
        assert_relative_eq!(
            cost(&model, &w, &ones, &control).unwrap(),
            0.5 * q0 * t_end,
            max_relative = 1e-12
        );

        // Input-only cost: J = R·u0²·T/2.
        let u0 = 0.8;
        let constant_u = vec![u0; m + 1];
        let r = 2.5;
        let w = CostWeights::constant(0.0, r).unwrap();
        assert_relative_eq!(
            cost(&model, &w, &zeros, &constant_u).unwrap(),
            0.5 * r * u0 * u0 * t_end,
            max_relative = 1e-12
        );
    }

    #[test]
    fn costate_is_zero_without_weights() {
        let model = stage_one();
        let w = CostWeights::constant(0.0, 1.0).unwrap();
        let n = 60;
        let dz = 1.0 / n as f64;
        let dt = dz / model.speed;
        let mut state = SpaceTimeGrid::zeros(n + 1, 101, dz, dt);
        for k in 0..state.n_time() {
            state.row_mut(k).fill(0.7);
        }
        let lambda = costate_sweep(&model, &w, &state).unwrap();
        assert!(lambda.row(0).iter().all(|&v| v == 0.0));
        assert!(lambda.last_row().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn costate_terminal_condition_from_constant_kernel() {
        let model = stage_one();
        let w = CostWeights::new(StateWeight::Constant(0.0), 1.0, TerminalWeight::Constant(0.9))
            .unwrap();
        let n = 80;
        let dz = 1.0 / n as f64;
        let dt = dz / model.speed;
        let m = 120;
        let mut state = SpaceTimeGrid::zeros(n + 1, m + 1, dz, dt);
        for k in 0..=m {
            state.row_mut(k).fill(1.0);
        }
        let lambda = costate_sweep(&model, &w, &state).unwrap();
        // λ(z,T) = P_f(ρ̃(T)) = 0.9·∫1 = 0.9 for every z at the terminal slice.
        for j in 1..n {
            assert_abs_diff_eq!(lambda.at(m, j), 0.9, epsilon = 1e-12);
        }
        // λ(1,t) = 0 for t < T at unit CFL.
        for k in 0..m {
            assert_abs_diff_eq!(lambda.at(k, n), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn costate_grows_linearly_along_backward_characteristics() {
        let model = stage_one();
        let q0 = 1.3;
        let w = CostWeights::constant(q0, 1.0).unwrap();
        let n = 200;
        let dz = 1.0 / n as f64;
        let dt = dz / model.speed;
        let t_end = 1.0;
        let m = (t_end / dt).round() as usize;
        let mut state = SpaceTimeGrid::zeros(n + 1, m + 1, dz, dt);
        for k in 0..=m {
            state.row_mut(k).fill(1.0);
        }
        let lambda = costate_sweep(&model, &w, &state).unwrap();
        let t_final = m as f64 * dt;
        let mut worst: f64 = 0.0;
        for k in 0..=m {
            let t = k as f64 * dt;
            for j in 0..=n {
                let z = j as f64 * dz;
                let exact = q0 * (t_final - t).min((1.0 - z) / model.speed);
                worst = worst.max((lambda.at(k, j) - exact).abs());
            }
        }
        assert!(worst <= 4.0 * q0 * dz, "characteristic mismatch {worst}");
    }

    /// Central finite differences of the discrete cost along a direction.
    fn fd_directional(
        model: &LinearModel,
        weights: &CostWeights,
        rho0: &DensityField,
        control: &[f64],
        direction: &[f64],
        dt: f64,
        h: f64,
    ) -> f64 {
        let probe = |s: f64| {
            let u: Vec<f64> = control
                .iter()
                .zip(direction)
                .map(|(&u, &d)| u + s * d)
                .collect();
            let state = simulate_linear_grid(model, rho0, &u, dt).unwrap();
            cost(model, weights, &state, &u).unwrap()
        };
        (probe(h) - probe(-h)) / (2.0 * h)
    }

    #[test]
    fn adjoint_gradient_matches_finite_differences() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(42);
        let n = 100;
        let t_end = 1.5;
        for instance in 0..5 {
            let speed = rng.gen_range(1.5..4.0);
            let model = LinearModel::new(speed, 1.5).unwrap();
            let q0 = rng.gen_range(0.2..3.0);
            let r = rng.gen_range(0.5..2.0);
            let weights = if instance % 2 == 0 {
                CostWeights::constant(q0, r).unwrap()
            } else {
                CostWeights::new(
                    StateWeight::GaussianRidge { q0, sigma: rng.gen_range(0.1..0.5) },
                    r,
                    TerminalWeight::Constant(rng.gen_range(0.0..1.0)),
                )
                .unwrap()
            };
            let dz = 1.0 / n as f64;
            let dt = dz / speed;
            let m = (t_end / dt).round() as usize;

            let a = rng.gen_range(-0.5..0.5);
            let b = rng.gen_range(-0.5..0.5);
            let rho0 = DensityField::from_fn(n, |z: f64| {
                a * (std::f64::consts::PI * z).sin() + b * (2.0 * std::f64::consts::PI * z).cos()
            })
            .unwrap();
            let control: Vec<f64> = (0..=m).map(|_| rng.gen_range(-0.3..0.3)).collect();
            let mut direction: Vec<f64> = (0..=m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            direction[0] = 0.0;

            let state = simulate_linear_grid(&model, &rho0, &control, dt).unwrap();
            let costate = costate_sweep(&model, &weights, &state).unwrap();
            let grad = stationarity_gradient(&weights, &costate, &control).unwrap();
            let mut inner = 0.0;
            for k in 0..=m {
                let w = if k == 0 || k == m { 0.5 } else { 1.0 };
                inner += w * dt * grad[k] * direction[k];
            }
            let fd = fd_directional(&model, &weights, &rho0, &control, &direction, dt, 1e-4);
            let rel = (inner - fd).abs() / inner.abs().max(1e-12);
            assert!(rel <= 1e-3, "instance {instance}: relative error {rel}");
        }
    }

    #[test]
    fn open_loop_zero_data_is_optimal_at_zero() {
        let model = stage_one();
        let n = 50;
        let rho0 = DensityField::uniform(n, 0.0).unwrap();
        let dt = rho0.dz() / model.speed;
        let sol = solve_open_loop(&model, &unit_weights(), &rho0, 0.5, dt, 100, 1e-10).unwrap();
        assert!(sol.control.iter().all(|&u| u == 0.0));
        assert_eq!(sol.cost, 0.0);
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn open_loop_without_state_penalty_does_not_actuate() {
        let model = stage_one();
        let w = CostWeights::constant(0.0, 1.0).unwrap();
        let n = 50;
        let rho0 = DensityField::from_fn(n, |z: f64| (std::f64::consts::PI * z).sin()).unwrap();
        let dt = rho0.dz() / model.speed;
        let sol = solve_open_loop(&model, &w, &rho0, 0.5, dt, 100, 1e-10).unwrap();
        assert!(sol.control.iter().all(|&u| u == 0.0));
        assert_eq!(sol.cost, 0.0);
    }

    #[test]
    fn open_loop_beats_inactivity_and_satisfies_stationarity() {
        let model = stage_one();
        let weights = unit_weights();
        let n = 100;
        let rho0 = DensityField::uniform(n, 0.5).unwrap();
        let dt = rho0.dz() / model.speed;
        let t_end = 1.5;

        let zero = vec![0.0; step_count(t_end, dt).unwrap() + 1];
        let idle_state = simulate_linear_grid(&model, &rho0, &zero, dt).unwrap();
        let idle_cost = cost(&model, &weights, &idle_state, &zero).unwrap();

        let sol = solve_open_loop(&model, &weights, &rho0, t_end, dt, 2000, 1e-7).unwrap();
        assert!(sol.cost < idle_cost, "{} !< {idle_cost}", sol.cost);
        assert!(sol.residual <= 1e-7);
        // Stationarity in the printed form: R·ũ + λ(0,t) небольшой for k ≥ 1.
        for k in 1..sol.control.len() {
            let g = weights.input * sol.control[k] + sol.costate.at(k, 0);
            assert!(g.abs() <= 1e-7);
        }
    }

    #[test]
    fn descent_iterations_never_increase_cost() {
        let model = stage_one();
        let weights = unit_weights();
        let n = 80;
        let rho0 = DensityField::from_fn(n, |z: f64| 0.4 + 0.3 * (2.0 * std::f64::consts::PI * z).cos())
            .unwrap();
        let dt = rho0.dz() / model.speed;
        let t_end = 1.0;
        let m = step_count(t_end, dt).unwrap();

        // Re-run the descent loop manually to observe the accepted costs.
        let mut control = vec![0.0; m + 1];
        let mut state = simulate_linear_grid(&model, &rho0, &control, dt).unwrap();
        let mut j = cost(&model, &weights, &state, &control).unwrap();
        let mut step_size = 1.0;
        for _ in 0..40 {
            let costate = costate_sweep(&model, &weights, &state).unwrap();
            let grad = stationarity_gradient(&weights, &costate, &control).unwrap();
            loop {
                let trial: Vec<f64> = control
                    .iter()
                    .zip(&grad)
                    .map(|(&u, &g)| u - step_size * g)
                    .collect();
                let trial_state = simulate_linear_grid(&model, &rho0, &trial, dt).unwrap();
                let trial_j = cost(&model, &weights, &trial_state, &trial).unwrap();
                if trial_j <= j {
                    assert!(trial_j <= j);
                    control = trial;
                    state = trial_state;
                    j = trial_j;
                    break;
                }
                step_size *= 0.5;
                assert!(step_size > 1e-12, "line search collapsed");
            }
        }
    }

    #[test]
    fn riccati_zero_weights_give_zero_kernel() {
        let model = stage_one();
        let w = CostWeights::constant(0.0, 1.0).unwrap();
        let kernel = solve_riccati_steady(&model, &w, 50, None, 1e-12, 10_000).unwrap();
        assert!(kernel.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn riccati_linear_limit_matches_the_characteristic_integral() {
        // R → ∞ removes the quadratic term; the kernel is the integral of q₁
        // along the diagonal characteristic: q0·(1 − max(z,y))/v̄.
        let model = stage_one();
        let q0 = 2.0;
        let w = CostWeights::constant(q0, 1e12).unwrap();
        let n = 100;
        let kernel = solve_riccati_steady(&model, &w, n, None, 1e-12, 10_000).unwrap();
        let dz = 1.0 / n as f64;
        for i in 0..=n {
            for j in 0..=n {
                let z = i as f64 * dz;
                let y = j as f64 * dz;
                let exact = q0 * (1.0 - z.max(y)) / model.speed;
                assert_abs_diff_eq!(kernel.at(i, j), exact, epsilon = 1e-9);
            }
        }
    }

    /// Independent plug-back stencil: central differences on interior nodes.
    fn plugback_residual(kernel: &RiccatiKernel, weights: &CostWeights) -> f64 {
        let n = kernel.n_cells();
        let dz = kernel.dz();
        let v = kernel.speed;
        let mut worst: f64 = 0.0;
        for i in 1..n {
            for j in 1..n {
                let dpz = (kernel.at(i + 1, j) - kernel.at(i - 1, j)) / (2.0 * dz);
                let dpy = (kernel.at(i, j + 1) - kernel.at(i, j - 1)) / (2.0 * dz);
                let z = i as f64 * dz;
                let y = j as f64 * dz;
                let res = v * (dpz + dpy) + weights.q1_eval(z, y)
                    - kernel.at(i, 0) * kernel.at(0, j) / weights.input;
                worst = worst.max(res.abs());
            }
        }
        worst
    }

    #[test]
    fn riccati_steady_kernel_passes_plugback_and_symmetry() {
        let model = stage_one();
        let weights = unit_weights();
        let n = 200;
        let kernel = solve_riccati_steady(&model, &weights, n, None, 1e-10, 50_000).unwrap();
        assert!(kernel.residual <= 1e-10);
        // Boundary rows and columns exactly zero.
        for j in 0..=n {
            assert_eq!(kernel.at(n, j), 0.0);
            assert_eq!(kernel.at(j, n), 0.0);
        }
        // Interior strictly positive for a positive constant kernel.
        for i in 1..n {
            for j in 1..n {
                assert!(kernel.at(i, j) > 0.0, "kernel not positive at ({i},{j})");
            }
        }
        assert!(kernel.symmetry_defect() <= 1e-13);
        let res = plugback_residual(&kernel, &weights);
        assert!(res <= 1e-3 * weights.q0(), "plug-back residual {res}");
    }

    #[test]
    fn riccati_gaussian_ridge_converges() {
        let model = stage_one();
        let weights = CostWeights::new(
            StateWeight::GaussianRidge { q0: 1.0, sigma: 0.25 },
            1.0,
            TerminalWeight::Zero,
        )
        .unwrap();
        let kernel = solve_riccati_steady(&model, &weights, 150, None, 1e-9, 50_000).unwrap();
        assert!(kernel.symmetry_defect() <= 1e-12);
        let res = plugback_residual(&kernel, &weights);
        assert!(res <= 1e-3, "plug-back residual {res}");
    }

    #[test]
    fn feedback_control_quadrature() {
        let weights = unit_weights();
        let n = 100;
        let mut kernel = RiccatiKernel::zero(n, 8.0 / 3.0, weights);
        let zero_field = DensityField::uniform(n, 1.0).unwrap();
        assert_eq!(feedback_control(&kernel, &zero_field).unwrap(), 0.0);

        // P(0,y) = 1−y against ρ̃ ≡ 1: −∫(1−y)dy = −1/2.
        for j in 0..=n {
            kernel.values[j] = 1.0 - j as f64 / n as f64;
        }
        let f = feedback_control(&kernel, &zero_field).unwrap();
        assert_abs_diff_eq!(f, -0.5, epsilon = 1e-12);

        let zero_dev = DensityField::uniform(n, 0.0).unwrap();
        assert_eq!(feedback_control(&kernel, &zero_dev).unwrap(), 0.0);

        let wrong = DensityField::uniform(n / 2, 1.0).unwrap();
        assert!(matches!(
            feedback_control(&kernel, &wrong),
            Err(CoreError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn kernel_text_roundtrip_is_exact() {
        let model = stage_one();
        let weights = unit_weights();
        let kernel = solve_riccati_steady(&model, &weights, 40, None, 1e-10, 20_000).unwrap();
        let mut buf = Vec::new();
        kernel.write_text(&mut buf).unwrap();
        let back = RiccatiKernel::read_text(std::io::BufReader::new(&buf[..]), weights).unwrap();
        assert_eq!(back.n_cells(), kernel.n_cells());
        assert_eq!(back.speed, kernel.speed);
        assert_eq!(back.values(), kernel.values());

        let field = DensityField::from_fn(40, |z| 0.3 + z * z).unwrap();
        let a = feedback_control(&kernel, &field).unwrap();
        let b = feedback_control(&back, &field).unwrap();
        assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn kernel_read_rejects_garbage() {
        let weights = unit_weights();
        let bad = "not-a-kernel 3 1.0 1.0\n";
        assert!(matches!(
            RiccatiKernel::read_text(std::io::BufReader::new(bad.as_bytes()), weights),
            Err(CoreError::KernelFormat(_))
        ));
        let short = "riccati-kernel 2 1.0 1.0\n0 0 0\n";
        assert!(matches!(
            RiccatiKernel::read_text(std::io::BufReader::new(short.as_bytes()), weights),
            Err(CoreError::KernelFormat(_))
        ));
    }

    #[test]
    fn open_loop_and_time_varying_feedback_costs_agree() {
        let model = stage_one();
        let weights = unit_weights();
        let n = 100;
        let rho0 = DensityField::from_fn(n, |z: f64| 0.5 * (std::f64::consts::PI * z).sin()).unwrap();
        let dz = rho0.dz();
        let dt = dz / model.speed;
        let t_end = 1.5;
        let m = step_count(t_end, dt).unwrap();

        let sol = solve_open_loop(&model, &weights, &rho0, t_end, dt, 5000, 1e-9).unwrap();

        let rows = solve_riccati_transient(&model, &weights, n, t_end, dt).unwrap();
        assert_eq!(rows.len(), m + 1);
        let mut stepper = LinearStepper::new(&model, rho0.clone(), dt).unwrap();
        let mut control = vec![0.0; m + 1];
        let mut grid = SpaceTimeGrid::zeros(n + 1, m + 1, dz, dt);
        grid.row_mut(0).copy_from_slice(rho0.values());
        control[0] =
            -trapezoid_product(&rows[0], rho0.values(), dz) / weights.input;
        for k in 0..m {
            let u = -trapezoid_product(&rows[k], stepper.field().values(), dz) / weights.input;
            let applied = if k == 0 { control[0] } else { u };
            stepper.step(&mut |_| applied);
            control[k + 1] = applied;
            grid.row_mut(k + 1).copy_from_slice(stepper.field().values());
        }
        let feedback_cost = cost(&model, &weights, &grid, &control).unwrap();
        let rel = (feedback_cost - sol.cost).abs() / sol.cost;
        assert!(rel <= 0.02, "cost mismatch {rel}: {} vs {}", feedback_cost, sol.cost);
    }

    #[test]
    fn closed_loop_feedback_drains_the_state() {
        let model = stage_one();
        let weights = unit_weights();
        let n = 100;
        let kernel = solve_riccati_steady(&model, &weights, n, None, 1e-10, 50_000).unwrap();
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        for _ in 0..3 {
            let a = rng.gen_range(-1.0..1.0);
            let b = rng.gen_range(-1.0..1.0);
            let rho0 = DensityField::from_fn(n, |z: f64| {
                a * (std::f64::consts::PI * z).sin() + b * (3.0 * std::f64::consts::PI * z).cos()
            })
            .unwrap();
            let dz = rho0.dz();
            let dt = dz / model.speed;
            let transit = 1.0 / model.speed;
            let t_end = 3.0 * transit;
            let m = step_count(t_end, dt).unwrap();
            let mut stepper = LinearStepper::new(&model, rho0, dt).unwrap();
            let energy = |vals: &[f64]| trapezoid_product(vals, vals, dz);
            let e0 = energy(stepper.field().values());
            let mut previous = f64::INFINITY;
            for k in 0..m {
                let u = feedback_from_samples(&kernel, stepper.field().values()).unwrap();
                stepper.step(&mut |_| u);
                let t = (k + 1) as f64 * dt;
                let e = energy(stepper.field().values());
                if t > transit + 2.0 * dt {
                    assert!(e <= previous + 1e-9 * e0, "energy grew at t = {t}");
                }
                previous = e;
            }
            assert!(energy(stepper.field().values()) <= 1e-3 * e0);
        }
    }
}
