//! Linear interpolant, guidance, samplers and inversion.
//!
//! Time runs from `t = 0` (data) to `t = 1` (noise): `x_t = (1 - t) x0 + t eps`.

use mupad_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MupadError, Result};

/// A velocity field `v(z, t | cond)` with a classifier-free-guidance null condition.
pub trait VelocityModel {
    type Cond;

    fn velocity(&self, z: &Tensor, t: f64, cond: &Self::Cond) -> Result<Tensor>;

    fn null_condition(&self, cond: &Self::Cond) -> Self::Cond;

    /// `false` when `cond` already equals its null, so guidance can skip the second pass.
    fn has_condition(&self, _cond: &Self::Cond) -> bool {
        true
    }
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(MupadError::Invalid(format!("t = {t} outside [0, 1]")));
    }
    Ok(())
}

/// Returns `(x_t, v_target)` with `v_target = eps - x0`.
pub fn interpolate(x0: &Tensor, eps: &Tensor, t: f64) -> Result<(Tensor, Tensor)> {
    check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(MupadError::Invalid(format!(
            "interpolate shapes {:?} and {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    let xt = x0.zip_map(eps, |a, e| (1.0 - t) * a + t * e)?;
    let v = eps.sub(x0)?;
    Ok((xt, v))
}

/// `v_u + w (v_c - v_u)`.
pub fn guided_velocity(v_cond: &Tensor, v_uncond: &Tensor, w: f64) -> Result<Tensor> {
    Ok(v_uncond.zip_map(v_cond, |u, c| u + w * (c - u))?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleShape {
    Linear,
}

/// Guidance weight as a function of normalized solver progress `u` in [0, 1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceSchedule {
    pub w_start: f64,
    pub w_end: f64,
    pub shape: ScheduleShape,
}

impl Default for GuidanceSchedule {
    fn default() -> Self {
        GuidanceSchedule {
            w_start: 2.5,
            w_end: 0.0,
            shape: ScheduleShape::Linear,
        }
    }
}

impl GuidanceSchedule {
    pub fn constant(w: f64) -> Self {
        GuidanceSchedule {
            w_start: w,
            w_end: w,
            shape: ScheduleShape::Linear,
        }
    }

    pub fn at(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        match self.shape {
            ScheduleShape::Linear => self.w_start + (self.w_end - self.w_start) * u,
        }
    }

    /// Weight at step `i` of `steps`.
    pub fn at_step(&self, i: usize, steps: usize) -> f64 {
        if steps <= 1 {
            self.at(0.0)
        } else {
            self.at(i as f64 / (steps - 1) as f64)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    Ode,
    Sde,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub mode: SamplerMode,
    /// Diffusion coefficient is `noise_scale * t`.
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 250,
            mode: SamplerMode::Sde,
            noise_scale: 1.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn ode(steps: usize) -> Self {
        SamplerConfig {
            steps,
            mode: SamplerMode::Ode,
            noise_scale: 0.0,
            seed: 0,
        }
    }
}

/// Uniform grid from 1 down to 0: `t_i = 1 - i/steps`.
pub fn time_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| 1.0 - i as f64 / steps as f64).collect()
}

/// Guided velocity at one point; skips passes that cannot affect the result.
pub fn guided_model_velocity<M: VelocityModel>(
    model: &M,
    z: &Tensor,
    t: f64,
    cond: &M::Cond,
    w: f64,
) -> Result<Tensor> {
    if w == 1.0 || !model.has_condition(cond) {
        return model.velocity(z, t, cond);
    }
    let null = model.null_condition(cond);
    let vu = model.velocity(z, t, &null)?;
    if w == 0.0 {
        return Ok(vu);
    }
    let vc = model.velocity(z, t, cond)?;
    guided_velocity(&vc, &vu, w)
}

fn check_steps(steps: usize) -> Result<()> {
    if steps == 0 {
        return Err(MupadError::Invalid("sampler needs at least one step".into()));
    }
    Ok(())
}

fn finite_or(z: Tensor, step: usize) -> Result<Tensor> {
    if z.all_finite() {
        Ok(z)
    } else {
        Err(MupadError::Diverged { step })
    }
}

/// Euler integration of `dz/dt = v` from `t = 1` to `t = 0`.
pub fn sample_ode<M: VelocityModel>(
    model: &M,
    z_t: &Tensor,
    cond: &M::Cond,
    cfg: &SamplerConfig,
    sched: &GuidanceSchedule,
) -> Result<Tensor> {
    check_steps(cfg.steps)?;
    let grid = time_grid(cfg.steps);
    let mut z = z_t.clone();
    for i in 0..cfg.steps {
        let dt = grid[i] - grid[i + 1];
        let v = guided_model_velocity(model, &z, grid[i], cond, sched.at_step(i, cfg.steps))?;
        z = finite_or(z.axpy(-dt, &v)?, i)?;
    }
    Ok(z)
}

/// Euler-Maruyama on the reverse-time SDE with diffusion `g(t) = noise_scale * t`.
///
/// `z <- z - dt (v + g^2/(2t) eps_hat) + g sqrt(dt) xi`, where `eps_hat = z + (1 - t) v`.
/// No noise is added on the final step.
pub fn sample_sde<M: VelocityModel>(
    model: &M,
    z_t: &Tensor,
    cond: &M::Cond,
    cfg: &SamplerConfig,
    sched: &GuidanceSchedule,
) -> Result<Tensor> {
    check_steps(cfg.steps)?;
    let grid = time_grid(cfg.steps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut z = z_t.clone();
    let ns = cfg.noise_scale;
    for i in 0..cfg.steps {
        let t = grid[i];
        let dt = t - grid[i + 1];
        let v = guided_model_velocity(model, &z, t, cond, sched.at_step(i, cfg.steps))?;
        let last = i + 1 == cfg.steps;
        let mut next = if ns == 0.0 {
            z.axpy(-dt, &v)?
        } else {
            let c = 0.5 * ns * ns * t;
            let drift = z.zip_map(&v, |zi, vi| vi + c * (zi + (1.0 - t) * vi))?;
            z.axpy(-dt, &drift)?
        };
        if !last && ns != 0.0 {
            let xi = Tensor::randn(z.shape(), 1.0, &mut rng);
            next = next.axpy(ns * t * dt.sqrt(), &xi)?;
        }
        z = finite_or(next, i)?;
    }
    Ok(z)
}

/// Dispatches on `cfg.mode`.
pub fn sample<M: VelocityModel>(
    model: &M,
    z_t: &Tensor,
    cond: &M::Cond,
    cfg: &SamplerConfig,
    sched: &GuidanceSchedule,
) -> Result<Tensor> {
    match cfg.mode {
        SamplerMode::Ode => sample_ode(model, z_t, cond, cfg, sched),
        SamplerMode::Sde => sample_sde(model, z_t, cond, cfg, sched),
    }
}

/// Deterministic inversion from `t = 0` to `t = 1` on the same grid as [`sample_ode`].
///
/// Each step evaluates the conditional velocity (no guidance) at the current state and
/// the next grid time: `z_{t+dt} = z_t + dt v(z_t, t + dt)`.
pub fn ddim_invert<M: VelocityModel>(
    model: &M,
    z0: &Tensor,
    cond: &M::Cond,
    steps: usize,
) -> Result<Tensor> {
    check_steps(steps)?;
    let mut z = z0.clone();
    for i in 0..steps {
        let t_next = (i + 1) as f64 / steps as f64;
        let dt = 1.0 / steps as f64;
        let v = model.velocity(&z, t_next, cond)?;
        z = finite_or(z.axpy(dt, &v)?, i)?;
    }
    Ok(z)
}
