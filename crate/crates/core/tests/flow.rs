mod common;

use common::*;
use mupad::flow::{
    ddim_invert, guided_velocity, sample_ode, sample_sde, GuidanceSchedule, SamplerConfig,
    SamplerMode, VelocityModel,
};
use mupad::model::{ConditionBatch, CrossAttnVariant, Denoiser};
use mupad::tensor::Tensor;
use mupad::Result;
use proptest::prelude::*;

/// Smooth nonlinear field `v(z, t) = tanh(A z) (1 + t) + b * cond`.
struct Smooth {
    a: Tensor,
    b: Tensor,
}

impl Smooth {
    fn new(n: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        Smooth {
            a: Tensor::randn(&[n, n], 1.0 / (n as f64).sqrt(), &mut r),
            b: Tensor::randn(&[n], 1.0, &mut r),
        }
    }
}

impl VelocityModel for Smooth {
    type Cond = f64;

    fn velocity(&self, z: &Tensor, t: f64, cond: &f64) -> Result<Tensor> {
        let n = z.len();
        let out = (0..n)
            .map(|i| {
                let az: f64 = (0..n).map(|j| self.a.data()[i * n + j] * z.data()[j]).sum();
                az.tanh() * (1.0 + t) + self.b.data()[i] * cond
            })
            .collect();
        Ok(Tensor::new(z.shape(), out)?)
    }

    fn null_condition(&self, _: &f64) -> f64 {
        0.0
    }
}

fn rel_l2(a: &Tensor, b: &Tensor) -> f64 {
    a.sub(b).unwrap().norm() / b.norm()
}

#[test]
fn ode_error_is_first_order() {
    let m = Smooth::new(6, 1);
    let z = Tensor::randn(&[6], 1.0, &mut rng(2));
    let g = GuidanceSchedule::constant(1.0);
    let reference = sample_ode(&m, &z, &1.0, &SamplerConfig::ode(10_000), &g).unwrap();
    let steps = [25usize, 50, 100, 200];
    let errs: Vec<f64> = steps
        .iter()
        .map(|&s| sample_ode(&m, &z, &1.0, &SamplerConfig::ode(s), &g).unwrap().sub(&reference).unwrap().norm())
        .collect();
    for w in errs.windows(2) {
        assert!(w[1] < w[0]);
    }
    // least-squares slope of log(err) against log(1/steps)
    let xs: Vec<f64> = steps.iter().map(|&s| -(s as f64).ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 4.0, ys.iter().sum::<f64>() / 4.0);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    assert!((0.7..=1.3).contains(&slope), "slope {slope}");
}

#[test]
fn one_step_is_one_euler_step() {
    let m = Smooth::new(4, 3);
    let z = Tensor::randn(&[4], 1.0, &mut rng(4));
    let g = GuidanceSchedule::constant(1.0);
    let out = sample_ode(&m, &z, &1.0, &SamplerConfig::ode(1), &g).unwrap();
    let want = z.sub(&m.velocity(&z, 1.0, &1.0).unwrap()).unwrap();
    assert_eq!(out, want);
}

#[test]
fn guidance_uses_null_condition() {
    let m = Smooth::new(4, 5);
    let z = Tensor::randn(&[4], 1.0, &mut rng(6));
    let one = sample_ode(&m, &z, &1.0, &SamplerConfig::ode(1), &GuidanceSchedule::constant(2.5)).unwrap();
    let vc = m.velocity(&z, 1.0, &1.0).unwrap();
    let vu = m.velocity(&z, 1.0, &0.0).unwrap();
    let want = z.sub(&guided_velocity(&vc, &vu, 2.5).unwrap()).unwrap();
    assert!(one.max_abs_diff(&want) < 1e-15);
}

#[test]
fn sde_without_noise_is_the_ode() {
    let m = Smooth::new(5, 7);
    let z = Tensor::randn(&[5], 1.0, &mut rng(8));
    let g = GuidanceSchedule::default();
    let cfg = SamplerConfig {
        steps: 40,
        mode: SamplerMode::Sde,
        noise_scale: 0.0,
        seed: 3,
    };
    assert_eq!(
        sample_sde(&m, &z, &1.0, &cfg, &g).unwrap(),
        sample_ode(&m, &z, &1.0, &SamplerConfig::ode(40), &g).unwrap()
    );
}

#[test]
fn sde_is_seed_deterministic_and_variance_grows_with_noise() {
    let m = Smooth::new(3, 9);
    let z = Tensor::randn(&[3], 1.0, &mut rng(10));
    let g = GuidanceSchedule::constant(1.0);
    let cfg = |ns: f64, seed: u64| SamplerConfig {
        steps: 30,
        mode: SamplerMode::Sde,
        noise_scale: ns,
        seed,
    };
    assert_eq!(
        sample_sde(&m, &z, &1.0, &cfg(0.5, 11), &g).unwrap(),
        sample_sde(&m, &z, &1.0, &cfg(0.5, 11), &g).unwrap()
    );
    let variance = |ns: f64| {
        let outs: Vec<Tensor> = (0..100).map(|s| sample_sde(&m, &z, &1.0, &cfg(ns, s), &g).unwrap()).collect();
        let mean = outs.iter().fold(Tensor::zeros(&[3]), |a, o| a.add(o).unwrap()).scale(0.01);
        outs.iter().map(|o| o.sub(&mean).unwrap().norm().powi(2)).sum::<f64>() / 99.0
    };
    let vs: Vec<f64> = [0.0, 0.25, 0.5, 1.0].iter().map(|&n| variance(n)).collect();
    assert!(vs[0] < 1e-20);
    for w in vs.windows(2) {
        assert!(w[1] > w[0], "{vs:?}");
    }
}

#[test]
fn inversion_round_trip_improves_with_steps() {
    let m = Smooth::new(6, 12);
    let z0 = Tensor::randn(&[6], 1.0, &mut rng(13));
    let g = GuidanceSchedule::constant(1.0);
    let err = |s: usize| {
        let zt = ddim_invert(&m, &z0, &1.0, s).unwrap();
        rel_l2(&sample_ode(&m, &zt, &1.0, &SamplerConfig::ode(s), &g).unwrap(), &z0)
    };
    let errs: Vec<f64> = [25, 50, 100, 200].iter().map(|&s| err(s)).collect();
    for w in errs.windows(2) {
        assert!(w[1] < w[0], "{errs:?}");
    }
    assert!(errs[3] < 5e-2);
}

#[test]
fn denoiser_inversion_round_trip() {
    let cfg = tiny_config(CrossAttnVariant::Dca);
    let mut model = Denoiser::new(cfg.clone(), 40).unwrap();
    randomize(&mut model, 41, 0.15);
    let z0 = latent(&cfg, 1, 42);
    let cond = ConditionBatch::repeat(&full_condition(&cfg, 43), 1).unwrap();
    let g = GuidanceSchedule::constant(1.0);
    let err = |s: usize| {
        let zt = ddim_invert(&model, &z0, &cond, s).unwrap();
        rel_l2(&sample_ode(&model, &zt, &cond, &SamplerConfig::ode(s), &g).unwrap(), &z0)
    };
    let (e25, e200) = (err(25), err(200));
    assert!(e200 < 5e-2 && e200 < e25, "{e25} {e200}");
}

struct Exploding;

impl VelocityModel for Exploding {
    type Cond = ();
    fn velocity(&self, z: &Tensor, _: f64, _: &()) -> Result<Tensor> {
        Ok(z.map(|x| x * 1e200))
    }
    fn null_condition(&self, _: &()) {}
}

#[test]
fn divergence_reports_step() {
    let z = Tensor::full(&[2], 1e200);
    let r = sample_ode(&Exploding, &z, &(), &SamplerConfig::ode(5), &GuidanceSchedule::constant(1.0));
    assert!(matches!(r, Err(mupad::MupadError::Diverged { step: 0 })));
}

proptest! {
    #[test]
    fn guidance_self_consistent(v in prop::collection::vec(-10.0f64..10.0, 1..8), w in -5.0f64..5.0) {
        let t = Tensor::from_vec(v);
        let g = guided_velocity(&t, &t, w).unwrap();
        prop_assert!(g.max_abs_diff(&t) < 1e-12);
    }

    #[test]
    fn interpolate_endpoints_exact(x in prop::collection::vec(-10.0f64..10.0, 1..16), seed in 0u64..1000) {
        let x0 = Tensor::from_vec(x);
        let eps = Tensor::randn(x0.shape(), 1.0, &mut rng(seed));
        let (a, v) = mupad::flow::interpolate(&x0, &eps, 0.0).unwrap();
        prop_assert_eq!(a, x0.clone());
        let (b, _) = mupad::flow::interpolate(&x0, &eps, 1.0).unwrap();
        prop_assert_eq!(b, eps.clone());
        prop_assert_eq!(v, eps.sub(&x0).unwrap());
    }
}
