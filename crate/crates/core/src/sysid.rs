//! Contact-parameter identification from force, velocity and indentation logs.
//!
//! The modulus comes from a least-squares fit of the Hertz indentation law; `mu` and
//! `k_d` from a robust fit of the sliding-friction magnitude
//! `|F_fric| = mu F_z [1 + (2 nu - 1) 3 d / (10 R)] + k_d |v|`.

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::soft_contact::{self, ContactParams};
use crate::trajopt::trace::csv_error;

pub const MIN_SAMPLES: usize = 10;

/// One logged sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdSample {
    pub t: f64,
    #[serde(rename = "F_z")]
    pub f_z: f64,
    pub v_x: f64,
    pub v_y: f64,
    #[serde(rename = "F_fric_x")]
    pub f_fric_x: f64,
    #[serde(rename = "F_fric_y")]
    pub f_fric_y: f64,
    /// Measured indentation (m).
    pub d: f64,
}

impl IdSample {
    pub fn speed(&self) -> f64 {
        Vector2::new(self.v_x, self.v_y).norm()
    }

    pub fn friction(&self) -> f64 {
        Vector2::new(self.f_fric_x, self.f_fric_y).norm()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdDataset {
    pub samples: Vec<IdSample>,
}

impl IdDataset {
    pub fn validate(&self) -> Result<()> {
        if self.samples.len() < MIN_SAMPLES {
            return Err(Error::DegenerateDataset(format!(
                "{} samples, at least {MIN_SAMPLES} required",
                self.samples.len()
            )));
        }
        if let Some((i, s)) = self
            .samples
            .iter()
            .enumerate()
            .find(|(_, s)| !(s.f_z > 0.0) || ![s.v_x, s.v_y, s.f_fric_x, s.f_fric_y, s.d].iter().all(|v| v.is_finite()))
        {
            return Err(Error::DegenerateDataset(format!(
                "sample {i} has F_z = {} or a non-finite entry",
                s.f_z
            )));
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, source_name: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let samples = r
            .deserialize()
            .collect::<std::result::Result<Vec<IdSample>, _>>()
            .map_err(|e| csv_error(source_name, &e))?;
        Ok(Self { samples })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, &path.display().to_string())
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for s in &self.samples {
            w.serialize(s).map_err(|e| csv_error("dataset", &e))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Robust loss applied to the friction residuals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobustLoss {
    /// `s^2 ln cosh(r / s)`.
    Logistic,
    /// `2 s^2 (sqrt(1 + (r / s)^2) - 1)`.
    SoftL1,
    Squared,
}

impl RobustLoss {
    fn rho(self, r: f64, s: f64) -> f64 {
        let z = r / s;
        match self {
            // ln cosh z = |z| + ln(1 + e^{-2|z|}) - ln 2, stable for large |z|.
            RobustLoss::Logistic => s * s * (z.abs() + (-2.0 * z.abs()).exp().ln_1p() - std::f64::consts::LN_2),
            RobustLoss::SoftL1 => 2.0 * s * s * ((1.0 + z * z).sqrt() - 1.0),
            RobustLoss::Squared => 0.5 * r * r,
        }
    }

    /// IRLS weight `rho'(r) / r`.
    fn weight(self, r: f64, s: f64) -> f64 {
        let z = r / s;
        match self {
            RobustLoss::Logistic if z.abs() < 1e-8 => 1.0,
            RobustLoss::Logistic => z.tanh() / z,
            RobustLoss::SoftL1 => 2.0 / (1.0 + z * z).sqrt(),
            RobustLoss::Squared => 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitOptions {
    pub max_iters: usize,
    /// Relative step size at which the iteration stops.
    pub tolerance: f64,
    pub loss: RobustLoss,
    /// Residual scale of the robust loss (N).
    pub loss_scale: f64,
    pub mu0: f64,
    pub k_d0: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tolerance: 1e-12,
            loss: RobustLoss::Logistic,
            loss_scale: 1.0,
            mu0: 0.3,
            k_d0: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModulusFit {
    /// Reduced modulus (Pa).
    pub e: f64,
    /// RMS indentation residual (m).
    pub rms_residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrictionFit {
    pub mu: f64,
    pub k_d: f64,
    /// Coefficient of determination of the friction magnitude.
    pub r_squared: f64,
    pub rms_residual: f64,
    pub iterations: usize,
}

/// Damped Gauss-Newton (Levenberg-Marquardt) on `sum rho(r_k)` with IRLS weights.
///
/// `eval` returns the residuals and their Jacobian at `p`.
fn levenberg_marquardt<F>(
    mut p: DVector<f64>,
    eval: F,
    loss: RobustLoss,
    scale: f64,
    max_iters: usize,
    tolerance: f64,
) -> Result<(DVector<f64>, usize)>
where
    F: Fn(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>),
{
    let cost = |r: &DVector<f64>| r.iter().map(|&x| loss.rho(x, scale)).sum::<f64>();
    let (mut r, mut jac) = eval(&p);
    let mut c = cost(&r);
    let mut lambda = 1e-3;
    for k in 0..max_iters {
        let w = DVector::from_iterator(r.len(), r.iter().map(|&x| loss.weight(x, scale)));
        let jw = DMatrix::from_fn(jac.nrows(), jac.ncols(), |i, j| jac[(i, j)] * w[i]);
        let jtj = jw.tr_mul(&jac);
        let g = jw.tr_mul(&r);
        let mut accepted = false;
        while lambda < 1e12 {
            let mut a = jtj.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|ch| ch.solve(&(-&g))) else {
                lambda *= 10.0;
                continue;
            };
            let trial = &p + &step;
            let (r_t, j_t) = eval(&trial);
            let c_t = cost(&r_t);
            if c_t.is_finite() && c_t <= c {
                let small = step.norm() <= tolerance * (p.norm() + tolerance);
                p = trial;
                r = r_t;
                jac = j_t;
                let stalled = c - c_t <= tolerance * c;
                c = c_t;
                lambda = (lambda * 0.1).max(1e-12);
                accepted = true;
                if small || stalled {
                    return Ok((p, k + 1));
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // No descent step at any damping: already at a stationary point.
            return Ok((p, k + 1));
        }
    }
    Err(Error::FitNotConverged { iterations: max_iters })
}

/// Exact modulus from one `(F, d)` pair, `E = 3 F / (4 sqrt(R d^3))`.
pub fn modulus_from_sample(f_z: f64, d: f64, r: f64) -> Result<f64> {
    if !(f_z > 0.0 && d > 0.0 && r > 0.0) {
        return Err(Error::invalid("sample", "force, indentation and radius must be positive"));
    }
    Ok(3.0 * f_z / (4.0 * (r * d * d * d).sqrt()))
}

/// Fits the reduced modulus to `d_k = (9 F_k^2 / (16 E^2 R))^(1/3)` by least squares in `ln E`.
pub fn fit_modulus(data: &IdDataset, r: f64, opts: &FitOptions) -> Result<ModulusFit> {
    data.validate()?;
    if let Some(s) = data.samples.iter().find(|s| !(s.d > 0.0)) {
        return Err(Error::DegenerateDataset(format!("non-positive indentation {} at t = {}", s.d, s.t)));
    }
    // Median-force sample for the starting point.
    let mut idx: Vec<usize> = (0..data.samples.len()).collect();
    idx.sort_by(|&a, &b| data.samples[a].f_z.total_cmp(&data.samples[b].f_z));
    let s0 = data.samples[idx[idx.len() / 2]];
    let e0 = modulus_from_sample(s0.f_z, s0.d, r)?;

    // d_k = c_k exp(-2/3 ln E)
    let c: Vec<f64> = data
        .samples
        .iter()
        .map(|s| (9.0 * s.f_z * s.f_z / (16.0 * r)).cbrt())
        .collect();
    let eval = |p: &DVector<f64>| {
        let m = (-2.0 / 3.0 * p[0]).exp();
        let res = DVector::from_iterator(c.len(), c.iter().zip(&data.samples).map(|(ck, s)| s.d - ck * m));
        let jac = DMatrix::from_iterator(c.len(), 1, c.iter().map(|ck| 2.0 / 3.0 * ck * m));
        (res, jac)
    };
    let (p, iterations) = levenberg_marquardt(
        DVector::from_element(1, e0.ln()),
        eval,
        RobustLoss::Squared,
        1.0,
        opts.max_iters,
        opts.tolerance,
    )?;
    let (res, _) = eval(&p);
    Ok(ModulusFit {
        e: p[0].exp(),
        rms_residual: (res.norm_squared() / res.len() as f64).sqrt(),
        iterations,
    })
}

/// Robust fit of `mu` and `k_d` with `E`, `R` and the surface Poisson ratio taken from `params`.
pub fn fit_friction(data: &IdDataset, params: &ContactParams, opts: &FitOptions) -> Result<FrictionFit> {
    data.validate()?;
    if !(opts.loss_scale > 0.0) {
        return Err(Error::invalid("loss_scale", "must be positive"));
    }
    let n = data.samples.len();
    // Regressors: sliding factor F_z [1 + ...] and speed.
    let unit = ContactParams { mu: 1.0, ..params.clone() };
    let a: Vec<f64> = data
        .samples
        .iter()
        .map(|s| soft_contact::sliding_friction_magnitude(&unit, s.f_z))
        .collect();
    let v: Vec<f64> = data.samples.iter().map(IdSample::speed).collect();
    let y: Vec<f64> = data.samples.iter().map(IdSample::friction).collect();

    let spread = |x: &[f64]| {
        let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        hi - lo
    };
    if spread(&v) <= 1e-9 * v.iter().fold(1.0f64, |m, x| m.max(x.abs())) {
        return Err(Error::DegenerateDataset("sliding speed is constant".into()));
    }
    // The two regressors must not be collinear, or mu and k_d trade off freely.
    let design = DMatrix::from_fn(n, 2, |i, j| if j == 0 { a[i] } else { v[i] });
    let sv = design.clone().svd(false, false).singular_values;
    if sv[1] <= 1e-8 * sv[0] {
        return Err(Error::DegenerateDataset("normal force and speed are collinear".into()));
    }

    let eval = |p: &DVector<f64>| {
        let res = DVector::from_fn(n, |i, _| y[i] - p[0] * a[i] - p[1] * v[i]);
        (res, -design.clone())
    };
    let (p, iterations) = levenberg_marquardt(
        DVector::from_vec(vec![opts.mu0, opts.k_d0]),
        eval,
        opts.loss,
        opts.loss_scale,
        opts.max_iters,
        opts.tolerance,
    )?;
    let (res, _) = eval(&p);
    let mean = y.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res = res.norm_squared();
    Ok(FrictionFit {
        mu: p[0],
        k_d: p[1],
        r_squared: if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { f64::NAN },
        rms_residual: (ss_res / n as f64).sqrt(),
        iterations,
    })
}

/// Surface modulus `E2` reproducing the reduced modulus `e` with the tool parameters of `p`.
pub fn surface_modulus(p: &ContactParams, e: f64) -> Result<f64> {
    let rest = 1.0 / e - (1.0 - p.nu1 * p.nu1) / p.e1;
    if !(rest > 0.0) {
        return Err(Error::invalid("E", "fitted modulus exceeds the tool's own stiffness"));
    }
    Ok((1.0 - p.nu2 * p.nu2) / rest)
}

#[derive(Debug, Clone, Serialize)]
pub struct IdReport {
    pub modulus: ModulusFit,
    pub friction: FrictionFit,
    pub params: ContactParams,
}

impl IdReport {
    pub fn summary(&self) -> String {
        format!(
            "E = {:.4e} Pa (E2 = {:.4e} Pa, rms d residual {:.3e} m)\nmu = {:.4}, k_d = {:.4} N s/m, R^2 = {:.4} (rms {:.3e} N)",
            self.modulus.e,
            self.params.e2,
            self.modulus.rms_residual,
            self.friction.mu,
            self.friction.k_d,
            self.friction.r_squared,
            self.friction.rms_residual
        )
    }
}

/// Modulus fit, then friction fit with the fitted modulus. Tool parameters, Poisson
/// ratios, radius and contact floor come from `base`.
pub fn identify(data: &IdDataset, base: &ContactParams, opts: &FitOptions) -> Result<IdReport> {
    let modulus = fit_modulus(data, base.r, opts)?;
    let mut params = ContactParams {
        e2: surface_modulus(base, modulus.e)?,
        ..base.clone()
    };
    let friction = fit_friction(data, &params, opts)?;
    params.mu = friction.mu;
    params.k_d = friction.k_d;
    params.validate()?;
    Ok(IdReport {
        modulus,
        friction,
        params,
    })
}

/// Settings of the synthetic surface-sweep generator.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub samples: usize,
    pub duration: f64,
    /// Normal force range (N).
    pub force: (f64, f64),
    /// Sliding speed range (m/s).
    pub speed: (f64, f64),
    /// Relative standard deviation of the multiplicative noise on friction and indentation.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            samples: 200,
            duration: 20.0,
            force: (1.0, 10.0),
            speed: (0.01, 0.1),
            noise: 0.0,
            seed: 0,
        }
    }
}

/// Synthetic log of a tool pressed with a slowly varying force while sliding in circles
/// at a varying speed, generated from `params`.
pub fn synthetic_sweep(params: &ContactParams, cfg: &SweepConfig) -> Result<IdDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::invalid("noise", e.to_string()))?;
    let tau = std::f64::consts::TAU;
    let samples = (0..cfg.samples)
        .map(|k| {
            let t = cfg.duration * k as f64 / cfg.samples as f64;
            let s = t / cfg.duration;
            // Incommensurate sweeps so force and speed cover their ranges independently.
            let f_z = cfg.force.0 + (cfg.force.1 - cfg.force.0) * 0.5 * (1.0 - (tau * 3.0 * s).cos());
            let speed = cfg.speed.0 + (cfg.speed.1 - cfg.speed.0) * 0.5 * (1.0 - (tau * 7.3 * s).cos());
            let dir = Vector2::new((tau * 0.4 * t).cos(), (tau * 0.4 * t).sin());
            let vel = dir * speed;
            let fric = soft_contact::friction_force_closed(params, f_z, &vel, &dir);
            let d = soft_contact::hertz_deformation(params, f_z)?;
            let (m_f, m_d) = if cfg.noise > 0.0 {
                (1.0 + noise.sample(&mut rng), 1.0 + noise.sample(&mut rng))
            } else {
                (1.0, 1.0)
            };
            Ok(IdSample {
                t,
                f_z,
                v_x: vel.x,
                v_y: vel.y,
                f_fric_x: fric.x * m_f,
                f_fric_y: fric.y * m_f,
                d: d * m_d,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(IdDataset { samples })
}
