//! Browser bindings for the contact model: indentation curves, surface stress
//! profiles and the sliding speed limit. Each export returns a flat `Float64Array`
//! of row-major samples.

use hertzmpc::soft_contact::{self, ContactParams};
use wasm_bindgen::prelude::*;

fn params(e2: f64, r_mm: f64, nu2: f64, mu: f64) -> Result<ContactParams, String> {
    let p = ContactParams {
        e2,
        r: r_mm * 1e-3,
        nu2,
        mu,
        ..ContactParams::default()
    };
    p.validate().map_err(|e| e.to_string())?;
    Ok(p)
}

fn samples(n: usize) -> Result<usize, String> {
    if (2..=10_000).contains(&n) {
        Ok(n)
    } else {
        Err(format!("sample count {n} outside 2..=10000"))
    }
}

/// Rows `(F [N], d [mm], a [mm], stiffness [N/mm], friction [N])` for `F` in `(0, f_max]`.
pub fn hertz_rows(e2: f64, r_mm: f64, nu2: f64, mu: f64, f_max: f64, n: usize) -> Result<Vec<f64>, String> {
    let p = params(e2, r_mm, nu2, mu)?;
    let n = samples(n)?;
    if !(f_max > 0.0) {
        return Err("maximum force must be positive".into());
    }
    let mut out = Vec::with_capacity(5 * n);
    for i in 1..=n {
        let f = f_max * i as f64 / n as f64;
        let d = soft_contact::hertz_deformation(&p, f).map_err(|e| e.to_string())?;
        out.extend([
            f,
            d * 1e3,
            (p.r * d).sqrt() * 1e3,
            soft_contact::normal_stiffness(&p, f) * 1e-3,
            soft_contact::sliding_friction_magnitude(&p, f),
        ]);
    }
    Ok(out)
}

/// Rows `(r / a, sigma_z, sigma_r, sigma_theta, sigma_n)` over `r in [0, r_max a]`,
/// stresses divided by the mean pressure.
pub fn stress_rows(e2: f64, r_mm: f64, nu2: f64, force: f64, r_max: f64, n: usize) -> Result<Vec<f64>, String> {
    let p = params(e2, r_mm, nu2, 0.0)?;
    let n = samples(n)?;
    if !(r_max > 0.0) {
        return Err("radial range must be positive".into());
    }
    let a = soft_contact::contact_radius(&p, force).map_err(|e| e.to_string())?;
    let mut out = Vec::with_capacity(5 * n);
    for i in 0..n {
        let rho = r_max * i as f64 / (n - 1) as f64;
        let s = soft_contact::stress_at(&p, force, rho * a).map_err(|e| e.to_string())?;
        out.extend([rho, s.sigma_z / s.p_m, s.sigma_r / s.p_m, s.sigma_theta / s.p_m, s.sigma_n / s.p_m]);
    }
    Ok(out)
}

/// Rows `(F [N], v* [m/s])`: the speed above which friction cannot hold a path of
/// radius `radius` (m) for a tool of effective mass `m_eff`.
pub fn sliding_rows(mu: f64, m_eff: f64, radius: f64, f_max: f64, n: usize) -> Result<Vec<f64>, String> {
    let n = samples(n)?;
    if !(mu >= 0.0 && m_eff > 0.0 && radius > 0.0 && f_max > 0.0) {
        return Err("need mu >= 0 and positive mass, path radius and force range".into());
    }
    Ok((0..n)
        .flat_map(|i| {
            let f = f_max * i as f64 / (n - 1) as f64;
            [f, soft_contact::threshold_speed(mu, f, m_eff, radius)]
        })
        .collect())
}

/// Margin `mu F_z - m_eff v^2 / radius` (N) at one operating point.
pub fn sliding_margin_value(mu: f64, f_z: f64, m_eff: f64, speed: f64, radius: f64) -> f64 {
    mu * f_z - m_eff * speed * speed / radius
}

#[wasm_bindgen]
pub fn hertz_curves(e2: f64, r_mm: f64, nu2: f64, mu: f64, f_max: f64, n: usize) -> Result<Vec<f64>, JsError> {
    hertz_rows(e2, r_mm, nu2, mu, f_max, n).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn stress_profile(e2: f64, r_mm: f64, nu2: f64, force: f64, r_max: f64, n: usize) -> Result<Vec<f64>, JsError> {
    stress_rows(e2, r_mm, nu2, force, r_max, n).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn sliding_limit(mu: f64, m_eff: f64, radius: f64, f_max: f64, n: usize) -> Result<Vec<f64>, JsError> {
    sliding_rows(mu, m_eff, radius, f_max, n).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn sliding_margin(mu: f64, f_z: f64, m_eff: f64, speed: f64, radius: f64) -> f64 {
    sliding_margin_value(mu, f_z, m_eff, speed, radius)
}
