//! Newton–Raphson AC power flow in polar coordinates.
//!
//! Used to produce the ground-truth operating points behind each dataset
//! sample. The Jacobian is assembled dense; the systems handled here are at
//! most a few hundred buses.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_model::{BusKind, PowerSystem};

pub const DEFAULT_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub v_mag: Vec<f64>,
    pub v_ang: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub max_mismatch: f64,
}

impl OperatingPoint {
    pub fn voltages(&self) -> Vec<Complex64> {
        self.v_mag
            .iter()
            .zip(&self.v_ang)
            .map(|(&m, &a)| Complex64::from_polar(m, a))
            .collect()
    }

    /// Rectangular state `[v_re(0..n), v_im(0..n)]`.
    pub fn state(&self) -> Vec<f64> {
        let v = self.voltages();
        v.iter().map(|c| c.re).chain(v.iter().map(|c| c.im)).collect()
    }
}

/// Specified net bus injections (generation minus load), per-unit.
///
/// `p` is enforced at PV and PQ buses, `q` at PQ buses only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injections {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// Multiplier applied to each bus load (1.0 where untouched).
    pub load_scale: Vec<f64>,
}

impl Injections {
    pub fn nominal(sys: &PowerSystem) -> Self {
        let p = sys
            .buses
            .iter()
            .map(|b| match b.kind {
                BusKind::PQ => -b.p_load,
                _ => b.p_gen - b.p_load,
            })
            .collect();
        let q = sys.buses.iter().map(|b| -b.q_load).collect();
        Injections {
            p,
            q,
            load_scale: vec![1.0; sys.n_buses()],
        }
    }
}

/// Random load scenario: every PQ bus load is scaled by an independent
/// factor from `U[1 - spread, 1 + spread]`, and PV generation follows the
/// aggregate PQ load scaling.
pub fn sample_injections(sys: &PowerSystem, rng_seed: u64, spread: f64) -> Injections {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut load_scale = vec![1.0; sys.n_buses()];
    let (mut nominal, mut scaled) = (0.0, 0.0);
    for (bus, scale) in sys.buses.iter().zip(load_scale.iter_mut()) {
        if bus.kind == BusKind::PQ {
            let u: f64 = rng.random();
            *scale = 1.0 + spread * (2.0 * u - 1.0);
            nominal += bus.p_load;
            scaled += bus.p_load * *scale;
        }
    }
    let aggregate = if nominal.abs() > 0.0 { scaled / nominal } else { 1.0 };

    let mut inj = Injections::nominal(sys);
    for (i, bus) in sys.buses.iter().enumerate() {
        match bus.kind {
            BusKind::PQ => {
                inj.p[i] = -bus.p_load * load_scale[i];
                inj.q[i] = -bus.q_load * load_scale[i];
            }
            BusKind::PV => inj.p[i] = bus.p_gen * aggregate - bus.p_load,
            BusKind::Slack => {}
        }
    }
    inj.load_scale = load_scale;
    inj
}

/// Sparse bus admittance matrix stored row-wise.
#[derive(Debug, Clone)]
pub struct YBus {
    rows: Vec<Vec<(usize, Complex64)>>,
}

impl YBus {
    pub fn new(sys: &PowerSystem) -> Self {
        let n = sys.n_buses();
        let mut rows: Vec<Vec<(usize, Complex64)>> = vec![Vec::new(); n];
        let mut add = |i: usize, j: usize, y: Complex64| match rows[i].iter_mut().find(|(c, _)| *c == j) {
            Some((_, v)) => *v += y,
            None => rows[i].push((j, y)),
        };
        for bus in &sys.buses {
            add(bus.id, bus.id, Complex64::new(bus.g_shunt, bus.b_shunt));
        }
        for br in &sys.branches {
            let y = br.admittance();
            add(br.from, br.from, y.y_ff);
            add(br.from, br.to, y.y_ft);
            add(br.to, br.from, y.y_tf);
            add(br.to, br.to, y.y_tt);
        }
        for row in &mut rows {
            row.sort_by_key(|(c, _)| *c);
        }
        YBus { rows }
    }

    pub fn mul(&self, v: &[Complex64]) -> Vec<Complex64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, y)| y * v[j]).sum())
            .collect()
    }

    /// Complex power injected at every bus, `S = V * conj(Y V)`.
    pub fn power(&self, v: &[Complex64]) -> Vec<Complex64> {
        self.mul(v)
            .iter()
            .zip(v)
            .map(|(i, v)| v * i.conj())
            .collect()
    }
}

pub fn solve_power_flow(
    sys: &PowerSystem,
    injections: &Injections,
    tol: f64,
    max_iter: usize,
) -> Result<OperatingPoint> {
    if !(tol > 0.0) {
        return Err(Error::Invalid(format!("powerflow: tolerance must be positive, got {tol}")));
    }
    let n = sys.n_buses();
    let ybus = YBus::new(sys);
    let pvpq: Vec<usize> = (0..n).filter(|&i| sys.buses[i].kind != BusKind::Slack).collect();
    let pq: Vec<usize> = (0..n).filter(|&i| sys.buses[i].kind == BusKind::PQ).collect();
    // Column position of each bus's angle / magnitude unknown.
    let mut ang_col = vec![usize::MAX; n];
    let mut mag_col = vec![usize::MAX; n];
    for (k, &i) in pvpq.iter().enumerate() {
        ang_col[i] = k;
    }
    for (k, &i) in pq.iter().enumerate() {
        mag_col[i] = pvpq.len() + k;
    }
    let dim = pvpq.len() + pq.len();

    let mut v_mag: Vec<f64> = sys
        .buses
        .iter()
        .map(|b| if b.kind == BusKind::PQ { 1.0 } else { b.v_setpoint })
        .collect();
    let mut v_ang = vec![0.0; n];

    let mismatch = |v: &[Complex64]| -> Vec<f64> {
        let s = ybus.power(v);
        pvpq.iter()
            .map(|&i| s[i].re - injections.p[i])
            .chain(pq.iter().map(|&i| s[i].im - injections.q[i]))
            .collect()
    };
    let inf_norm = |f: &[f64]| f.iter().fold(0.0_f64, |m, x| m.max(x.abs()));

    let mut v: Vec<Complex64> = (0..n).map(|i| Complex64::from_polar(v_mag[i], v_ang[i])).collect();
    let mut f = mismatch(&v);
    let mut norm = inf_norm(&f);
    let mut iterations = 0;

    while !(norm <= tol) && iterations < max_iter {
        if !norm.is_finite() {
            break;
        }
        iterations += 1;
        let current = ybus.mul(&v);
        let mut jac = DMatrix::<f64>::zeros(dim, dim);
        for (row_p, &i) in pvpq.iter().enumerate() {
            let row_q = mag_col[i];
            let vi = v[i];
            for &(j, y) in &ybus.rows[i] {
                let unit_j = v[j] / v_mag[j];
                let (ds_dang, ds_dmag) = if i == j {
                    (
                        Complex64::i() * vi * (current[i] - y * vi).conj(),
                        vi * (y * unit_j).conj() + current[i].conj() * unit_j,
                    )
                } else {
                    (-Complex64::i() * vi * (y * v[j]).conj(), vi * (y * unit_j).conj())
                };
                if ang_col[j] != usize::MAX {
                    jac[(row_p, ang_col[j])] = ds_dang.re;
                    if row_q != usize::MAX {
                        jac[(row_q, ang_col[j])] = ds_dang.im;
                    }
                }
                if mag_col[j] != usize::MAX {
                    jac[(row_p, mag_col[j])] = ds_dmag.re;
                    if row_q != usize::MAX {
                        jac[(row_q, mag_col[j])] = ds_dmag.im;
                    }
                }
            }
        }
        let rhs = DVector::from_vec(f.iter().map(|x| -x).collect());
        let dx = jac.lu().solve(&rhs).ok_or(Error::Singular {
            context: "powerflow",
            condition: f64::INFINITY,
        })?;
        for &i in &pvpq {
            v_ang[i] += dx[ang_col[i]];
        }
        for &i in &pq {
            v_mag[i] += dx[mag_col[i]];
        }
        v = (0..n).map(|i| Complex64::from_polar(v_mag[i], v_ang[i])).collect();
        f = mismatch(&v);
        norm = inf_norm(&f);
    }

    if !(norm <= tol) || v_mag.iter().any(|&m| !(m > 0.0)) {
        return Err(Error::NonConvergence {
            iterations,
            mismatch: norm,
        });
    }
    Ok(OperatingPoint {
        v_mag,
        v_ang,
        converged: true,
        iterations,
        max_mismatch: norm,
    })
}
