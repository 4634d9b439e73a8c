//! Asymptotic objects built on a [`FlowHistory`]: momentum limits, the
//! velocity correction `A_t` and its limit, reference flows, modified wave
//! operators, the modified distribution `g`, the vector field `F`, and the
//! modified-scattering residual.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::characteristics::FlowHistory;
use crate::initial_data::GaussianData;
use crate::{bracket, Error, Mat3, Result, RieszParams, Vec3};

/// `(t^{1-α} - 1)/(1 - α)`.
pub fn coefficient(t: f64, alpha: f64) -> f64 {
    (t.powf(1.0 - alpha) - 1.0) / (1.0 - alpha)
}

/// `A_t(v) = -Σᵢ wᵢ ∇w(v - Vᵢ)` for the velocities of one snapshot.
pub fn velocity_correction(p: &RieszParams, velocities: &[Vec3], weights: &[f64], v: &Vec3) -> Vec3 {
    let eps2 = p.eps * p.eps;
    let mut a = Vec3::zeros();
    for (u, w) in velocities.iter().zip(weights) {
        let d = v - u;
        let s = d.norm_squared() + eps2;
        if s > 0.0 {
            a -= p.grad_from_r2(&d, s) * *w;
        }
    }
    a
}

/// `∇_v A_t(v) = -Σᵢ wᵢ ∇²w(v - Vᵢ)`.
pub fn velocity_correction_jacobian(p: &RieszParams, velocities: &[Vec3], weights: &[f64], v: &Vec3) -> Mat3 {
    let eps2 = p.eps * p.eps;
    let mut j = Mat3::zeros();
    for (u, w) in velocities.iter().zip(weights) {
        let d = v - u;
        let s = d.norm_squared() + eps2;
        if s > 0.0 {
            j -= p.hessian_from_r2(&d, s) * *w;
        }
    }
    j
}

/// `∂_t A_t(v) = Σᵢ wᵢ ∇²w(v - Vᵢ) E(t, Xᵢ)`, from `V̇ᵢ = E(t, Xᵢ)`.
pub fn velocity_correction_rate(p: &RieszParams, velocities: &[Vec3], weights: &[f64], node_fields: &[Vec3], v: &Vec3) -> Vec3 {
    let eps2 = p.eps * p.eps;
    let mut r = Vec3::zeros();
    for ((u, w), e) in velocities.iter().zip(weights).zip(node_fields) {
        let d = v - u;
        let s = d.norm_squared() + eps2;
        if s > 0.0 {
            r += p.hessian_from_r2(&d, s) * e * *w;
        }
    }
    r
}

/// `(x + t v - c(t) A, v)` for a correction value `A` (either `A_t(v)` or `A_∞(v)`).
pub fn ref_flow(t: f64, x: &Vec3, v: &Vec3, a: &Vec3, alpha: f64) -> (Vec3, Vec3) {
    (x + v * t - a * coefficient(t, alpha), *v)
}

/// `W1 = X - tV + c(t) A_t(V)`, `W2 = V` for a trajectory state at time `t`.
pub fn wave_op(t: f64, x: &Vec3, v: &Vec3, a_t_of_v: &Vec3, alpha: f64) -> (Vec3, Vec3) {
    (x - v * t + a_t_of_v * coefficient(t, alpha), *v)
}

/// One-parameter power-law tail extrapolation of a vector series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailLimit {
    pub limit: Vec3,
    pub last: Vec3,
    pub amplitude: Vec3,
    pub exponent: f64,
    pub r_squared: f64,
    pub degenerate: bool,
}

/// Smallest tail (max |y(t) - y(T)| on the window) treated as informative.
pub const TAIL_FLOOR: f64 = 1e-14;
/// Exponents closer to zero than this make the tail model unidentifiable.
pub const EXPONENT_FLOOR: f64 = 0.05;

/// Fit `y(t) - y(T) = C (t^{-p} - T^{-p})` on `window` by least squares
/// through the origin and return `y(T) - C T^{-p}`.
pub fn tail_limit(times: &[f64], values: &[Vec3], p: f64, window: (f64, f64)) -> Result<TailLimit> {
    let k_last = times.len().checked_sub(1).ok_or(Error::InsufficientPoints { needed: 2, got: 0 })?;
    let big_t = times[k_last];
    let last = values[k_last];
    let idx: Vec<usize> = (0..times.len()).filter(|&k| times[k] >= window.0 && times[k] <= window.1).collect();
    let tail = idx.iter().map(|&k| (values[k] - last).norm()).fold(0.0, f64::max);
    let degenerate_result = |exponent_ok: bool| TailLimit {
        limit: last,
        last,
        amplitude: Vec3::zeros(),
        exponent: p,
        r_squared: if exponent_ok { 1.0 } else { 0.0 },
        degenerate: true,
    };
    if tail < TAIL_FLOOR || idx.len() < 2 {
        return Ok(degenerate_result(true));
    }
    if p.abs() < EXPONENT_FLOOR {
        log::warn!("tail exponent {p} is too close to zero; limit taken as the last value");
        return Ok(degenerate_result(false));
    }
    let basis: Vec<f64> = idx.iter().map(|&k| times[k].powf(-p) - big_t.powf(-p)).collect();
    let bb: f64 = basis.iter().map(|b| b * b).sum();
    let mut c = Vec3::zeros();
    for (b, &k) in basis.iter().zip(&idx) {
        c += (values[k] - last) * (*b / bb);
    }
    let ys: Vec<Vec3> = idx.iter().map(|&k| values[k] - last).collect();
    let mean = ys.iter().sum::<Vec3>() / ys.len() as f64;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean).norm_squared()).sum();
    let ss_res: f64 = ys.iter().zip(&basis).map(|(y, b)| (y - c * *b).norm_squared()).sum();
    let r_squared = if ss_tot > 0.0 { (1.0 - ss_res / ss_tot).clamp(0.0, 1.0) } else { 1.0 };
    Ok(TailLimit { limit: last - c * big_t.powf(-p), last, amplitude: c, exponent: p, r_squared, degenerate: false })
}

/// Per-seed momentum limits `V⁺`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumLimitTable {
    pub entries: Vec<TailLimit>,
}

pub fn momentum_limit(times: &[f64], velocities: &[Vec<Vec3>], alpha: f64, window: (f64, f64)) -> Result<MomentumLimitTable> {
    if times.last().copied().unwrap_or(0.0) < 100.0 {
        log::warn!("momentum limits from a history shorter than t = 100 are unreliable");
    }
    let entries = velocities.iter().map(|v| tail_limit(times, v, alpha, window)).collect::<Result<Vec<_>>>()?;
    Ok(MomentumLimitTable { entries })
}

/// Default fit window: the last decade of the run.
pub fn last_decade(t_final: f64) -> (f64, f64) {
    (t_final / 10.0, t_final)
}

/// Tensor grid of seed points, nested across sizes 2 → 3 → 5 → 9 → …
///
/// Each axis uses `n` equispaced points on `[c - r, c + r]` (endpoints
/// included; a single point sits at the centre). Seeds are ordered by the
/// coarsest grid they belong to, then lexicographically, so enlarging the
/// grid only appends seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedGrid {
    pub n_x: usize,
    pub n_v: usize,
    /// Half-widths in units of σ_x and σ_v.
    pub radius_x: f64,
    pub radius_v: f64,
}

impl Default for SeedGrid {
    fn default() -> Self {
        Self { n_x: 5, n_v: 5, radius_x: 2.0, radius_v: 2.0 }
    }
}

/// `(value in units of r, level)` for each node of an `n`-point axis.
fn axis_nodes(n: usize) -> Vec<(f64, u32)> {
    if n == 1 {
        return vec![(0.0, 0)];
    }
    (0..n)
        .map(|j| {
            let u = -1.0 + 2.0 * j as f64 / (n - 1) as f64;
            // level: smallest L with u on the (2^L + 1)-point grid
            let mut level = 0;
            while level < 30 {
                let m = (1u64 << level) as f64;
                let s = (u + 1.0) * 0.5 * m;
                if (s - s.round()).abs() < 1e-9 {
                    break;
                }
                level += 1;
            }
            (u, level)
        })
        .collect()
}

impl SeedGrid {
    pub fn len(&self) -> usize {
        self.n_x.pow(3) * self.n_v.pow(3)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn seeds(&self, d: &GaussianData) -> Vec<(Vec3, Vec3)> {
        let ax = axis_nodes(self.n_x);
        let av = axis_nodes(self.n_v);
        let mut out: Vec<(u32, [f64; 6])> = Vec::with_capacity(self.len());
        for a in &ax {
            for b in &ax {
                for c in &ax {
                    for e in &av {
                        for f in &av {
                            for g in &av {
                                let level = [a.1, b.1, c.1, e.1, f.1, g.1].into_iter().max().unwrap();
                                out.push((level, [a.0, b.0, c.0, e.0, f.0, g.0]));
                            }
                        }
                    }
                }
            }
        }
        out.sort_by(|p, q| p.0.cmp(&q.0).then_with(|| p.1.partial_cmp(&q.1).unwrap()));
        let rx = self.radius_x * d.sigma_x;
        let rv = self.radius_v * d.sigma_v;
        out.into_iter()
            .map(|(_, u)| {
                (d.cx() + Vec3::new(u[0], u[1], u[2]) * rx, d.cv() + Vec3::new(u[3], u[4], u[5]) * rv)
            })
            .collect()
    }
}

/// Cell-centred velocity grid on `[c_v - r σ_v, c_v + r σ_v]³` for `A_t` tables.
pub fn velocity_grid(d: &GaussianData, n: usize, radius: f64) -> Vec<Vec3> {
    let r = radius * d.sigma_v;
    let node = |j: usize| -r + (j as f64 + 0.5) * 2.0 * r / n as f64;
    let mut out = Vec::with_capacity(n * n * n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                out.push(d.cv() + Vec3::new(node(i), node(j), node(k)));
            }
        }
    }
    out
}

/// Per-seed wave-operator record across diagnostic times.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveOperatorSample {
    pub seed: (Vec3, Vec3),
    pub w1: Vec<Vec3>,
    pub w2: Vec<Vec3>,
    pub y: Vec<Vec3>,
    pub w1_plus: TailLimit,
    pub w2_plus: TailLimit,
}

impl WaveOperatorSample {
    /// `|W1(t) - W1⁺| / ⟨x⟩` and `|W2(t) - W2⁺|` at diagnostic index `k`.
    pub fn diffs(&self, k: usize) -> (f64, f64) {
        ((self.w1[k] - self.w1_plus.limit).norm() / bracket(&self.seed.0), (self.w2[k] - self.w2_plus.limit).norm())
    }
}

/// Time-local objects of one history: `A_t` from snapshot velocities and
/// `A_∞` from the per-node momentum limits.
pub struct Scattering<'a> {
    pub history: &'a FlowHistory,
    pub alpha: f64,
    pub kernel: RieszParams,
    pub window: (f64, f64),
    pub v_plus_nodes: Vec<Vec3>,
    times: Vec<f64>,
}

impl<'a> Scattering<'a> {
    pub fn new(history: &'a FlowHistory, window: (f64, f64)) -> Result<Self> {
        let times = history.times();
        let alpha = history.interaction.params.alpha;
        let n = history.len();
        let v_plus_nodes = (0..n)
            .into_par_iter()
            .map(|i| {
                let series: Vec<Vec3> = history.snapshots.iter().map(|s| s.v[i]).collect();
                tail_limit(&times, &series, alpha, window).map(|t| t.limit)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { history, alpha, kernel: history.interaction.velocity_kernel(), window, v_plus_nodes, times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    fn snapshot(&self, t: f64) -> Result<usize> {
        self.history
            .snapshot_index(t)
            .ok_or_else(|| Error::InvalidParameter(format!("t = {t} is not a snapshot time")))
    }

    pub fn a_t(&self, k: usize, v: &Vec3) -> Vec3 {
        velocity_correction(&self.kernel, &self.history.snapshots[k].v, &self.history.weights, v)
    }

    pub fn a_inf(&self, v: &Vec3) -> Vec3 {
        velocity_correction(&self.kernel, &self.v_plus_nodes, &self.history.weights, v)
    }

    pub fn a_jacobian(&self, k: usize, v: &Vec3) -> Mat3 {
        velocity_correction_jacobian(&self.kernel, &self.history.snapshots[k].v, &self.history.weights, v)
    }

    pub fn da_dt(&self, k: usize, v: &Vec3) -> Vec3 {
        velocity_correction_rate(
            &self.kernel,
            &self.history.snapshots[k].v,
            &self.history.weights,
            &self.history.fields[k],
            v,
        )
    }

    /// `∂_t A_t` by a five-point Lagrange derivative over neighbouring
    /// snapshots; `None` near the ends of the history.
    pub fn da_dt_fd(&self, k: usize, v: &Vec3) -> Option<Vec3> {
        if k < 2 || k + 2 >= self.times.len() {
            return None;
        }
        let ts = &self.times[k - 2..=k + 2];
        let t0 = self.times[k];
        let mut d = Vec3::zeros();
        for j in 0..5 {
            // derivative at t0 of the j-th Lagrange basis polynomial
            let mut denom = 1.0;
            for m in 0..5 {
                if m != j {
                    denom *= ts[j] - ts[m];
                }
            }
            let mut num = 0.0;
            for skip in 0..5 {
                if skip == j {
                    continue;
                }
                let mut prod = 1.0;
                for m in 0..5 {
                    if m != j && m != skip {
                        prod *= t0 - ts[m];
                    }
                }
                num += prod;
            }
            d += self.a_t(k - 2 + j, v) * (num / denom);
        }
        Some(d)
    }

    /// `g(t, x, v) = f₀(Φ(t)⁻¹ Φ̃^ref(t)(x, v))` at snapshot time `t`.
    pub fn modified_dist_g(&self, d: &GaussianData, t: f64, points: &[(Vec3, Vec3)]) -> Result<Vec<f64>> {
        let k = self.snapshot(t)?;
        let queries: Vec<(f64, Vec3, Vec3)> = points
            .par_iter()
            .map(|(x, v)| {
                let (y, w) = ref_flow(t, x, v, &self.a_t(k, v), self.alpha);
                (t, y, w)
            })
            .collect();
        let pre = self.history.backward_trace_batch(&queries)?;
        Ok(pre.iter().map(|(x, v)| d.evaluate(x, v)).collect())
    }

    /// `(F1, F2)` at snapshot time `t` for each point.
    pub fn f_field(&self, t: f64, points: &[(Vec3, Vec3)]) -> Result<Vec<(Vec3, Vec3)>> {
        let k = self.snapshot(t)?;
        let c = coefficient(t, self.alpha);
        let pre: Vec<(Vec3, Vec3, Mat3, Vec3)> = points
            .par_iter()
            .map(|(x, v)| {
                let a = self.a_t(k, v);
                let y = x + v * t - a * c;
                (y, a, self.a_jacobian(k, v), self.da_dt(k, v))
            })
            .collect();
        let ys: Vec<Vec3> = pre.iter().map(|p| p.0).collect();
        let f2 = self.history.field_at(t, &ys)?;
        Ok(pre
            .iter()
            .zip(f2)
            .map(|((_, a, jac, dadt), f2)| {
                let f1 = -(f2 * t - a * t.powf(-self.alpha)) + (dadt + jac * f2) * c;
                (f1, f2)
            })
            .collect())
    }

    /// `(∇_x·F1 + ∇_v·F2, |∇F1| + |∇F2|)` by central differences with step `h`.
    pub fn f_divergence(&self, t: f64, points: &[(Vec3, Vec3)], h: f64) -> Result<Vec<(f64, f64)>> {
        let mut shifted = Vec::with_capacity(points.len() * 12);
        for (x, v) in points {
            for k in 0..6 {
                for sign in [1.0, -1.0] {
                    let (mut x, mut v) = (*x, *v);
                    if k < 3 {
                        x[k] += sign * h;
                    } else {
                        v[k - 3] += sign * h;
                    }
                    shifted.push((x, v));
                }
            }
        }
        let f = self.f_field(t, &shifted)?;
        Ok(f.chunks(12)
            .map(|c| {
                let mut div = 0.0;
                let mut n1 = 0.0;
                let mut n2 = 0.0;
                for k in 0..6 {
                    let d1 = (c[2 * k].0 - c[2 * k + 1].0) / (2.0 * h);
                    let d2 = (c[2 * k].1 - c[2 * k + 1].1) / (2.0 * h);
                    if k < 3 {
                        div += d1[k];
                    } else {
                        div += d2[k - 3];
                    }
                    n1 += d1.norm_squared();
                    n2 += d2.norm_squared();
                }
                (div, n1.sqrt() + n2.sqrt())
            })
            .collect())
    }

    /// Wave operators along traced seed trajectories. `traj[s][k]` is the
    /// state of seed `s` at diagnostic time `self.times()[k]`.
    pub fn wave_operators(&self, seeds: &[(Vec3, Vec3)], traj: &[Vec<(Vec3, Vec3)>]) -> Result<Vec<WaveOperatorSample>> {
        let p1 = 2.0 * self.alpha - 1.0;
        seeds
            .par_iter()
            .zip(traj)
            .map(|(seed, tr)| {
                let mut w1 = Vec::with_capacity(tr.len());
                let mut w2 = Vec::with_capacity(tr.len());
                let mut y = Vec::with_capacity(tr.len());
                for (k, (x, v)) in tr.iter().enumerate() {
                    let t = self.times[k];
                    let (a, b) = wave_op(t, x, v, &self.a_t(k, v), self.alpha);
                    w1.push(a);
                    w2.push(b);
                    y.push(x - v * t);
                }
                let w1_plus = tail_limit(&self.times, &w1, p1, self.window)?;
                let w2_plus = tail_limit(&self.times, &w2, self.alpha, self.window)?;
                Ok(WaveOperatorSample { seed: *seed, w1, w2, y, w1_plus, w2_plus })
            })
            .collect()
    }

    /// For each diagnostic time index in `ks`, the sup over seeds of
    /// `|f(t, Φ(t)(W⁺)) - f⁺(W⁺)|` with `Φ` the reference flow with `A_∞`,
    /// with `A_t`, and the free flow.
    pub fn residuals(&self, d: &GaussianData, waves: &[WaveOperatorSample], ks: &[usize]) -> Result<Vec<[f64; 3]>> {
        let mut queries = Vec::with_capacity(waves.len() * ks.len() * 3);
        for &k in ks {
            let t = self.times[k];
            let c = coefficient(t, self.alpha);
            let pts: Vec<[Vec3; 3]> = waves
                .par_iter()
                .map(|w| {
                    let (x, v) = (w.w1_plus.limit, w.w2_plus.limit);
                    let free = x + v * t;
                    [free - self.a_inf(&v) * c, free - self.a_t(k, &v) * c, free]
                })
                .collect();
            for (w, p) in waves.iter().zip(pts) {
                for y in p {
                    queries.push((t, y, w.w2_plus.limit));
                }
            }
        }
        let pre = self.history.backward_trace_batch(&queries)?;
        let mut out = vec![[0.0f64; 3]; ks.len()];
        let mut it = pre.iter();
        for row in out.iter_mut() {
            for w in waves {
                let f_plus = d.evaluate(&w.seed.0, &w.seed.1);
                for slot in row.iter_mut() {
                    let (x, v) = it.next().unwrap();
                    *slot = slot.max((d.evaluate(x, v) - f_plus).abs());
                }
            }
        }
        Ok(out)
    }
}
