//! Forward self-consistent flow, the snapshot history, and characteristics
//! traced through the stored history.

use std::borrow::Cow;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::SMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::initial_data::Ensemble;
use crate::kernel::Interaction;
use crate::meanfield::{FieldMethod, FieldSource};
use crate::{Error, Result, Vec3};

/// Snapshot times and integrator step grid.
///
/// Snapshots are uniform on `[0, 1]` (`n_unit` intervals) and geometric on
/// `[1, t_final]` with the ratio closest to `ratio` that lands exactly on
/// `t_final`. Each snapshot interval `[a, b]` is split into equal steps no
/// longer than `dt_base · max(1, a)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeSchedule {
    pub t_final: f64,
    pub n_unit: usize,
    pub ratio: f64,
    pub dt_base: f64,
}

impl Default for TimeSchedule {
    fn default() -> Self {
        Self { t_final: 1000.0, n_unit: 4, ratio: 1.25, dt_base: 0.05 }
    }
}

impl TimeSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_final >= 1.0 && self.t_final.is_finite()) {
            return Err(Error::InvalidParameter(format!("t_final = {} must be >= 1", self.t_final)));
        }
        if self.n_unit == 0 || !(self.ratio > 1.0) || !(self.dt_base > 0.0) {
            return Err(Error::InvalidParameter("schedule needs n_unit >= 1, ratio > 1, dt_base > 0".into()));
        }
        Ok(())
    }

    /// Number of geometric intervals and the exact ratio used.
    pub fn geometric(&self) -> (usize, f64) {
        if self.t_final <= 1.0 {
            return (0, 1.0);
        }
        let k = (self.t_final.ln() / self.ratio.ln() - 1e-9).ceil().max(1.0) as usize;
        (k, self.t_final.powf(1.0 / k as f64))
    }

    pub fn snapshot_times(&self) -> Vec<f64> {
        let mut t: Vec<f64> = (0..=self.n_unit).map(|i| i as f64 / self.n_unit as f64).collect();
        let (k, r) = self.geometric();
        for j in 1..=k {
            t.push(if j == k { self.t_final } else { r.powi(j as i32) });
        }
        t
    }

    /// Step endpoints (including every snapshot time) and, for each snapshot,
    /// its index in the step list.
    pub fn step_grid(&self) -> (Vec<f64>, Vec<usize>) {
        let snaps = self.snapshot_times();
        let mut grid = vec![snaps[0]];
        let mut at = vec![0usize];
        for w in snaps.windows(2) {
            let (a, b) = (w[0], w[1]);
            let dt = self.dt_base * a.max(1.0);
            let n = ((b - a) / dt - 1e-9).ceil().max(1.0) as usize;
            for i in 1..n {
                grid.push(a + (b - a) * i as f64 / n as f64);
            }
            grid.push(b);
            at.push(grid.len() - 1);
        }
        (grid, at)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub t: f64,
    pub x: Vec<Vec3>,
    pub v: Vec<Vec3>,
}

impl FlowState {
    pub fn from_ensemble(e: &Ensemble) -> Self {
        Self { t: 0.0, x: e.positions.clone(), v: e.velocities.clone() }
    }

    /// `Yᵢ = Xᵢ - t Vᵢ`.
    pub fn derived_y(&self) -> Vec<Vec3> {
        self.x.iter().zip(&self.v).map(|(x, v)| x - v * self.t).collect()
    }

    fn check_finite(&self) -> Result<()> {
        if self.x.iter().chain(&self.v).all(|p| p.iter().all(|c| c.is_finite())) {
            Ok(())
        } else {
            Err(Error::NonFinite { t: self.t })
        }
    }
}

/// Field at the ensemble's own particles (self-excluded) at time `t`.
pub fn node_field(interaction: &Interaction, method: FieldMethod, t: f64, x: &[Vec3], w: &[f64]) -> Vec<Vec3> {
    FieldSource::new(interaction.at(t), x, w, method).at_nodes()
}

/// One kick–drift–kick step of `ẋ = v`, `v̇ = field(t, x)`; `dt` may be negative.
pub fn step(state: &FlowState, dt: f64, field: &dyn Fn(f64, &[Vec3]) -> Vec<Vec3>) -> Result<FlowState> {
    let e0 = field(state.t, &state.x);
    let (next, _) = kdk(state, &e0, dt, field);
    next.check_finite()?;
    Ok(next)
}

fn kdk(state: &FlowState, e0: &[Vec3], dt: f64, field: &dyn Fn(f64, &[Vec3]) -> Vec<Vec3>) -> (FlowState, Vec<Vec3>) {
    let half: Vec<Vec3> = state.v.iter().zip(e0).map(|(v, e)| v + e * (0.5 * dt)).collect();
    let x: Vec<Vec3> = state.x.iter().zip(&half).map(|(x, v)| x + v * dt).collect();
    let t = state.t + dt;
    let e1 = field(t, &x);
    let v = half.iter().zip(&e1).map(|(v, e)| v + e * (0.5 * dt)).collect();
    (FlowState { t, x, v }, e1)
}

/// `H = Σ wᵢ|Vᵢ|²/2 + ½ Σ_{i≠j} wᵢ wⱼ w(Xᵢ - Xⱼ)` for the kernel in force at `t`.
pub fn energy(interaction: &Interaction, state: &FlowState, w: &[f64]) -> f64 {
    let p = interaction.at(state.t);
    let kinetic: f64 = state.v.iter().zip(w).map(|(v, wi)| 0.5 * wi * v.norm_squared()).sum();
    let potential: f64 = (0..w.len())
        .into_par_iter()
        .map(|i| {
            let mut s = 0.0;
            for j in (i + 1)..w.len() {
                let d = state.x[i] - state.x[j];
                s += w[i] * w[j] * p.potential(&d).unwrap_or(0.0);
            }
            s
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    kinetic + potential
}

#[derive(Debug, Clone, Default)]
pub struct EvolveOptions {
    /// Abort when some `|Vᵢ(t) - vᵢ|` exceeds this bound.
    pub max_velocity_deviation: Option<f64>,
    /// Massless points advanced in the true field alongside the ensemble.
    pub tracers: Vec<(Vec3, Vec3)>,
}

/// Snapshots of the whole ensemble plus the node fields `E(t, Xᵢ(t))`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowHistory {
    pub weights: Vec<f64>,
    pub interaction: Interaction,
    pub method: FieldMethod,
    pub schedule: TimeSchedule,
    pub snapshots: Vec<FlowState>,
    pub fields: Vec<Vec<Vec3>>,
    pub tracers: Vec<FlowState>,
}

pub fn evolve(
    ens: &Ensemble,
    schedule: &TimeSchedule,
    interaction: Interaction,
    method: FieldMethod,
    opts: &EvolveOptions,
) -> Result<FlowHistory> {
    schedule.validate()?;
    let w = &ens.weights;
    let (grid, snap_at) = schedule.step_grid();
    let n = ens.len();
    let tracer0 = FlowState {
        t: 0.0,
        x: opts.tracers.iter().map(|p| p.0).collect(),
        v: opts.tracers.iter().map(|p| p.1).collect(),
    };
    // Ensemble and tracers share one state; the field only sums over the
    // first `n` (weighted) entries.
    let mut state = FlowState {
        t: 0.0,
        x: ens.positions.iter().chain(&tracer0.x).copied().collect(),
        v: ens.velocities.iter().chain(&tracer0.v).copied().collect(),
    };
    let field = |t: f64, x: &[Vec3]| -> Vec<Vec3> {
        let src = FieldSource::new(interaction.at(t), &x[..n], w, method);
        let mut e = src.at_nodes();
        e.extend(src.at_points(&x[n..]));
        e
    };
    let mut e = field(0.0, &state.x);
    check_velocity(&state, &ens.velocities, opts.max_velocity_deviation)?;
    let mut snapshots = Vec::with_capacity(snap_at.len());
    let mut fields = Vec::with_capacity(snap_at.len());
    let mut tracers = Vec::with_capacity(snap_at.len());
    let mut push = |s: &FlowState, e: &[Vec3]| {
        snapshots.push(FlowState { t: s.t, x: s.x[..n].to_vec(), v: s.v[..n].to_vec() });
        fields.push(e[..n].to_vec());
        tracers.push(FlowState { t: s.t, x: s.x[n..].to_vec(), v: s.v[n..].to_vec() });
    };
    push(&state, &e);
    let mut next_snap = 1;
    for k in 1..grid.len() {
        let dt = grid[k] - grid[k - 1];
        let (mut next, e1) = kdk(&state, &e, dt, &field);
        next.t = grid[k];
        next.check_finite()?;
        state = next;
        e = e1;
        if next_snap < snap_at.len() && snap_at[next_snap] == k {
            check_velocity(&state, &ens.velocities, opts.max_velocity_deviation)?;
            push(&state, &e);
            log::info!("snapshot t = {:.4e}", state.t);
            next_snap += 1;
        }
    }
    Ok(FlowHistory {
        weights: w.clone(),
        interaction,
        method,
        schedule: *schedule,
        snapshots,
        fields,
        tracers,
    })
}

fn check_velocity(state: &FlowState, v0: &[Vec3], bound: Option<f64>) -> Result<()> {
    let Some(bound) = bound else { return Ok(()) };
    for (i, (v, v0)) in state.v.iter().zip(v0).enumerate() {
        let deviation = (v - v0).norm();
        if deviation > bound {
            return Err(Error::SmallDataViolated { index: i, t: state.t, deviation, bound });
        }
    }
    Ok(())
}

impl FlowHistory {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.t).collect()
    }

    pub fn t_final(&self) -> f64 {
        self.snapshots.last().map_or(0.0, |s| s.t)
    }

    pub fn snapshot_index(&self, t: f64) -> Option<usize> {
        self.snapshots.iter().position(|s| s.t == t)
    }

    /// Particle positions at `t`, linearly interpolated between snapshots.
    pub fn positions_at(&self, t: f64) -> Result<Cow<'_, [Vec3]>> {
        let t_max = self.t_final();
        if !(0.0..=t_max).contains(&t) {
            return Err(Error::OutsideHistory { t, t_max });
        }
        let k = self.snapshots.partition_point(|s| s.t <= t);
        let hi = k.min(self.snapshots.len() - 1);
        let lo = hi.saturating_sub(1);
        let (a, b) = (&self.snapshots[lo], &self.snapshots[hi]);
        if a.t == t {
            return Ok(Cow::Borrowed(&a.x));
        }
        if b.t == t {
            return Ok(Cow::Borrowed(&b.x));
        }
        let s = (t - a.t) / (b.t - a.t);
        Ok(Cow::Owned(a.x.iter().zip(&b.x).map(|(p, q)| p + (q - p) * s).collect()))
    }

    /// Field of the interpolated ensemble at arbitrary points.
    pub fn field_at(&self, t: f64, points: &[Vec3]) -> Result<Vec<Vec3>> {
        let x = self.positions_at(t)?;
        Ok(FieldSource::new(self.interaction.at(t), &x, &self.weights, self.method).at_points(points))
    }

    fn grid(&self) -> Vec<f64> {
        let t_max = self.t_final();
        let mut g = self.schedule.step_grid().0;
        g.retain(|t| *t <= t_max);
        g
    }

    /// Trace `(y, w)` at time `t` back to time 0 through the stored field.
    pub fn backward_trace(&self, t: f64, point: (Vec3, Vec3)) -> Result<(Vec3, Vec3)> {
        Ok(self.backward_trace_batch(&[(t, point.0, point.1)])?[0])
    }

    /// Backward traces from arbitrary start times, sharing the field
    /// evaluations of a single sweep down the step grid.
    pub fn backward_trace_batch(&self, queries: &[(f64, Vec3, Vec3)]) -> Result<Vec<(Vec3, Vec3)>> {
        let t_max = self.t_final();
        if let Some(q) = queries.iter().find(|q| !(0.0..=t_max).contains(&q.0)) {
            return Err(Error::OutsideHistory { t: q.0, t_max });
        }
        let mut grid = self.grid();
        // Off-grid start times become extra sweep nodes.
        for q in queries {
            if !grid.contains(&q.0) {
                grid.push(q.0);
            }
        }
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        self.sweep(&grid, queries)
    }

    /// Trace seeds forward from time 0 and record them at `times`.
    pub fn forward_trace(&self, seeds: &[(Vec3, Vec3)], times: &[f64]) -> Result<Vec<Vec<(Vec3, Vec3)>>> {
        let t_max = self.t_final();
        if let Some(t) = times.iter().find(|t| !(0.0..=t_max).contains(*t)) {
            return Err(Error::OutsideHistory { t: *t, t_max });
        }
        let mut grid = self.grid();
        grid.extend_from_slice(times);
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        let top = times.iter().copied().fold(0.0, f64::max);
        grid.retain(|t| *t <= top);
        let queries: Vec<(f64, Vec3, Vec3)> = seeds.iter().map(|s| (0.0, s.0, s.1)).collect();
        let mut out = vec![Vec::with_capacity(times.len()); seeds.len()];
        let mut y: Vec<Vec3> = queries.iter().map(|q| q.1).collect();
        let mut v: Vec<Vec3> = queries.iter().map(|q| q.2).collect();
        let mut e = self.field_at(grid[0], &y)?;
        let record = |t: f64, y: &[Vec3], v: &[Vec3], out: &mut Vec<Vec<(Vec3, Vec3)>>| {
            for _ in times.iter().filter(|s| **s == t) {
                for (i, o) in out.iter_mut().enumerate() {
                    o.push((y[i], v[i]));
                }
            }
        };
        record(grid[0], &y, &v, &mut out);
        for k in 1..grid.len() {
            let dt = grid[k] - grid[k - 1];
            for (vi, ei) in v.iter_mut().zip(&e) {
                *vi += ei * (0.5 * dt);
            }
            for (yi, vi) in y.iter_mut().zip(&v) {
                *yi += vi * dt;
            }
            e = self.field_at(grid[k], &y)?;
            for (vi, ei) in v.iter_mut().zip(&e) {
                *vi += ei * (0.5 * dt);
            }
            record(grid[k], &y, &v, &mut out);
        }
        // `out[i]` lists states in increasing time; reorder to match `times`.
        let mut sorted_times: Vec<f64> = times.to_vec();
        sorted_times.sort_by(f64::total_cmp);
        Ok(out
            .into_iter()
            .map(|rows| times.iter().map(|t| rows[sorted_times.iter().position(|s| s == t).unwrap()]).collect())
            .collect())
    }

    /// Backward sweep: every query joins when the sweep reaches its start
    /// time and is integrated down to zero.
    fn sweep(&self, grid: &[f64], queries: &[(f64, Vec3, Vec3)]) -> Result<Vec<(Vec3, Vec3)>> {
        let mut order: Vec<usize> = (0..queries.len()).collect();
        order.sort_by(|a, b| queries[*b].0.total_cmp(&queries[*a].0));
        let mut active: Vec<usize> = Vec::new();
        let mut y: Vec<Vec3> = Vec::new();
        let mut v: Vec<Vec3> = Vec::new();
        let mut e: Vec<Vec3> = Vec::new();
        let mut next = 0;
        let mut k = grid.len();
        while k > 0 {
            k -= 1;
            let t = grid[k];
            // Advance the active set from grid[k+1] down to t.
            if !active.is_empty() {
                let dt = t - grid[k + 1];
                for (vi, ei) in v.iter_mut().zip(&e) {
                    *vi += ei * (0.5 * dt);
                }
                for (yi, vi) in y.iter_mut().zip(&v) {
                    *yi += vi * dt;
                }
            }
            let mut joined = 0;
            while next < order.len() && queries[order[next]].0 == t {
                let q = &queries[order[next]];
                active.push(order[next]);
                y.push(q.1);
                v.push(q.2);
                next += 1;
                joined += 1;
            }
            if active.is_empty() {
                continue;
            }
            let en = self.field_at(t, &y)?;
            let old = active.len() - joined;
            for (vi, ei) in v[..old].iter_mut().zip(&en[..old]) {
                *vi += ei * (0.5 * (t - grid[k + 1]));
            }
            e = en;
        }
        let mut out = vec![(Vec3::zeros(), Vec3::zeros()); queries.len()];
        for (slot, q) in active.iter().enumerate() {
            out[*q] = (y[slot], v[slot]);
        }
        Ok(out)
    }

    /// `|det DΦ(t) - 1|` for the flow map of the stored field around `seed`,
    /// by central differences with step `delta`.
    pub fn liouville_check(&self, t: f64, seed: (Vec3, Vec3), delta: f64) -> Result<f64> {
        let mut seeds = Vec::with_capacity(12);
        for k in 0..6 {
            for sign in [1.0, -1.0] {
                let (mut x, mut v) = seed;
                if k < 3 {
                    x[k] += sign * delta;
                } else {
                    v[k - 3] += sign * delta;
                }
                seeds.push((x, v));
            }
        }
        let images = self.forward_trace(&seeds, &[t])?;
        let mut jac = SMatrix::<f64, 6, 6>::zeros();
        for k in 0..6 {
            let (xp, vp) = images[2 * k][0];
            let (xm, vm) = images[2 * k + 1][0];
            for r in 0..3 {
                jac[(r, k)] = (xp[r] - xm[r]) / (2.0 * delta);
                jac[(r + 3, k)] = (vp[r] - vm[r]) / (2.0 * delta);
            }
        }
        Ok((jac.determinant() - 1.0).abs())
    }

    /// The history restricted to snapshots at or before `t_max`.
    pub fn truncated(&self, t_max: f64) -> FlowHistory {
        let keep = self.snapshots.iter().take_while(|s| s.t <= t_max).count().max(1);
        FlowHistory {
            weights: self.weights.clone(),
            interaction: self.interaction,
            method: self.method,
            schedule: self.schedule,
            snapshots: self.snapshots[..keep].to_vec(),
            fields: self.fields[..keep].to_vec(),
            tracers: self.tracers[..keep].to_vec(),
        }
    }

    pub fn momentum(&self, k: usize) -> Vec3 {
        self.snapshots[k].v.iter().zip(&self.weights).map(|(v, w)| v * *w).sum()
    }
}

const MAGIC: &[u8; 8] = b"RKHIST01";

/// Sidecar describing a stored history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryMeta {
    pub config_hash: String,
    pub alpha: f64,
    pub lambda: f64,
    pub eps: f64,
    pub eta: f64,
    pub n_particles: usize,
    pub n_tracers: usize,
    pub times: Vec<f64>,
    pub interaction: Interaction,
    pub method: FieldMethod,
    pub schedule: TimeSchedule,
    pub seed: u64,
    pub threads: usize,
}

fn put(out: &mut impl Write, xs: &[f64]) -> Result<()> {
    for x in xs {
        out.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn put_vecs(out: &mut impl Write, vs: &[Vec3]) -> Result<()> {
    for v in vs {
        put(out, v.as_slice())?;
    }
    Ok(())
}

fn get_f64(inp: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    inp.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn get_u64(inp: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    inp.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_vecs(inp: &mut impl Read, n: usize) -> Result<Vec<Vec3>> {
    (0..n).map(|_| Ok(Vec3::new(get_f64(inp)?, get_f64(inp)?, get_f64(inp)?))).collect()
}

impl FlowHistory {
    /// Little-endian binary: magic, `N`, snapshot count, tracer count,
    /// weights, then per snapshot `t`, positions, velocities, node fields,
    /// tracer positions and velocities.
    pub fn write_bin(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        out.write_all(MAGIC)?;
        let n_tr = self.tracers.first().map_or(0, |s| s.x.len());
        for n in [self.len(), self.snapshots.len(), n_tr] {
            out.write_all(&(n as u64).to_le_bytes())?;
        }
        put(&mut out, &self.weights)?;
        for k in 0..self.snapshots.len() {
            let s = &self.snapshots[k];
            put(&mut out, &[s.t])?;
            put_vecs(&mut out, &s.x)?;
            put_vecs(&mut out, &s.v)?;
            put_vecs(&mut out, &self.fields[k])?;
            put_vecs(&mut out, &self.tracers[k].x)?;
            put_vecs(&mut out, &self.tracers[k].v)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_bin(path: &Path, interaction: Interaction, method: FieldMethod, schedule: TimeSchedule) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let mut inp = BufReader::new(fs::File::open(path)?);
        let mut magic = [0u8; 8];
        inp.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("history", "bad magic"));
        }
        let n = get_u64(&mut inp)? as usize;
        let k = get_u64(&mut inp)? as usize;
        let n_tr = get_u64(&mut inp)? as usize;
        let weights = (0..n).map(|_| get_f64(&mut inp)).collect::<Result<Vec<_>>>()?;
        let mut snapshots = Vec::with_capacity(k);
        let mut fields = Vec::with_capacity(k);
        let mut tracers = Vec::with_capacity(k);
        for _ in 0..k {
            let t = get_f64(&mut inp)?;
            let x = get_vecs(&mut inp, n)?;
            let v = get_vecs(&mut inp, n)?;
            fields.push(get_vecs(&mut inp, n)?);
            snapshots.push(FlowState { t, x, v });
            let tx = get_vecs(&mut inp, n_tr)?;
            let tv = get_vecs(&mut inp, n_tr)?;
            tracers.push(FlowState { t, x: tx, v: tv });
        }
        Ok(Self { weights, interaction, method, schedule, snapshots, fields, tracers })
    }
}
