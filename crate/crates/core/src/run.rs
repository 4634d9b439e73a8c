//! The four commands: `simulate`, `scatter`, `rates` and `check`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, build_report, rate_fit, Report, A_T_COLUMNS, FIELDS_COLUMNS, MODIFIED_COLUMNS, RESIDUAL_COLUMNS, WAVE_COLUMNS};
use crate::characteristics::{evolve, EvolveOptions, FlowHistory, HistoryMeta};
use crate::config::RunConfig;
use crate::initial_data::{discretize, smallness_norms, NormBundle};
use crate::io::{read_json, write_json, write_table};
use crate::kernel::InteractionKernel;
use crate::meanfield::{field_direct, sup_field_norms, ProbePlan};
use crate::scattering::{velocity_grid, Scattering};
use crate::{bracket, Error, Result, RieszParams, Vec3};

pub const CONFIG_TOML: &str = "config.toml";
pub const RUN_JSON: &str = "run.json";
pub const HISTORY_BIN: &str = "history.bin";
pub const SCATTER_JSON: &str = "scatter.json";

/// Environment fallback for the worker thread count.
pub const THREADS_ENV: &str = "RIESZ_KINETICS_THREADS";

/// Run `f` on a pool of `threads` workers (0: rayon's default).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub config_hash: String,
    pub run_id: String,
    pub n_particles: usize,
    pub mass: f64,
    pub analytic_mass: f64,
    pub eta: f64,
    pub eps: f64,
    pub norms: NormBundle,
    pub n_snapshots: usize,
    pub threads: usize,
    pub config: RunConfig,
}

/// Discretize, evolve, and write the history, its sidecar, `fields.csv`,
/// `run.json` and the echoed `config.toml`.
pub fn simulate(cfg: &RunConfig, dir: &Path) -> Result<SimulateSummary> {
    let hash = cfg.hash();
    let r = cfg.resolve()?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_TOML), cfg.canonical().to_toml()?)?;

    let ens = discretize(&r.data, &cfg.quadrature)?;
    log::info!("{} particles, eta = {:.4e}, eps = {:.4e}", ens.len(), r.data.eta, r.interaction.params.eps);
    let opts = EvolveOptions { max_velocity_deviation: cfg.diagnostics.max_velocity_deviation, tracers: Vec::new() };
    let h = evolve(&ens, &cfg.schedule, r.interaction, cfg.field, &opts)?;

    h.write_bin(&dir.join(HISTORY_BIN))?;
    let threads = rayon::current_num_threads();
    let meta = HistoryMeta {
        config_hash: hash.clone(),
        alpha: r.interaction.params.alpha,
        lambda: r.interaction.params.lambda,
        eps: r.interaction.params.eps,
        eta: r.data.eta,
        n_particles: h.len(),
        n_tracers: 0,
        times: h.times(),
        interaction: r.interaction,
        method: cfg.field,
        schedule: cfg.schedule,
        seed: cfg.seed,
        threads,
    };
    write_json(&crate::io::sidecar_path(&dir.join(HISTORY_BIN)), &meta)?;

    let plan = ProbePlan::new(
        h.len(),
        cfg.probes.max_node_probes,
        cfg.probes.grid_per_axis,
        &ens.velocities,
        &ens.weights,
        cfg.seed,
    )
    .with_center_x(r.data.cx());
    let rows: Vec<Vec<f64>> = h
        .snapshots
        .iter()
        .map(|s| {
            let probes = plan.probes(s.t, &s.x);
            // the step follows the co-moving length scale
            let fd = cfg.probes.fd_step * s.t.max(1.0);
            let n = sup_field_norms(&r.interaction.at(s.t), &s.x, &h.weights, &probes, s.t, fd);
            vec![s.t, n.sup_e, n.sup_grad_e, n.sup_hess_e, n.n_probes as f64]
        })
        .collect();
    write_table(&dir.join(analysis::FIELDS_CSV), &FIELDS_COLUMNS, &rows, &hash)?;

    let summary = SimulateSummary {
        config_hash: hash,
        run_id: cfg.run_id.clone(),
        n_particles: h.len(),
        mass: ens.mass(),
        analytic_mass: r.data.mass(),
        eta: r.data.eta,
        eps: r.interaction.params.eps,
        norms: smallness_norms(&r.data, &cfg.norm_quadrature())?,
        n_snapshots: h.snapshots.len(),
        threads,
        config: cfg.canonical(),
    };
    write_json(&dir.join(RUN_JSON), &summary)?;
    Ok(summary)
}

/// Load `history.bin` after checking its sidecar against the config hash.
pub fn load_history(cfg: &RunConfig, dir: &Path) -> Result<FlowHistory> {
    let path = dir.join(HISTORY_BIN);
    if !path.exists() {
        return Err(Error::MissingInput(path));
    }
    let meta: HistoryMeta = read_json(&crate::io::sidecar_path(&path))?;
    let hash = cfg.hash();
    if meta.config_hash != hash {
        return Err(Error::HashMismatch { file: path.display().to_string(), expected: hash, found: meta.config_hash });
    }
    FlowHistory::read_bin(&path, meta.interaction, meta.method, meta.schedule)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterSummary {
    pub config_hash: String,
    pub n_seeds: usize,
    pub n_velocities: usize,
    pub window: (f64, f64),
    /// `max_v |∂_tA_t - FD| / max_v |∂_tA_t|`, worst snapshot.
    pub da_dt_fd_max_rel: Option<f64>,
    /// Worst `|div F| / (|∇F1| + |∇F2|)`.
    pub max_div_rel: Option<f64>,
    /// `max_t sup ⟨x⟩g / sup ⟨x⟩g at t = 1`.
    pub g_growth: Option<f64>,
    /// `residual_free / residual_ref` at the final time.
    pub free_over_ref: Option<f64>,
    /// `max_v |A_T - A_∞| / max_v |A_∞|`.
    pub a_final_vs_inf: Option<f64>,
    pub w1_tail_min_r2: f64,
    pub w2_tail_min_r2: f64,
    pub degenerate_seeds: usize,
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| num / den)
}

/// Every scattering table for the run in `dir`.
pub fn scatter(cfg: &RunConfig, dir: &Path) -> Result<ScatterSummary> {
    let hash = cfg.hash();
    let r = cfg.resolve()?;
    let h = load_history(cfg, dir)?;
    let times = h.times();
    let sc = Scattering::new(&h, r.window)?;
    let seeds = cfg.seeds.seeds(&r.data);
    let ks: Vec<usize> = (0..times.len()).filter(|&k| times[k] >= 1.0).collect();

    log::info!("tracing {} seeds", seeds.len());
    let traj = h.forward_trace(&seeds, &times)?;
    let waves = sc.wave_operators(&seeds, &traj)?;
    let mut wave_rows = Vec::with_capacity(ks.len() * seeds.len());
    for &k in &ks {
        for (id, w) in waves.iter().enumerate() {
            let (d1, d2) = w.diffs(k);
            let (a, b) = (w.w1[k], w.w2[k]);
            wave_rows.push(vec![times[k], id as f64, a.x, a.y, a.z, b.x, b.y, b.z, d1, d2]);
        }
    }
    write_table(&dir.join(analysis::WAVE_CSV), &WAVE_COLUMNS, &wave_rows, &hash)?;

    log::info!("residuals");
    let res = sc.residuals(&r.data, &waves, &ks)?;
    let res_rows: Vec<Vec<f64>> = ks.iter().zip(&res).map(|(&k, v)| vec![times[k], v[0], v[1], v[2]]).collect();
    write_table(&dir.join(analysis::RESIDUAL_CSV), &RESIDUAL_COLUMNS, &res_rows, &hash)?;

    let vgrid = velocity_grid(&r.data, cfg.diagnostics.velocity_grid, cfg.diagnostics.velocity_radius);
    let a_inf: Vec<Vec3> = vgrid.par_iter().map(|v| sc.a_inf(v)).collect();
    let mut a_rows = Vec::with_capacity(ks.len() * vgrid.len());
    for &k in &ks {
        let a: Vec<Vec3> = vgrid.par_iter().map(|v| sc.a_t(k, v)).collect();
        for (id, (a, ai)) in a.iter().zip(&a_inf).enumerate() {
            a_rows.push(vec![times[k], id as f64, a.x, a.y, a.z, (a - ai).norm()]);
        }
    }
    write_table(&dir.join(analysis::A_T_CSV), &A_T_COLUMNS, &a_rows, &hash)?;
    let k_last = times.len() - 1;
    let a_last: Vec<Vec3> = vgrid.par_iter().map(|v| sc.a_t(k_last, v)).collect();
    let a_final_vs_inf = ratio(
        a_last.iter().zip(&a_inf).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max),
        a_inf.iter().map(|a| a.norm()).fold(0.0, f64::max),
    );

    log::info!("modified distribution and vector field");
    let n_div = cfg.diagnostics.div_seeds.min(seeds.len());
    let mut mod_rows = Vec::with_capacity(ks.len());
    let mut fd_rel: Option<f64> = None;
    let mut div_rel: Option<f64> = None;
    for &k in &ks {
        let t = times[k];
        let g = sc.modified_dist_g(&r.data, t, &seeds)?;
        let sup_g = g.iter().zip(&seeds).map(|(g, s)| bracket(&s.0) * g).fold(0.0, f64::max);
        let f = sc.f_field(t, &seeds)?;
        let sup_f1 = f.iter().zip(&seeds).map(|(f, s)| f.0.norm() / bracket(&s.0)).fold(0.0, f64::max);
        let da: Vec<Vec3> = vgrid.par_iter().map(|v| sc.da_dt(k, v)).collect();
        let sup_da = da.iter().map(|a| a.norm()).fold(0.0, f64::max);
        let div = sc.f_divergence(t, &seeds[..n_div], cfg.diagnostics.div_step)?;
        let worst_div = div.iter().filter_map(|(d, s)| ratio(d.abs(), *s)).fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))));
        if let Some(x) = worst_div {
            div_rel = Some(div_rel.map_or(x, |m| m.max(x)));
        }
        let fd: Vec<Option<Vec3>> = vgrid.par_iter().map(|v| sc.da_dt_fd(k, v)).collect();
        if fd.iter().all(Option::is_some) {
            let err = fd.iter().zip(&da).map(|(f, a)| (f.unwrap() - a).norm()).fold(0.0, f64::max);
            if let Some(x) = ratio(err, sup_da) {
                fd_rel = Some(fd_rel.map_or(x, |m| m.max(x)));
            }
        }
        mod_rows.push(vec![t, sup_g, sup_f1, sup_da, worst_div.unwrap_or(0.0)]);
    }
    write_table(&dir.join(analysis::MODIFIED_CSV), &MODIFIED_COLUMNS, &mod_rows, &hash)?;

    let g_at_1 = mod_rows.first().map_or(0.0, |r| r[1]);
    let summary = ScatterSummary {
        config_hash: hash,
        n_seeds: seeds.len(),
        n_velocities: vgrid.len(),
        window: r.window,
        da_dt_fd_max_rel: fd_rel,
        max_div_rel: div_rel,
        g_growth: ratio(mod_rows.iter().map(|r| r[1]).fold(0.0, f64::max), g_at_1),
        free_over_ref: res.last().and_then(|v| ratio(v[2], v[0])),
        a_final_vs_inf,
        w1_tail_min_r2: waves.iter().map(|w| w.w1_plus.r_squared).fold(1.0, f64::min),
        w2_tail_min_r2: waves.iter().map(|w| w.w2_plus.r_squared).fold(1.0, f64::min),
        degenerate_seeds: waves.iter().filter(|w| w.w1_plus.degenerate || w.w2_plus.degenerate).count(),
    };
    write_json(&dir.join(SCATTER_JSON), &summary)?;
    Ok(summary)
}

/// Load the run's echoed config, check every table against its hash, and
/// write `report.json`.
pub fn rates(dir: &Path) -> Result<Report> {
    let cfg = RunConfig::load(&dir.join(CONFIG_TOML))?;
    let hash = cfg.hash();
    let r = cfg.resolve()?;
    let found = analysis::table_hash(&dir.join(analysis::FIELDS_CSV))?;
    if found != hash {
        return Err(Error::HashMismatch { file: analysis::FIELDS_CSV.into(), expected: hash, found });
    }
    let report = build_report(dir, r.interaction.params.alpha, r.window, &cfg.tolerances)?;
    write_json(&dir.join(analysis::REPORT_JSON), &report)?;
    Ok(report)
}

/// Resolve the output directory: flag, then config, then `runs/<run_id>`.
pub fn output_dir(cfg: &RunConfig, flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.run_id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckLine {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

fn line(name: &str, value: f64, bound: f64) -> CheckLine {
    CheckLine { name: name.into(), pass: value <= bound, detail: format!("{value:.3e} <= {bound:.1e}") }
}

fn worst<I: IntoIterator<Item = Result<f64>>>(it: I) -> f64 {
    it.into_iter().map(|r| r.unwrap_or(f64::INFINITY)).fold(0.0, |a, b| if b.is_nan() { f64::INFINITY } else { a.max(b) })
}

/// Fast invariant suite against any kernel implementation: derivative
/// identities, homogeneity, a 100-node run, and exact rate fits.
///
/// Homogeneity assumes an unsoftened kernel.
pub fn check_suite<K: InteractionKernel>(k: &K) -> Vec<CheckLine> {
    let alpha = k.alpha();
    let pts = [
        Vec3::new(1.0, 0.0, 0.0),
        Vec3::new(0.3, -1.2, 0.7),
        Vec3::new(-2.5, 0.4, 1.9),
        Vec3::new(0.05, 0.02, -0.08),
    ];
    let h = 1e-5;
    let grad_fd = worst(pts.iter().map(|x| {
        let g = k.grad(x)?;
        let mut fd = Vec3::zeros();
        for i in 0..3 {
            let mut e = Vec3::zeros();
            e[i] = h * x.norm();
            fd[i] = (k.potential(&(x + e))? - k.potential(&(x - e))?) / (2.0 * e[i]);
        }
        Ok((g - fd).norm() / g.norm())
    }));
    let hess_fd = worst(pts.iter().map(|x| {
        let m = k.hessian(x)?;
        let mut err: f64 = 0.0;
        for i in 0..3 {
            let mut e = Vec3::zeros();
            e[i] = h * x.norm();
            let col = (k.grad(&(x + e))? - k.grad(&(x - e))?) / (2.0 * e[i]);
            err = err.max((col - m.column(i)).norm());
        }
        Ok(err / m.norm())
    }));
    let homogeneity = worst(pts.iter().flat_map(|x| {
        [0.5, 3.0, 17.0].map(move |s: f64| -> Result<f64> {
            let a = k.potential(&(x * s))?;
            let b = s.powf(-alpha) * k.potential(x)?;
            Ok((a - b).abs() / b.abs())
        })
    }));
    let oddness = worst(pts.iter().map(|x| Ok((k.grad(x)? + k.grad(&-x)?).norm() / k.grad(x)?.norm())));

    let (momentum, energy) = small_run(k).unwrap_or((f64::INFINITY, f64::INFINITY));

    let fits = worst([-3.0, -2.0, -1.0, -0.5, -0.25].map(|p: f64| -> Result<f64> {
        let s: Vec<(f64, f64)> = (0..30).map(|j| 1.25f64.powi(j)).map(|t| (t, 2.0 * t.powf(p))).collect();
        let f = rate_fit(&s, (1.0, 1e3))?;
        Ok((f.exponent - p).abs().max(1.0 - f.r_squared))
    }));

    vec![
        line("kernel gradient vs finite differences", grad_fd, 1e-6),
        line("kernel Hessian vs finite differences", hess_fd, 1e-6),
        line("kernel homogeneity", homogeneity, 1e-12),
        line("kernel gradient oddness", oddness, 1e-14),
        line("100-node momentum conservation", momentum, 1e-12),
        line("100-node energy drift", energy, 1e-6),
        line("rate_fit on pure power laws", fits, 1e-12),
    ]
}

/// Kick–drift–kick on a 5×5×4 lattice with small weights, `t ∈ [0, 10]`.
/// Returns the relative momentum defect and energy drift.
fn small_run<K: InteractionKernel>(k: &K) -> Result<(f64, f64)> {
    let mut x = Vec::with_capacity(100);
    let mut v = Vec::with_capacity(100);
    for i in 0..100 {
        let (a, b, c) = ((i % 5) as f64, ((i / 5) % 5) as f64, (i / 25) as f64);
        x.push(Vec3::new(a, b, c) * 1.5);
        v.push(Vec3::new((0.37 * i as f64).sin(), (0.91 * i as f64).cos(), (1.3 * i as f64).sin()) * 0.01);
    }
    let w: Vec<f64> = (0..100).map(|i| 1e-3 * (1.0 + 0.5 * (i as f64 * 0.7).sin())).collect();
    let field = |x: &[Vec3]| -> Result<Vec<Vec3>> { (0..x.len()).map(|i| field_direct(k, x, &w, &x[i], Some(i))).collect() };
    let energy = |x: &[Vec3], v: &[Vec3]| -> Result<f64> {
        let mut e: f64 = v.iter().zip(&w).map(|(v, w)| 0.5 * w * v.norm_squared()).sum();
        for i in 0..x.len() {
            for j in (i + 1)..x.len() {
                e += w[i] * w[j] * k.potential(&(x[i] - x[j]))?;
            }
        }
        Ok(e)
    };
    let p0: Vec3 = v.iter().zip(&w).map(|(v, w)| v * *w).sum();
    let scale: f64 = v.iter().zip(&w).map(|(v, w)| v.norm() * w).sum();
    let h0 = energy(&x, &v)?;
    let dt = 0.01;
    let mut e = field(&x)?;
    for _ in 0..1000 {
        for (vi, ei) in v.iter_mut().zip(&e) {
            *vi += ei * (0.5 * dt);
        }
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += vi * dt;
        }
        e = field(&x)?;
        for (vi, ei) in v.iter_mut().zip(&e) {
            *vi += ei * (0.5 * dt);
        }
    }
    let p1: Vec3 = v.iter().zip(&w).map(|(v, w)| v * *w).sum();
    let h1 = energy(&x, &v)?;
    Ok(((p1 - p0).norm() / scale, (h1 - h0).abs() / h0.abs()))
}

/// The suite on the default unsoftened kernel.
pub fn check() -> Vec<CheckLine> {
    check_suite(&RieszParams::new(0.75, 1.0, 0.0).expect("valid kernel"))
}
