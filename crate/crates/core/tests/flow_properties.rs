use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use riesz_kinetics::characteristics::{evolve, EvolveOptions, FlowHistory, TimeSchedule};
use riesz_kinetics::initial_data::{discretize, Ensemble, GaussianData, QuadratureSpec};
use riesz_kinetics::kernel::{Interaction, SofteningMode};
use riesz_kinetics::meanfield::FieldMethod;
use riesz_kinetics::scattering::{last_decade, velocity_grid, wave_op, Scattering, SeedGrid};
use riesz_kinetics::{bracket, RieszParams, Vec3};

const N: usize = 300;

fn gaussian_sample(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::from_fn(|_, _| StandardNormal.sample(rng))
}

/// `N` samples of the unit Gaussian carrying total mass `eta (2π)³`.
fn sampled(eta: f64, seed: u64) -> Ensemble {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<Vec3> = (0..N).map(|_| gaussian_sample(&mut rng)).collect();
    let v: Vec<Vec3> = (0..N).map(|_| gaussian_sample(&mut rng)).collect();
    let w = GaussianData::centered(eta, 1.0, 1.0).mass() / N as f64;
    Ensemble::new(x, v, vec![w; N]).unwrap()
}

fn interaction() -> Interaction {
    Interaction::new(RieszParams::new(0.75, 1.0, 0.3).unwrap(), SofteningMode::Comoving)
}

fn run(e: &Ensemble, schedule: TimeSchedule, opts: &EvolveOptions) -> FlowHistory {
    evolve(e, &schedule, interaction(), FieldMethod::Direct, opts).unwrap()
}

fn schedule(t_final: f64) -> TimeSchedule {
    TimeSchedule { t_final, ..TimeSchedule::default() }
}

fn seeds() -> Vec<(Vec3, Vec3)> {
    SeedGrid { n_x: 2, n_v: 2, radius_x: 1.0, radius_v: 1.0 }.seeds(&GaussianData::centered(1.0, 1.0, 1.0))
}

fn permute(p: &Vec3) -> Vec3 {
    Vec3::new(p.y, p.z, p.x)
}

#[test]
fn backward_trace_recovers_forward_evolved_tracers_at_t1000() {
    let e = sampled(4e-6, 1);
    let tracers: Vec<(Vec3, Vec3)> = seeds().into_iter().step_by(7).collect();
    let h = run(&e, schedule(1000.0), &EvolveOptions { tracers: tracers.clone(), ..Default::default() });
    let last = h.tracers.last().unwrap();
    assert_eq!(last.t, 1000.0);
    for (i, seed) in tracers.iter().enumerate() {
        let (x0, v0) = h.backward_trace(1000.0, (last.x[i], last.v[i])).unwrap();
        assert!((x0 - seed.0).norm() <= 1e-4, "seed {i}: position error {:e}", (x0 - seed.0).norm());
        assert!((v0 - seed.1).norm() <= 1e-4);
    }
}

#[test]
fn denser_snapshots_barely_move_backward_traces() {
    let e = sampled(4e-6, 2);
    let coarse = schedule(100.0);
    let fine = TimeSchedule { ratio: coarse.ratio.sqrt(), ..coarse };
    let a = run(&e, coarse, &EvolveOptions::default());
    let b = run(&e, fine, &EvolveOptions::default());
    for (x, v) in seeds() {
        let p = (x + v * 100.0, v);
        let (xa, va) = a.backward_trace(100.0, p).unwrap();
        let (xb, vb) = b.backward_trace(100.0, p).unwrap();
        assert!((xa - xb).norm() <= 1e-5, "{:e}", (xa - xb).norm());
        assert!((va - vb).norm() <= 1e-5);
    }
}

#[test]
fn a_inf_is_stable_across_time_steps() {
    let e = sampled(4e-6, 3);
    let s = schedule(1000.0);
    let a = run(&e, s, &EvolveOptions::default());
    let b = run(&e, TimeSchedule { dt_base: s.dt_base / 2.0, ..s }, &EvolveOptions::default());
    let sa = Scattering::new(&a, last_decade(1000.0)).unwrap();
    let sb = Scattering::new(&b, last_decade(1000.0)).unwrap();
    let grid = velocity_grid(&GaussianData::centered(1.0, 1.0, 1.0), 3, 2.0);
    let scale = grid.iter().map(|v| sa.a_inf(v).norm()).fold(0.0, f64::max);
    let diff = grid.iter().map(|v| (sa.a_inf(v) - sb.a_inf(v)).norm()).fold(0.0, f64::max);
    assert!(scale > 0.0);
    assert!(diff <= 1e-4 * scale, "relative A_inf change {:e}", diff / scale);
}

#[test]
fn truncated_history_reproduces_residuals_at_common_times() {
    let eta = 4e-6;
    let e = sampled(eta, 4);
    let d = GaussianData::centered(eta, 1.0, 1.0);
    let full = run(&e, schedule(100.0), &EvolveOptions::default());
    let half = full.truncated(50.0);
    assert!(half.t_final() <= 50.0 && half.t_final() > 40.0);

    let sc = Scattering::new(&full, last_decade(100.0)).unwrap();
    let s = seeds();
    let traj = full.forward_trace(&s, sc.times()).unwrap();
    let waves = sc.wave_operators(&s, &traj).unwrap();
    // The limits (W⁺, V⁺) belong to the full run; only the traced field is truncated.
    let mut st = Scattering::new(&half, (half.t_final() / 10.0, half.t_final())).unwrap();
    st.v_plus_nodes = sc.v_plus_nodes.clone();
    let ks: Vec<usize> = (0..half.snapshots.len()).filter(|k| half.snapshots[*k].t >= 1.0).collect();
    let r_full = sc.residuals(&d, &waves, &ks).unwrap();
    let r_half = st.residuals(&d, &waves, &ks).unwrap();
    for (a, b) in r_full.iter().zip(&r_half) {
        for j in 0..3 {
            assert!((a[j] - b[j]).abs() <= 1e-6 * eta, "{a:?} vs {b:?}");
        }
    }
}

#[test]
fn corrections_scale_linearly_with_eta() {
    let etas = [2e-6, 4e-6, 8e-6];
    let grid = velocity_grid(&GaussianData::centered(1.0, 1.0, 1.0), 3, 2.0);
    let s = seeds();
    let mut ratios = Vec::new();
    for eta in etas {
        let h = run(&sampled(eta, 5), schedule(100.0), &EvolveOptions::default());
        let sc = Scattering::new(&h, last_decade(100.0)).unwrap();
        let v0 = &h.snapshots[0].v;
        let dv = sc.v_plus_nodes.iter().zip(v0).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        let k = h.snapshots.len() - 1;
        let a = grid.iter().map(|v| sc.a_t(k, v).norm()).fold(0.0, f64::max);
        let traj = h.forward_trace(&s, sc.times()).unwrap();
        let waves = sc.wave_operators(&s, &traj).unwrap();
        let mut w1 = 0.0f64;
        let mut w2 = 0.0f64;
        for w in &waves {
            let (x, v) = w.seed;
            w1 = w1.max((w.w1[k] - x).norm() / bracket(&x));
            w2 = w2.max((w.w2[k] - v).norm());
        }
        ratios.push([dv / eta, a / eta, w1 / eta, w2 / eta]);
    }
    for j in 0..4 {
        let (lo, hi) = ratios.iter().fold((f64::MAX, 0.0f64), |(lo, hi), r| (lo.min(r[j]), hi.max(r[j])));
        assert!(lo > 0.0 && hi <= 1.1 * lo, "quantity {j}: ratio spread {lo:e}..{hi:e}");
    }
}

#[test]
fn liouville_is_invariant_under_axis_relabeling() {
    let e = sampled(4e-6, 6);
    let p = Ensemble::new(
        e.positions.iter().map(permute).collect(),
        e.velocities.iter().map(permute).collect(),
        e.weights.clone(),
    )
    .unwrap();
    let a = run(&e, schedule(100.0), &EvolveOptions::default());
    let b = run(&p, schedule(100.0), &EvolveOptions::default());
    let seed = (Vec3::new(0.4, -0.3, 0.2), Vec3::new(0.1, 0.5, -0.2));
    let da = a.liouville_check(100.0, seed, 1e-4).unwrap();
    let db = b.liouville_check(100.0, (permute(&seed.0), permute(&seed.1)), 1e-4).unwrap();
    assert!(da <= 1e-4 && db <= 1e-4, "{da:e} {db:e}");
    assert!((da - db).abs() <= 1e-6, "{da:e} vs {db:e}");
}

#[test]
fn larger_seed_grids_only_append_rows() {
    let d = GaussianData::centered(4e-6, 1.0, 1.0);
    let h = run(&sampled(4e-6, 7), schedule(100.0), &EvolveOptions::default());
    let sc = Scattering::new(&h, last_decade(100.0)).unwrap();
    let small = SeedGrid { n_x: 2, n_v: 2, radius_x: 1.0, radius_v: 1.0 }.seeds(&d);
    let big = SeedGrid { n_x: 3, n_v: 2, radius_x: 1.0, radius_v: 1.0 }.seeds(&d);
    assert_eq!(&big[..small.len()], &small[..]);
    let ws = sc.wave_operators(&small, &h.forward_trace(&small, sc.times()).unwrap()).unwrap();
    let wb = sc.wave_operators(&big, &h.forward_trace(&big, sc.times()).unwrap()).unwrap();
    for (a, b) in ws.iter().zip(&wb) {
        assert_eq!(a.w1, b.w1);
        assert_eq!(a.w2, b.w2);
    }
}

#[test]
fn w2_is_the_trajectory_velocity() {
    let h = run(&sampled(4e-6, 8), schedule(20.0), &EvolveOptions::default());
    let sc = Scattering::new(&h, last_decade(20.0)).unwrap();
    let s = seeds();
    let traj = h.forward_trace(&s, sc.times()).unwrap();
    let waves = sc.wave_operators(&s, &traj).unwrap();
    for (w, tr) in waves.iter().zip(&traj) {
        for (k, (x, v)) in tr.iter().enumerate() {
            assert_eq!(w.w2[k], *v);
            let t = sc.times()[k];
            assert_eq!(wave_op(t, x, v, &sc.a_t(k, v), 0.75).1, *v);
        }
    }
}

#[test]
fn zero_data_scattering_is_trivial() {
    let e = sampled(0.0, 9);
    let d = GaussianData::centered(0.0, 1.0, 1.0);
    let f0 = GaussianData::centered(1.0, 1.0, 1.0);
    let h = run(&e, schedule(100.0), &EvolveOptions::default());
    let sc = Scattering::new(&h, last_decade(100.0)).unwrap();
    assert!(sc.v_plus_nodes.iter().zip(&h.snapshots[0].v).all(|(a, b)| a == b));
    let s = seeds();
    let traj = h.forward_trace(&s, sc.times()).unwrap();
    let waves = sc.wave_operators(&s, &traj).unwrap();
    for w in &waves {
        let (x, v) = w.seed;
        assert!(w.w2.iter().all(|w2| *w2 == v));
        for (k, w1) in w.w1.iter().enumerate() {
            assert!((w1 - x).norm() <= 1e-13 * (1.0 + sc.times()[k]), "{:e}", (w1 - x).norm());
        }
    }
    let k = h.snapshots.len() - 1;
    assert_eq!(sc.a_t(k, &Vec3::x()), Vec3::zeros());
    assert_eq!(sc.da_dt(k, &Vec3::x()), Vec3::zeros());
    let ks: Vec<usize> = (0..h.snapshots.len()).collect();
    assert!(sc.residuals(&d, &waves, &ks).unwrap().iter().all(|r| *r == [0.0; 3]));
    // With zero field the modified distribution is f₀ itself.
    let g = sc.modified_dist_g(&f0, 100.0, &s).unwrap();
    for ((x, v), g) in s.iter().zip(&g) {
        assert!((g - f0.evaluate(x, v)).abs() <= 1e-12 * f0.evaluate(x, v));
    }
    for (f1, f2) in sc.f_field(100.0, &s).unwrap() {
        assert_eq!((f1, f2), (Vec3::zeros(), Vec3::zeros()));
    }
}

#[test]
fn modified_distribution_is_nonnegative() {
    let d = GaussianData::centered(4e-6, 1.0, 1.0);
    let h = run(&sampled(4e-6, 10), schedule(20.0), &EvolveOptions::default());
    let sc = Scattering::new(&h, last_decade(20.0)).unwrap();
    let g = sc.modified_dist_g(&d, 20.0, &seeds()).unwrap();
    assert!(g.iter().all(|g| *g >= 0.0));
}

#[test]
fn mass_error_shrinks_with_refinement() {
    // At 5σ the mass outside the box (3.4e-6 relative) is already the floor for n >= 12.
    let d = GaussianData::centered(1.0, 1.0, 1.0);
    let errors: Vec<f64> = [8, 12, 16]
        .iter()
        .map(|n| (QuadratureSpec::uniform(6.0, *n).node_mass(&d).unwrap() - d.mass()).abs())
        .collect();
    assert!(errors[0] > errors[1] && errors[1] > errors[2], "{errors:?}");
    assert!(discretize(&GaussianData::centered(0.0, 1.0, 1.0), &QuadratureSpec::uniform(5.0, 3))
        .unwrap()
        .weights
        .iter()
        .all(|w| *w == 0.0));
}
