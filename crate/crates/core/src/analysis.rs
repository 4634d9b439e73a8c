//! Log–log rate fits, the interpolation-inequality ratio, and the rate report
//! assembled from a run directory.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::io::{read_json, read_table, sidecar_path, Sidecar, Table};
use crate::quadrature::gauss_legendre;
use crate::{Error, Result, Vec3};

pub const FIELDS_CSV: &str = "fields.csv";
pub const WAVE_CSV: &str = "wave.csv";
pub const RESIDUAL_CSV: &str = "residual.csv";
pub const A_T_CSV: &str = "a_t.csv";
pub const MODIFIED_CSV: &str = "modified.csv";
pub const REPORT_JSON: &str = "report.json";

pub const FIELDS_COLUMNS: [&str; 5] = ["t", "supE", "supGradE", "supHessE", "n_probes"];
pub const WAVE_COLUMNS: [&str; 10] = ["t", "seed_id", "W1x", "W1y", "W1z", "W2x", "W2y", "W2z", "wdiff1", "diff2"];
pub const RESIDUAL_COLUMNS: [&str; 4] = ["t", "residual_ref", "residual_tilde", "residual_free"];
pub const A_T_COLUMNS: [&str; 6] = ["t", "v_id", "Ax", "Ay", "Az", "diff_inf"];
pub const MODIFIED_COLUMNS: [&str; 5] = ["t", "sup_weighted_g", "sup_F1_weighted", "sup_dA_dt", "max_div_rel"];

/// Least-squares fit of `log y = intercept + exponent · log t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub exponent: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub window: (f64, f64),
    pub n_points: usize,
}

pub const MIN_FIT_POINTS: usize = 5;

/// Relative slack on the window ends, so a bound computed as `T/10` still
/// admits a snapshot written at the same nominal time.
const WINDOW_SLACK: f64 = 1e-9;

fn in_window(t: f64, w: (f64, f64)) -> bool {
    t >= w.0 * (1.0 - WINDOW_SLACK) && t <= w.1 * (1.0 + WINDOW_SLACK)
}

pub fn rate_fit(series: &[(f64, f64)], window: (f64, f64)) -> Result<RateFit> {
    let pts: Vec<(f64, f64)> = series.iter().copied().filter(|(t, _)| in_window(*t, window)).collect();
    if pts.len() < MIN_FIT_POINTS {
        return Err(Error::InsufficientPoints { needed: MIN_FIT_POINTS, got: pts.len() });
    }
    if let Some(&(t, value)) = pts.iter().find(|(t, y)| !(*y > 0.0) || !(*t > 0.0)) {
        return Err(Error::NonPositiveValue { t, value });
    }
    if pts.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::InvalidParameter("rate_fit: times must be strictly increasing".into()));
    }
    let n = pts.len() as f64;
    let lx: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    let constant = ly.iter().all(|y| *y == ly[0]);
    let exponent = if constant { 0.0 } else { sxy / sxx };
    let intercept = if constant { ly[0] } else { my - exponent * mx };
    let ss_res: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - exponent * x).powi(2)).sum();
    let r_squared = if !constant && syy > 0.0 { (1.0 - ss_res / syy).clamp(0.0, 1.0) } else { 1.0 };
    Ok(RateFit { exponent, intercept, r_squared, window, n_points: pts.len() })
}

/// Density evaluator with closed-form norms, for [`interpolation_ratio`].
pub trait Density {
    fn eval(&self, y: &Vec3) -> f64;
    fn l1(&self) -> f64;
    fn linf(&self) -> f64;
    fn center(&self) -> Vec3;
    /// Length scale used to place the radial split and the outer cut-off.
    fn scale(&self) -> f64;
}

/// Isotropic spatial Gaussian `amplitude · exp(-|y - c|²/(2σ²))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianDensity {
    pub amplitude: f64,
    pub sigma: f64,
    pub center: Vec3,
}

impl GaussianDensity {
    pub fn unit() -> Self {
        Self { amplitude: 1.0, sigma: 1.0, center: Vec3::zeros() }
    }

    /// `ρ_s(y) = ρ(y/s)`.
    pub fn dilate(&self, s: f64) -> Self {
        Self { amplitude: self.amplitude, sigma: self.sigma * s, center: self.center * s }
    }
}

impl Density for GaussianDensity {
    fn eval(&self, y: &Vec3) -> f64 {
        self.amplitude * (-(y - self.center).norm_squared() / (2.0 * self.sigma * self.sigma)).exp()
    }
    fn l1(&self) -> f64 {
        self.amplitude * (2.0 * std::f64::consts::PI * self.sigma * self.sigma).powf(1.5)
    }
    fn linf(&self) -> f64 {
        self.amplitude
    }
    fn center(&self) -> Vec3 {
        self.center
    }
    fn scale(&self) -> f64 {
        self.sigma
    }
}

/// `∫ ρ(y)|x - y|^{-(m+α)} dy / (‖ρ‖₁^{(3-m-α)/3} ‖ρ‖_∞^{(m+α)/3})`.
///
/// Spherical quadrature about `x`; the radial integral is split at a quarter
/// of the density scale, and the singular inner part is regularised by the
/// substitution `r = h s^{1/(3-m-α)}`.
pub fn interpolation_ratio(alpha: f64, rho: &impl Density, x: &Vec3, m: u32) -> Result<f64> {
    let p = m as f64 + alpha;
    if !(alpha > 0.0 && alpha < 1.0) || !(1..=2).contains(&m) || p >= 3.0 {
        return Err(Error::InvalidParameter(format!("interpolation_ratio needs m ∈ {{1,2}}, m + α < 3 (m = {m}, α = {alpha})")));
    }
    let q = 3.0 - p;
    let sigma = rho.scale();
    let h = 0.25 * sigma;
    let r_max = (x - rho.center()).norm() + 10.0 * sigma;

    let mu = gauss_legendre(24, -1.0, 1.0);
    let n_phi = 48;
    let dirs: Vec<(Vec3, f64)> = mu
        .nodes
        .iter()
        .zip(&mu.weights)
        .flat_map(|(&c, &w)| {
            let s = (1.0 - c * c).max(0.0).sqrt();
            (0..n_phi).map(move |k| {
                let phi = 2.0 * std::f64::consts::PI * (k as f64 + 0.5) / n_phi as f64;
                (Vec3::new(s * phi.cos(), s * phi.sin(), c), w * 2.0 * std::f64::consts::PI / n_phi as f64)
            })
        })
        .collect();
    let shell = |r: f64| dirs.iter().map(|(d, w)| w * rho.eval(&(x + d * r))).sum::<f64>();

    let inner_rule = gauss_legendre(16, 0.0, 1.0);
    let inner = h.powf(q) / q * inner_rule.integrate(|s| shell(h * s.powf(1.0 / q)));

    let panels = ((r_max - h) / h).ceil().max(1.0) as usize;
    let width = (r_max - h) / panels as f64;
    let mut outer = 0.0;
    for j in 0..panels {
        let a = h + j as f64 * width;
        outer += gauss_legendre(8, a, a + width).integrate(|r| r.powf(2.0 - p) * shell(r));
    }
    let norm = rho.l1().powf(q / 3.0) * rho.linf().powf(p / 3.0);
    Ok((inner + outer) / norm)
}

/// Exponent tolerances and fit-quality thresholds for the report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub field: f64,
    pub grad_field: f64,
    pub hess_field: f64,
    pub momentum: f64,
    pub correction: f64,
    pub w1: f64,
    pub w2: f64,
    pub f1: f64,
    /// The residual passes when its exponent is at most the predicted one plus this.
    pub residual_slack: f64,
    pub field_min_r2: f64,
    pub residual_min_r2: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            field: 0.2,
            grad_field: 0.2,
            hess_field: 0.3,
            momentum: 0.15,
            correction: 0.15,
            w1: 0.2,
            w2: 0.15,
            f1: 0.25,
            residual_slack: 0.2,
            field_min_r2: 0.98,
            residual_min_r2: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub quantity: String,
    pub predicted_exponent: f64,
    pub fitted_exponent: Option<f64>,
    pub r_squared: Option<f64>,
    pub window: (f64, f64),
    pub n_points: usize,
    pub pass: bool,
    pub trivial: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub alpha: f64,
    pub trivial: bool,
    pub entries: Vec<ReportEntry>,
}

impl Report {
    pub fn entry(&self, quantity: &str) -> Option<&ReportEntry> {
        self.entries.iter().find(|e| e.quantity == quantity)
    }

    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }
}

enum Check {
    Band(f64),
    AtMost(f64),
}

/// Largest value of `col` per distinct `t`, in increasing `t`.
pub fn sup_by_time(table: &Table, col: &str) -> Result<Vec<(f64, f64)>> {
    let t = table.column("t")?;
    let y = table.column(col)?;
    let mut m: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
    for (t, y) in t.into_iter().zip(y) {
        // positive times order like their bit patterns
        let e = m.entry(t.to_bits()).or_insert((t, 0.0));
        e.1 = e.1.max(y);
    }
    Ok(m.into_values().collect())
}

/// Hash recorded in a table's sidecar.
pub fn table_hash(path: &Path) -> Result<String> {
    let side: Sidecar = read_json(&sidecar_path(path))?;
    Ok(side.config_hash)
}

/// Fit one series and grade it. Degenerate series (a zero or missing value
/// in the window) are marked trivial.
fn grade(quantity: &str, predicted: f64, series: &[(f64, f64)], window: (f64, f64), check: Check, min_r2: f64) -> Result<ReportEntry> {
    let in_w: Vec<&(f64, f64)> = series.iter().filter(|(t, _)| in_window(*t, window)).collect();
    let degenerate = in_w.iter().any(|(_, y)| *y <= 0.0);
    let mut e = ReportEntry {
        quantity: quantity.to_string(),
        predicted_exponent: predicted,
        fitted_exponent: None,
        r_squared: None,
        window,
        n_points: in_w.len(),
        pass: false,
        trivial: degenerate,
    };
    if degenerate {
        return Ok(e);
    }
    let fit = rate_fit(series, window)?;
    let slope_ok = match check {
        Check::Band(tol) => (fit.exponent - predicted).abs() <= tol,
        Check::AtMost(slack) => fit.exponent <= predicted + slack,
    };
    e.fitted_exponent = Some(fit.exponent);
    e.r_squared = Some(fit.r_squared);
    e.pass = slope_ok && fit.r_squared >= min_r2;
    Ok(e)
}

/// Read the run's tables (all must carry the same config hash) and grade the
/// nine tracked rates on `window`.
pub fn build_report(dir: &Path, alpha: f64, window: (f64, f64), tol: &Tolerances) -> Result<Report> {
    let fields_path = dir.join(FIELDS_CSV);
    if !fields_path.exists() {
        return Err(Error::MissingInput(fields_path));
    }
    let hash = table_hash(&fields_path)?;
    let load = |name: &str, cols: &[&str]| -> Result<Table> {
        let p = dir.join(name);
        if !p.exists() {
            return Err(Error::MissingInput(p));
        }
        let t = read_table(&p, &hash)?;
        t.expect_header(cols)?;
        Ok(t)
    };
    let fields = load(FIELDS_CSV, &FIELDS_COLUMNS)?;
    let wave = load(WAVE_CSV, &WAVE_COLUMNS)?;
    let residual = load(RESIDUAL_CSV, &RESIDUAL_COLUMNS)?;
    let a_t = load(A_T_CSV, &A_T_COLUMNS)?;
    let modified = load(MODIFIED_CSV, &MODIFIED_COLUMNS)?;

    let w1 = sup_by_time(&wave, "wdiff1")?;
    let w2 = sup_by_time(&wave, "diff2")?;
    let rows = [
        ("supE", -(1.0 + alpha), sup_by_time(&fields, "supE")?, Check::Band(tol.field), tol.field_min_r2),
        ("supGradE", -(2.0 + alpha), sup_by_time(&fields, "supGradE")?, Check::Band(tol.grad_field), tol.field_min_r2),
        ("supHessE", -3.0, sup_by_time(&fields, "supHessE")?, Check::Band(tol.hess_field), tol.field_min_r2),
        ("momentum_limit", -alpha, w2.clone(), Check::Band(tol.momentum), 0.0),
        ("A_t_limit", -alpha, sup_by_time(&a_t, "diff_inf")?, Check::Band(tol.correction), 0.0),
        ("W1_weighted", -(2.0 * alpha - 1.0), w1, Check::Band(tol.w1), 0.0),
        ("W2", -alpha, w2, Check::Band(tol.w2), 0.0),
        ("F1_weighted", -2.0 * alpha, sup_by_time(&modified, "sup_F1_weighted")?, Check::Band(tol.f1), 0.0),
        (
            "residual_ref",
            -(2.0 * alpha - 1.0),
            sup_by_time(&residual, "residual_ref")?,
            Check::AtMost(tol.residual_slack),
            tol.residual_min_r2,
        ),
    ];
    let entries = rows
        .into_iter()
        .map(|(q, pred, s, check, r2)| grade(q, pred, &s, window, check, r2))
        .collect::<Result<Vec<_>>>()?;
    let trivial = entries.iter().all(|e| e.trivial);
    Ok(Report { config_hash: hash, alpha, trivial, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{write_json, write_table};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn power_law(p: f64, c: f64) -> Vec<(f64, f64)> {
        (0..40).map(|k| 1.25f64.powi(k)).map(|t| (t, c * t.powf(p))).collect()
    }

    #[test]
    fn rate_fit_examples() {
        let f = rate_fit(&[(1.0, 1.0), (10.0, 0.1), (100.0, 0.01), (1000.0, 1e-3), (1e4, 1e-4)], (1.0, 1e4)).unwrap();
        assert_relative_eq!(f.exponent, -1.0, epsilon = 1e-14);
        assert_relative_eq!(f.r_squared, 1.0, epsilon = 1e-14);
        let c = rate_fit(&power_law(0.0, 3.0), (1.0, 1e3)).unwrap();
        assert_eq!(c.exponent, 0.0);
        let two: Vec<(f64, f64)> = (0..5).map(|k| 4f64.powi(k)).map(|t| (t, 2.0 * t.powf(-0.5))).collect();
        assert_relative_eq!(rate_fit(&two, (1.0, 256.0)).unwrap().exponent, (0.5f64).ln() / 4f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn rate_fit_errors() {
        assert!(matches!(
            rate_fit(&[(1.0, 2.0), (4.0, 1.0)], (1.0, 4.0)),
            Err(Error::InsufficientPoints { needed: 5, got: 2 })
        ));
        let mut s = power_law(-1.0, 1.0);
        s[10].1 = 0.0;
        assert!(matches!(rate_fit(&s, (1.0, 1e4)), Err(Error::NonPositiveValue { .. })));
    }

    #[test]
    fn rate_fit_exact_on_pure_powers() {
        for p in [-3.0, -2.0, -1.0, -0.5, -0.25] {
            let f = rate_fit(&power_law(p, 0.7), (1.0, 1e4)).unwrap();
            assert!((f.exponent - p).abs() < 1e-12, "{p}: {}", f.exponent);
            assert!(1.0 - f.r_squared < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn rate_fit_slope_invariant_under_time_rescaling(p in -3.0f64..0.0, c in 0.1f64..50.0) {
            let s: Vec<(f64, f64)> = power_law(p, 1.0).iter().map(|&(t, y)| (t, y * (1.0 + 0.1 * (t.ln()).sin()))).collect();
            let scaled: Vec<(f64, f64)> = s.iter().map(|&(t, y)| (c * t, y)).collect();
            let a = rate_fit(&s, (1.0, 1e4)).unwrap();
            let b = rate_fit(&scaled, (c, c * 1e4)).unwrap();
            prop_assert!((a.exponent - b.exponent).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolation_ratio_against_closed_form_at_center() {
        // at the centre the integral is A 2π (2σ²)^{(3-p)/2} Γ((3-p)/2)
        let gamma = |q: f64| if (q - 0.625).abs() < 1e-12 { 1.434518848090557 } else { 7.533941598797611 };
        for (m, s) in [(1u32, 1.0), (2, 1.0), (1, 2.5)] {
            let rho = GaussianDensity { amplitude: 1.7, sigma: s, center: Vec3::zeros() };
            let p = m as f64 + 0.75;
            let q = (3.0 - p) / 2.0;
            let exact = 1.7 * 2.0 * std::f64::consts::PI * (2.0 * s * s).powf(q) * gamma(q);
            let norm = rho.l1().powf((3.0 - p) / 3.0) * rho.linf().powf(p / 3.0);
            let got = interpolation_ratio(0.75, &rho, &Vec3::zeros(), m).unwrap();
            assert_relative_eq!(got, exact / norm, max_relative = 1e-8);
        }
    }

    #[test]
    fn interpolation_ratio_scalings() {
        let rho = GaussianDensity::unit();
        let x = Vec3::new(0.7, -0.3, 1.1);
        for m in [1, 2] {
            let r = interpolation_ratio(0.75, &rho, &x, m).unwrap();
            assert!(r.is_finite() && r > 0.0 && r < 50.0);
            for s in [0.5, 2.0] {
                let rs = interpolation_ratio(0.75, &rho.dilate(s), &(x * s), m).unwrap();
                assert!((rs / r - 1.0).abs() <= 0.02, "m={m} s={s}: {r} vs {rs}");
            }
            let doubled = GaussianDensity { amplitude: 2.0, ..rho };
            assert_relative_eq!(interpolation_ratio(0.75, &doubled, &x, m).unwrap(), r, max_relative = 1e-12);
        }
        assert!(interpolation_ratio(0.75, &rho, &x, 3).is_err());
    }

    fn write_run(dir: &Path, hash: &str, scale: f64) {
        let times: Vec<f64> = (0..12).map(|k| 10.0 * 1.2589254117941673f64.powi(k)).collect();
        let a = 0.75;
        let pw = |t: f64, p: f64| scale * t.powf(p);
        let fields: Vec<Vec<f64>> =
            times.iter().map(|&t| vec![t, pw(t, -1.75), pw(t, -2.75), pw(t, -3.0), 10.0]).collect();
        write_table(&dir.join(FIELDS_CSV), &FIELDS_COLUMNS, &fields, hash).unwrap();
        let mut wave = Vec::new();
        for &t in &times {
            for s in 0..3 {
                let f = 1.0 + s as f64;
                wave.push(vec![t, s as f64, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, f * pw(t, -(2.0 * a - 1.0)), f * pw(t, -a)]);
            }
        }
        write_table(&dir.join(WAVE_CSV), &WAVE_COLUMNS, &wave, hash).unwrap();
        let res: Vec<Vec<f64>> = times.iter().map(|&t| vec![t, pw(t, -0.6), pw(t, -0.5), 20.0 * pw(t, 0.2)]).collect();
        write_table(&dir.join(RESIDUAL_CSV), &RESIDUAL_COLUMNS, &res, hash).unwrap();
        let at: Vec<Vec<f64>> = times.iter().map(|&t| vec![t, 0.0, 0.0, 0.0, 0.0, pw(t, -a)]).collect();
        write_table(&dir.join(A_T_CSV), &A_T_COLUMNS, &at, hash).unwrap();
        let md: Vec<Vec<f64>> = times.iter().map(|&t| vec![t, 1.0, pw(t, -1.5), pw(t, -1.75), 1e-9]).collect();
        write_table(&dir.join(MODIFIED_CSV), &MODIFIED_COLUMNS, &md, hash).unwrap();
    }

    #[test]
    fn report_on_synthetic_run() {
        let dir = tempfile::tempdir().unwrap();
        write_run(dir.path(), "h1", 1e-3);
        let r = build_report(dir.path(), 0.75, (10.0, 100.0), &Tolerances::default()).unwrap();
        assert_eq!(r.entries.len(), 9);
        assert!(r.all_pass(), "{r:#?}");
        assert!(!r.trivial);
        let again = build_report(dir.path(), 0.75, (10.0, 100.0), &Tolerances::default()).unwrap();
        let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
        write_json(&a, &r).unwrap();
        write_json(&b, &again).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());

        let zero = tempfile::tempdir().unwrap();
        write_run(zero.path(), "h0", 0.0);
        let r = build_report(zero.path(), 0.75, (10.0, 100.0), &Tolerances::default()).unwrap();
        assert!(r.trivial && r.entries.iter().all(|e| e.trivial && e.fitted_exponent.is_none()));
    }

    #[test]
    fn report_rejects_mixed_hashes_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        write_run(dir.path(), "h1", 1e-3);
        let res: Vec<Vec<f64>> = vec![vec![1.0, 1.0, 1.0, 1.0]];
        write_table(&dir.path().join(RESIDUAL_CSV), &RESIDUAL_COLUMNS, &res, "other").unwrap();
        assert!(matches!(
            build_report(dir.path(), 0.75, (10.0, 100.0), &Tolerances::default()),
            Err(Error::HashMismatch { .. })
        ));
        std::fs::remove_file(dir.path().join(WAVE_CSV)).unwrap();
        assert!(matches!(
            build_report(dir.path(), 0.75, (10.0, 100.0), &Tolerances::default()),
            Err(Error::MissingInput(_))
        ));
    }
}
