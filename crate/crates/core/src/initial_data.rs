//! Gaussian initial data, its weighted norms, and its discretization into a
//! weighted particle ensemble.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::io::{read_csv, write_csv};
use crate::quadrature::{Rule, Rule1d};
use crate::{bracket, Error, Result, Vec3};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// `f₀(x,v) = η exp(-|x-c_x|²/(2σ_x²) - |v-c_v|²/(2σ_v²))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianData {
    pub eta: f64,
    pub sigma_x: f64,
    pub sigma_v: f64,
    pub center_x: [f64; 3],
    pub center_v: [f64; 3],
}

impl GaussianData {
    pub fn centered(eta: f64, sigma_x: f64, sigma_v: f64) -> Self {
        Self { eta, sigma_x, sigma_v, center_x: [0.0; 3], center_v: [0.0; 3] }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidParameter(format!("eta = {} must be >= 0", self.eta)));
        }
        if !(self.sigma_x > 0.0 && self.sigma_v > 0.0) {
            return Err(Error::InvalidParameter("Gaussian widths must be positive".into()));
        }
        Ok(())
    }

    pub fn cx(&self) -> Vec3 {
        Vec3::from(self.center_x)
    }

    pub fn cv(&self) -> Vec3 {
        Vec3::from(self.center_v)
    }

    pub fn with_eta(self, eta: f64) -> Self {
        Self { eta, ..self }
    }

    #[inline]
    fn exponent(&self, x: &Vec3, v: &Vec3) -> f64 {
        let dx = (x - self.cx()).norm_squared() / (self.sigma_x * self.sigma_x);
        let dv = (v - self.cv()).norm_squared() / (self.sigma_v * self.sigma_v);
        -0.5 * (dx + dv)
    }

    pub fn evaluate(&self, x: &Vec3, v: &Vec3) -> f64 {
        if self.eta == 0.0 {
            return 0.0;
        }
        self.eta * self.exponent(x, v).exp()
    }

    /// `(∇_x f₀, ∇_v f₀)`.
    pub fn grad(&self, x: &Vec3, v: &Vec3) -> (Vec3, Vec3) {
        let f = self.evaluate(x, v);
        let gx = -(x - self.cx()) * (f / (self.sigma_x * self.sigma_x));
        let gv = -(v - self.cv()) * (f / (self.sigma_v * self.sigma_v));
        (gx, gv)
    }

    /// `∫∫ f₀ = η (2π)³ σ_x³ σ_v³`.
    pub fn mass(&self) -> f64 {
        self.eta * TWO_PI.powi(3) * (self.sigma_x * self.sigma_v).powi(3)
    }

    /// Scale `η` so that the total of [`smallness_norms`] equals `target`.
    pub fn with_smallness_target(self, q: &QuadratureSpec, target: f64) -> Result<Self> {
        let unit = smallness_norms(&self.with_eta(1.0), q)?;
        Ok(self.with_eta(target / unit.total))
    }
}

/// Tensor-product quadrature over the truncated phase-space box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadratureSpec {
    /// Box half-widths in units of length / velocity (not σ).
    pub radius_x: f64,
    pub radius_v: f64,
    /// Nodes per axis in the position and velocity blocks.
    pub n_x: usize,
    pub n_v: usize,
    pub rule: Rule,
    /// Drop nodes where `f₀ < min_relative_weight · η`.
    pub min_relative_weight: f64,
    /// Shift the velocity lattice of every position node by a distinct
    /// low-discrepancy fraction of a cell (midpoint rule only), so that no
    /// two particles share a velocity.
    pub stagger: bool,
    pub max_nodes: usize,
}

impl Default for QuadratureSpec {
    /// Nine staggered midpoint nodes per axis on `[-5, 5]`, pruned below
    /// `e^{-4.5²/2} η`: about 2.3×10⁴ particles for unit widths.
    fn default() -> Self {
        Self { min_relative_weight: (-10.125f64).exp(), stagger: true, ..Self::uniform(5.0, 9) }
    }
}

impl QuadratureSpec {
    pub fn uniform(radius: f64, n: usize) -> Self {
        Self {
            radius_x: radius,
            radius_v: radius,
            n_x: n,
            n_v: n,
            rule: Rule::Midpoint,
            min_relative_weight: 0.0,
            stagger: false,
            max_nodes: 50_000_000,
        }
    }

    pub fn validate(&self, d: &GaussianData) -> Result<()> {
        if self.n_x == 0 || self.n_v == 0 {
            return Err(Error::InvalidParameter("quadrature needs at least one node per axis".into()));
        }
        if self.radius_x < 5.0 * d.sigma_x * (1.0 - 1e-12) || self.radius_v < 5.0 * d.sigma_v * (1.0 - 1e-12) {
            return Err(Error::InvalidParameter(format!(
                "truncation radii ({}, {}) must be at least 5σ ({}, {})",
                self.radius_x,
                self.radius_v,
                5.0 * d.sigma_x,
                5.0 * d.sigma_v
            )));
        }
        if self.stagger && self.rule != Rule::Midpoint {
            return Err(Error::InvalidParameter("velocity staggering needs the midpoint rule".into()));
        }
        if !(0.0..1.0).contains(&self.min_relative_weight) {
            return Err(Error::InvalidParameter("min_relative_weight must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Cell width of the position block (the softening reference length).
    pub fn spacing_x(&self) -> f64 {
        2.0 * self.radius_x / self.n_x as f64
    }

    pub fn spacing_v(&self) -> f64 {
        2.0 * self.radius_v / self.n_v as f64
    }

    fn axis_rules(&self, d: &GaussianData) -> ([Rule1d; 3], [Rule1d; 3]) {
        let cx = d.center_x;
        let cv = d.center_v;
        let rx = |k: usize| Rule1d::new(self.rule, self.n_x, cx[k] - self.radius_x, cx[k] + self.radius_x);
        let rv = |k: usize| Rule1d::new(self.rule, self.n_v, cv[k] - self.radius_v, cv[k] + self.radius_v);
        ([rx(0), rx(1), rx(2)], [rv(0), rv(1), rv(2)])
    }

    /// Visit every retained node `(x, v, weight)` in a fixed order without
    /// materialising the ensemble. Returns the number of visited nodes.
    pub fn for_each_node(&self, d: &GaussianData, mut visit: impl FnMut(Vec3, Vec3, f64)) -> Result<usize> {
        self.validate(d)?;
        let (ax, av) = self.axis_rules(d);
        let h_v = self.spacing_v();
        let threshold = self.min_relative_weight * d.eta;
        let mut count = 0usize;
        let mut x_index = 0u64;
        for (&x0, &wx0) in ax[0].nodes.iter().zip(&ax[0].weights) {
            for (&x1, &wx1) in ax[1].nodes.iter().zip(&ax[1].weights) {
                for (&x2, &wx2) in ax[2].nodes.iter().zip(&ax[2].weights) {
                    let x = Vec3::new(x0, x1, x2);
                    let wx = wx0 * wx1 * wx2;
                    let shift = if self.stagger { stagger_offset(x_index) * h_v } else { Vec3::zeros() };
                    x_index += 1;
                    for (&v0, &wv0) in av[0].nodes.iter().zip(&av[0].weights) {
                        for (&v1, &wv1) in av[1].nodes.iter().zip(&av[1].weights) {
                            for (&v2, &wv2) in av[2].nodes.iter().zip(&av[2].weights) {
                                let v = Vec3::new(v0, v1, v2) + shift;
                                let f = d.evaluate(&x, &v);
                                if self.min_relative_weight > 0.0 && f < threshold {
                                    continue;
                                }
                                count += 1;
                                if count > self.max_nodes {
                                    return Err(Error::TooManyNodes { requested: count, max: self.max_nodes });
                                }
                                visit(x, v, f * wx * wv0 * wv1 * wv2);
                            }
                        }
                    }
                }
            }
        }
        Ok(count)
    }

    /// `Σ wᵢ` without storing nodes.
    pub fn node_mass(&self, d: &GaussianData) -> Result<f64> {
        let mut m = 0.0;
        self.for_each_node(d, |_, _, w| m += w)?;
        Ok(m)
    }
}

/// Offset in `[-1/2, 1/2)³` from the additive recurrence with the
/// plastic-number generator (well spread in three dimensions).
fn stagger_offset(k: u64) -> Vec3 {
    const PHI3: f64 = 1.324_717_957_244_746;
    let g = [1.0 / PHI3, 1.0 / (PHI3 * PHI3), 1.0 / (PHI3 * PHI3 * PHI3)];
    let k = k as f64;
    Vec3::new(
        (0.5 + k * g[0]).fract() - 0.5,
        (0.5 + k * g[1]).fract() - 0.5,
        (0.5 + k * g[2]).fract() - 0.5,
    )
}

/// Weighted particle representation of `f₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub weights: Vec<f64>,
}

impl Ensemble {
    pub fn new(positions: Vec<Vec3>, velocities: Vec<Vec3>, weights: Vec<f64>) -> Result<Self> {
        if positions.len() != velocities.len() || positions.len() != weights.len() {
            return Err(Error::InvalidParameter("ensemble columns have different lengths".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
            return Err(Error::InvalidParameter(format!("negative or NaN weight {w}")));
        }
        Ok(Self { positions, velocities, weights })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn momentum(&self) -> Vec3 {
        self.velocities.iter().zip(&self.weights).map(|(v, w)| v * *w).sum()
    }

    pub fn concat(&self, other: &Ensemble) -> Ensemble {
        let mut out = self.clone();
        out.positions.extend_from_slice(&other.positions);
        out.velocities.extend_from_slice(&other.velocities);
        out.weights.extend_from_slice(&other.weights);
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows = (0..self.len()).map(|i| {
            let x = self.positions[i];
            let v = self.velocities[i];
            vec![x[0], x[1], x[2], v[0], v[1], v[2], self.weights[i]]
        });
        write_csv(path, &["x1", "x2", "x3", "v1", "v2", "v3", "w"], rows)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let table = read_csv(path)?;
        table.expect_header(&["x1", "x2", "x3", "v1", "v2", "v3", "w"])?;
        let mut pos = Vec::with_capacity(table.rows.len());
        let mut vel = Vec::with_capacity(table.rows.len());
        let mut w = Vec::with_capacity(table.rows.len());
        for r in &table.rows {
            pos.push(Vec3::new(r[0], r[1], r[2]));
            vel.push(Vec3::new(r[3], r[4], r[5]));
            w.push(r[6]);
        }
        Ensemble::new(pos, vel, w)
    }
}

/// Relative tolerance of the mass check performed by [`discretize`].
pub const MASS_TOLERANCE: f64 = 5e-3;

/// Tensor-grid discretization with `wᵢ = f₀(xᵢ,vᵢ) × cell weight`.
pub fn discretize(d: &GaussianData, q: &QuadratureSpec) -> Result<Ensemble> {
    d.validate()?;
    let mut pos = Vec::new();
    let mut vel = Vec::new();
    let mut w = Vec::new();
    q.for_each_node(d, |x, v, wi| {
        pos.push(x);
        vel.push(v);
        w.push(wi);
    })?;
    let ens = Ensemble::new(pos, vel, w)?;
    let expected = d.mass();
    if expected > 0.0 {
        let got = ens.mass();
        let rel_err = (got - expected).abs() / expected;
        if rel_err > MASS_TOLERANCE {
            return Err(Error::MassMismatch { got, expected, rel_err, tol: MASS_TOLERANCE });
        }
    }
    Ok(ens)
}

/// Numerical estimates of the norms entering the small-data hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBundle {
    /// `‖f₀‖_{L¹}`.
    pub l1: f64,
    /// `‖f₀‖_{L∞}`.
    pub linf: f64,
    /// `‖⟨x⟩f₀‖_{W^{1,1}_{x,v}}`.
    pub weighted_w11: f64,
    /// `‖⟨x⟩f₀‖_{W^{1,∞}_{x,v}}`.
    pub weighted_w1inf: f64,
    /// `‖⟨x⟩f₀‖_{W^{1,1}_x W^{1,∞}_v}`.
    pub mixed_x1_vinf: f64,
    /// `‖⟨x⟩f₀‖_{W^{1,1}_v W^{1,∞}_x}`.
    pub mixed_v1_xinf: f64,
    /// Sum of the four weighted entries.
    pub total: f64,
    /// Set when doubling the resolution moves some entry by more than 5%.
    pub underresolved: bool,
}

impl NormBundle {
    fn entries(&self) -> [f64; 7] {
        [
            self.l1,
            self.linf,
            self.weighted_w11,
            self.weighted_w1inf,
            self.mixed_x1_vinf,
            self.mixed_v1_xinf,
            self.total,
        ]
    }
}

/// Per-block integrals and sups of `|∂^m u|` for `|m| ≤ 1`.
struct BlockNorms {
    /// L¹ of the function and of each first partial.
    l1: [f64; 4],
    sup: [f64; 4],
}

impl BlockNorms {
    fn l1_total(&self) -> f64 {
        self.l1.iter().sum()
    }
    fn sup_total(&self) -> f64 {
        self.sup.iter().sum()
    }
    fn l1_derivs(&self) -> f64 {
        self.l1[1..].iter().sum()
    }
    fn sup_derivs(&self) -> f64 {
        self.sup[1..].iter().sum()
    }
}

/// L¹ by the quadrature rule on the block, sup on a refined uniform grid
/// (which contains the block centre) of `4n+1` points per axis.
fn block_norms(
    rule: &[Rule1d; 3],
    center: [f64; 3],
    radius: f64,
    n: usize,
    value_and_grad: impl Fn(&Vec3) -> (f64, Vec3),
) -> BlockNorms {
    let mut l1 = [0.0; 4];
    for (&a, &wa) in rule[0].nodes.iter().zip(&rule[0].weights) {
        for (&b, &wb) in rule[1].nodes.iter().zip(&rule[1].weights) {
            for (&c, &wc) in rule[2].nodes.iter().zip(&rule[2].weights) {
                let (f, g) = value_and_grad(&Vec3::new(a, b, c));
                let w = wa * wb * wc;
                l1[0] += w * f.abs();
                for k in 0..3 {
                    l1[k + 1] += w * g[k].abs();
                }
            }
        }
    }
    let m = 4 * n + 1;
    let h = 2.0 * radius / (m - 1) as f64;
    let mut sup = [0.0f64; 4];
    for i in 0..m {
        for j in 0..m {
            for k in 0..m {
                let p = Vec3::new(
                    center[0] - radius + i as f64 * h,
                    center[1] - radius + j as f64 * h,
                    center[2] - radius + k as f64 * h,
                );
                let (f, g) = value_and_grad(&p);
                sup[0] = sup[0].max(f.abs());
                for c in 0..3 {
                    sup[c + 1] = sup[c + 1].max(g[c].abs());
                }
            }
        }
    }
    BlockNorms { l1, sup }
}

fn norms_at(d: &GaussianData, q: &QuadratureSpec) -> NormBundle {
    let (ax, av) = q.axis_rules(d);
    let cx = d.cx();
    let cv = d.cv();
    let sx2 = d.sigma_x * d.sigma_x;
    let sv2 = d.sigma_v * d.sigma_v;
    // f₀ = η G(x) H(v); every norm factorises over the two blocks.
    let g_plain = block_norms(&ax, d.center_x, q.radius_x, q.n_x, |x| {
        let g = (-(x - cx).norm_squared() / (2.0 * sx2)).exp();
        (g, -(x - cx) * (g / sx2))
    });
    let g_weighted = block_norms(&ax, d.center_x, q.radius_x, q.n_x, |x| {
        let g = (-(x - cx).norm_squared() / (2.0 * sx2)).exp();
        let br = bracket(x);
        // ∇(⟨x⟩G) = (x/⟨x⟩) G + ⟨x⟩ ∇G
        (br * g, x * (g / br) - (x - cx) * (br * g / sx2))
    });
    let h = block_norms(&av, d.center_v, q.radius_v, q.n_v, |v| {
        let h = (-(v - cv).norm_squared() / (2.0 * sv2)).exp();
        (h, -(v - cv) * (h / sv2))
    });
    let eta = d.eta;
    let l1 = eta * g_plain.l1[0] * h.l1[0];
    let linf = eta * g_plain.sup[0] * h.sup[0];
    let weighted_w11 = eta * (g_weighted.l1_total() * h.l1[0] + g_weighted.l1[0] * h.l1_derivs());
    let weighted_w1inf = eta * (g_weighted.sup_total() * h.sup[0] + g_weighted.sup[0] * h.sup_derivs());
    let mixed_x1_vinf = eta * g_weighted.l1_total() * h.sup_total();
    let mixed_v1_xinf = eta * h.l1_total() * g_weighted.sup_total();
    NormBundle {
        l1,
        linf,
        weighted_w11,
        weighted_w1inf,
        mixed_x1_vinf,
        mixed_v1_xinf,
        total: weighted_w11 + weighted_w1inf + mixed_x1_vinf + mixed_v1_xinf,
        underresolved: false,
    }
}

/// Estimates of `‖⟨x⟩f₀‖` in `W^{1,1} ∩ W^{1,∞}` and the two mixed norms,
/// plus the plain `L¹`/`L∞` norms. The resolution is checked by repeating the
/// computation with twice the nodes per axis.
pub fn smallness_norms(d: &GaussianData, q: &QuadratureSpec) -> Result<NormBundle> {
    d.validate()?;
    q.validate(d)?;
    let coarse = norms_at(d, q);
    let fine = norms_at(d, &QuadratureSpec { n_x: 2 * q.n_x, n_v: 2 * q.n_v, ..*q });
    let underresolved = coarse
        .entries()
        .iter()
        .zip(fine.entries().iter())
        .any(|(c, f)| (c - f).abs() > 0.05 * f.abs());
    if underresolved {
        log::warn!("smallness norms change by more than 5% under refinement; quadrature is under-resolved");
    }
    Ok(NormBundle { underresolved, ..coarse })
}
