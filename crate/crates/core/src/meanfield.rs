//! The self-consistent field `E(t,x) = -Σᵢ wᵢ ∇w(x - Xᵢ(t))` of a weighted
//! particle snapshot: direct sums, a Barnes–Hut octree, and sup-norm
//! diagnostics over probe sets.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kernel::InteractionKernel;
use crate::{Error, Mat3, Result, RieszParams, Vec3};

/// `∂_k ∇E` stored as `hess_e[k]`.
pub type Rank3 = [Mat3; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSample {
    pub t: f64,
    pub probe: Vec3,
    pub e: Vec3,
    pub grad_e: Mat3,
    pub hess_e: Rank3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Expansion {
    Monopole,
    Dipole,
    #[default]
    Quadrupole,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeParams {
    pub theta: f64,
    pub leaf_size: usize,
    pub expansion: Expansion,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self { theta: 0.5, leaf_size: 16, expansion: Expansion::Quadrupole }
    }
}

impl TreeParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.theta) {
            return Err(Error::InvalidParameter(format!("theta = {} outside [0, 1)", self.theta)));
        }
        if self.leaf_size == 0 {
            return Err(Error::InvalidParameter("leaf_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum FieldMethod {
    #[default]
    Direct,
    Tree(TreeParams),
}

/// `-Σ_{i≠exclude} wᵢ ∇w(probe - Xᵢ)` through any kernel implementation.
pub fn field_direct<K: InteractionKernel + ?Sized>(
    k: &K,
    positions: &[Vec3],
    weights: &[f64],
    probe: &Vec3,
    exclude: Option<usize>,
) -> Result<Vec3> {
    let mut e = Vec3::zeros();
    for (i, (x, w)) in positions.iter().zip(weights).enumerate() {
        if Some(i) == exclude || *w == 0.0 {
            continue;
        }
        e -= k.grad(&(probe - x))? * *w;
    }
    Ok(e)
}

/// `∇E = -Σ_{i≠exclude} wᵢ ∇²w(probe - Xᵢ)`.
pub fn field_gradient<K: InteractionKernel + ?Sized>(
    k: &K,
    positions: &[Vec3],
    weights: &[f64],
    probe: &Vec3,
    exclude: Option<usize>,
) -> Result<Mat3> {
    let mut g = Mat3::zeros();
    for (i, (x, w)) in positions.iter().zip(weights).enumerate() {
        if Some(i) == exclude || *w == 0.0 {
            continue;
        }
        g -= k.hessian(&(probe - x))? * *w;
    }
    Ok(g)
}

/// Central differences of [`field_gradient`] with step `h`.
pub fn field_hessian_fd<K: InteractionKernel + ?Sized>(
    k: &K,
    positions: &[Vec3],
    weights: &[f64],
    probe: &Vec3,
    exclude: Option<usize>,
    h: f64,
) -> Result<Rank3> {
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!("finite-difference step {h} must be positive")));
    }
    let centre = field_gradient(k, positions, weights, probe, exclude)?;
    let mut out = [Mat3::zeros(); 3];
    for (kk, slot) in out.iter_mut().enumerate() {
        let mut e = Vec3::zeros();
        e[kk] = h;
        let plus = field_gradient(k, positions, weights, &(probe + e), exclude)?;
        let minus = field_gradient(k, positions, weights, &(probe - e), exclude)?;
        *slot = (plus - minus) / (2.0 * h);
    }
    warn_on_cancellation(&centre, &out, h);
    Ok(out)
}

fn max_abs_rank3(t: &Rank3) -> f64 {
    t.iter().map(|m| m.amax()).fold(0.0, f64::max)
}

fn warn_on_cancellation(centre: &Mat3, d: &Rank3, h: f64) {
    let scale = centre.amax();
    let diff = 2.0 * h * max_abs_rank3(d);
    if scale > 0.0 && diff > 0.0 && f64::EPSILON * scale / diff > 1e-4 {
        log::warn!("finite-difference step {h} loses more than 1e-4 relative accuracy to cancellation");
    }
}

/// Analytic field and gradient in one pass (softened kernel, `ε > 0`
/// assumed or no coincidences).
#[inline]
fn field_and_gradient_fast(p: &RieszParams, positions: &[Vec3], weights: &[f64], probe: &Vec3, exclude: Option<usize>) -> (Vec3, Mat3) {
    let eps2 = p.eps * p.eps;
    let mut e = Vec3::zeros();
    let mut g = Mat3::zeros();
    for (i, (x, w)) in positions.iter().zip(weights).enumerate() {
        if Some(i) == exclude || *w == 0.0 {
            continue;
        }
        let d = probe - x;
        let s = d.norm_squared() + eps2;
        if s == 0.0 {
            continue;
        }
        let (gr, h) = p.grad_hessian_from_r2(&d, s);
        e -= gr * *w;
        g -= h * *w;
    }
    (e, g)
}

#[inline]
fn gradient_fast(p: &RieszParams, positions: &[Vec3], weights: &[f64], probe: &Vec3, exclude: Option<usize>) -> Mat3 {
    let eps2 = p.eps * p.eps;
    let mut g = Mat3::zeros();
    for (i, (x, w)) in positions.iter().zip(weights).enumerate() {
        if Some(i) == exclude || *w == 0.0 {
            continue;
        }
        let d = probe - x;
        let s = d.norm_squared() + eps2;
        if s == 0.0 {
            continue;
        }
        g -= p.hessian_from_r2(&d, s) * *w;
    }
    g
}

#[inline]
fn field_fast(p: &RieszParams, positions: &[Vec3], weights: &[f64], probe: &Vec3, exclude: Option<usize>) -> Vec3 {
    let eps2 = p.eps * p.eps;
    let mut e = Vec3::zeros();
    for (i, (x, w)) in positions.iter().zip(weights).enumerate() {
        if Some(i) == exclude {
            continue;
        }
        let d = probe - x;
        let s = d.norm_squared() + eps2;
        if s == 0.0 {
            continue;
        }
        e -= p.grad_from_r2(&d, s) * *w;
    }
    e
}

/// Full sample (field, analytic gradient, finite-difference second
/// derivative) at one probe by direct summation.
pub fn sample_field(p: &RieszParams, positions: &[Vec3], weights: &[f64], t: f64, probe: &Vec3, exclude: Option<usize>, h: f64) -> FieldSample {
    let (e, grad_e) = field_and_gradient_fast(p, positions, weights, probe, exclude);
    let mut hess_e = [Mat3::zeros(); 3];
    for (k, slot) in hess_e.iter_mut().enumerate() {
        let mut d = Vec3::zeros();
        d[k] = h;
        let plus = gradient_fast(p, positions, weights, &(probe + d), exclude);
        let minus = gradient_fast(p, positions, weights, &(probe - d), exclude);
        *slot = (plus - minus) / (2.0 * h);
    }
    FieldSample { t, probe: *probe, e, grad_e, hess_e }
}

#[derive(Debug, Clone)]
struct Cell {
    center: Vec3,
    b_max: f64,
    mass: f64,
    dipole: Vec3,
    quadrupole: Mat3,
    start: usize,
    end: usize,
    first_child: usize,
    n_children: usize,
}

/// Barnes–Hut octree with monopole or monopole+dipole cells expanded about
/// their geometric centres.
#[derive(Debug, Clone)]
pub struct Octree {
    cells: Vec<Cell>,
    children: Vec<usize>,
    positions: Vec<Vec3>,
    weights: Vec<f64>,
    index: Vec<usize>,
    params: TreeParams,
}

impl Octree {
    pub fn build(positions: &[Vec3], weights: &[f64], params: TreeParams) -> Self {
        let n = positions.len();
        let mut index: Vec<usize> = (0..n).collect();
        let (lo, hi) = bounding_box(positions);
        let center = (lo + hi) * 0.5;
        let half = 0.5 * (hi - lo).max() * (1.0 + 1e-12) + f64::MIN_POSITIVE;
        let mut tree = Octree {
            cells: Vec::new(),
            children: Vec::new(),
            positions: Vec::new(),
            weights: Vec::new(),
            index: Vec::new(),
            params,
        };
        if n > 0 {
            tree.build_cell(positions, weights, &mut index, 0, n, center, half, 0);
        }
        tree.positions = index.iter().map(|&i| positions[i]).collect();
        tree.weights = index.iter().map(|&i| weights[i]).collect();
        tree.index = index;
        tree
    }

    #[allow(clippy::too_many_arguments)]
    fn build_cell(
        &mut self,
        pos: &[Vec3],
        w: &[f64],
        index: &mut [usize],
        start: usize,
        end: usize,
        center: Vec3,
        half: f64,
        depth: usize,
    ) -> usize {
        let slice = &index[start..end];
        let mass: f64 = slice.iter().map(|&i| w[i]).sum();
        // Quadrupole cells expand about their centre of mass, the others about
        // the geometric centre.
        let origin = if self.params.expansion == Expansion::Quadrupole && mass > 0.0 {
            slice.iter().map(|&i| pos[i] * w[i]).sum::<Vec3>() / mass
        } else {
            center
        };
        let dipole: Vec3 = slice.iter().map(|&i| (pos[i] - origin) * w[i]).sum();
        let quadrupole: Mat3 = slice
            .iter()
            .map(|&i| {
                let r = pos[i] - origin;
                r * r.transpose() * w[i]
            })
            .sum();
        let b_max = slice.iter().map(|&i| (pos[i] - origin).norm()).fold(0.0, f64::max);
        let id = self.cells.len();
        self.cells.push(Cell { center: origin, b_max, mass, dipole, quadrupole, start, end, first_child: 0, n_children: 0 });
        if end - start <= self.params.leaf_size || depth >= 48 {
            return id;
        }
        // Partition the range by octant with a counting pass.
        let octant = |p: &Vec3| -> usize {
            (p[0] >= center[0]) as usize | ((p[1] >= center[1]) as usize) << 1 | ((p[2] >= center[2]) as usize) << 2
        };
        let mut counts = [0usize; 8];
        for &i in &index[start..end] {
            counts[octant(&pos[i])] += 1;
        }
        let mut offsets = [0usize; 9];
        for o in 0..8 {
            offsets[o + 1] = offsets[o] + counts[o];
        }
        let mut sorted = vec![0usize; end - start];
        let mut fill = offsets;
        for &i in &index[start..end] {
            let o = octant(&pos[i]);
            sorted[fill[o]] = i;
            fill[o] += 1;
        }
        index[start..end].copy_from_slice(&sorted);
        let mut kids = Vec::new();
        for o in 0..8 {
            if counts[o] == 0 {
                continue;
            }
            let q = half * 0.5;
            let c = center
                + Vec3::new(
                    if o & 1 != 0 { q } else { -q },
                    if o & 2 != 0 { q } else { -q },
                    if o & 4 != 0 { q } else { -q },
                );
            let child = self.build_cell(pos, w, index, start + offsets[o], start + offsets[o + 1], c, q, depth + 1);
            kids.push(child);
        }
        let first = self.children.len();
        self.children.extend_from_slice(&kids);
        self.cells[id].first_child = first;
        self.cells[id].n_children = kids.len();
        id
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Tree approximation of [`field_direct`]. Cells containing the probe
    /// are always opened, so the excluded particle is always met in a leaf.
    pub fn field(&self, p: &RieszParams, probe: &Vec3, exclude: Option<usize>) -> Vec3 {
        let mut e = Vec3::zeros();
        if self.cells.is_empty() {
            return e;
        }
        let eps2 = p.eps * p.eps;
        let theta2 = self.params.theta * self.params.theta;
        let mut stack = Vec::with_capacity(64);
        stack.push(0usize);
        while let Some(c) = stack.pop() {
            let cell = &self.cells[c];
            let d = probe - cell.center;
            let r2 = d.norm_squared();
            // Accept when even the nearest member is b_max/θ away from the probe.
            let reach = cell.b_max * (1.0 + self.params.theta);
            if cell.n_children > 0 && reach * reach < theta2 * r2 {
                let s = r2 + eps2;
                match self.params.expansion {
                    Expansion::Monopole => e -= p.grad_from_r2(&d, s) * cell.mass,
                    Expansion::Dipole => {
                        let (g, h) = p.grad_hessian_from_r2(&d, s);
                        e -= g * cell.mass - h * cell.dipole;
                    }
                    Expansion::Quadrupole => {
                        let (g, h) = p.grad_hessian_from_r2(&d, s);
                        e -= g * cell.mass - h * cell.dipole + quadrupole_term(p, &d, s, &cell.quadrupole);
                    }
                }
            } else if cell.n_children == 0 {
                for j in cell.start..cell.end {
                    if Some(self.index[j]) == exclude {
                        continue;
                    }
                    let dd = probe - self.positions[j];
                    let s = dd.norm_squared() + eps2;
                    if s == 0.0 {
                        continue;
                    }
                    e -= p.grad_from_r2(&dd, s) * self.weights[j];
                }
            } else {
                stack.extend_from_slice(&self.children[cell.first_child..cell.first_child + cell.n_children]);
            }
        }
        e
    }
}

/// `½ Σⱼₖ ∂ⱼ∂ₖ∇w(d) Qⱼₖ` for a second moment `Q`.
#[inline]
fn quadrupole_term(p: &RieszParams, d: &Vec3, s: f64, q: &Mat3) -> Vec3 {
    let a = p.alpha;
    let p4 = s.powf(-0.5 * a - 2.0);
    let c1 = a * (a + 2.0) * p.lambda * p4;
    let c2 = a * (a + 2.0) * (a + 4.0) * p.lambda * p4 / s;
    let qd = q * d;
    (qd * 2.0 + d * q.trace()) * (0.5 * c1) - d * (0.5 * c2 * d.dot(&qd))
}

fn bounding_box(positions: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in positions {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    if positions.is_empty() {
        (Vec3::zeros(), Vec3::zeros())
    } else {
        (lo, hi)
    }
}

/// A snapshot prepared for repeated field evaluation.
pub struct FieldSource<'a> {
    pub params: RieszParams,
    pub positions: &'a [Vec3],
    pub weights: &'a [f64],
    tree: Option<Octree>,
}

impl<'a> FieldSource<'a> {
    pub fn new(params: RieszParams, positions: &'a [Vec3], weights: &'a [f64], method: FieldMethod) -> Self {
        let tree = match method {
            FieldMethod::Direct => None,
            FieldMethod::Tree(tp) => Some(Octree::build(positions, weights, tp)),
        };
        Self { params, positions, weights, tree }
    }

    pub fn field(&self, probe: &Vec3, exclude: Option<usize>) -> Vec3 {
        match &self.tree {
            Some(t) => t.field(&self.params, probe, exclude),
            None => field_fast(&self.params, self.positions, self.weights, probe, exclude),
        }
    }

    /// Field at every source particle with self-exclusion, in index order.
    pub fn at_nodes(&self) -> Vec<Vec3> {
        (0..self.positions.len()).into_par_iter().map(|i| self.field(&self.positions[i], Some(i))).collect()
    }

    pub fn at_points(&self, points: &[Vec3]) -> Vec<Vec3> {
        points.par_iter().map(|p| self.field(p, None)).collect()
    }
}

/// A probe location, optionally attached to a particle that is then excluded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub point: Vec3,
    pub node: Option<usize>,
}

/// Probe layout: a fixed random subset of particles plus a co-moving box grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbePlan {
    pub node_indices: Vec<usize>,
    pub grid_per_axis: usize,
    /// Reference centre and velocity box of the co-moving grid.
    pub center_x: Vec3,
    pub center_v: Vec3,
    pub v_lo: Vec3,
    pub v_hi: Vec3,
}

impl ProbePlan {
    pub fn new(
        n_particles: usize,
        max_node_probes: usize,
        grid_per_axis: usize,
        velocities: &[Vec3],
        weights: &[f64],
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut node_indices = if n_particles <= max_node_probes {
            (0..n_particles).collect::<Vec<_>>()
        } else {
            sample(&mut rng, n_particles, max_node_probes).into_vec()
        };
        node_indices.sort_unstable();
        let (v_lo, v_hi) = bounding_box(velocities);
        let m: f64 = weights.iter().sum();
        let center_v = if m > 0.0 {
            velocities.iter().zip(weights).map(|(v, w)| v * *w).sum::<Vec3>() / m
        } else {
            Vec3::zeros()
        };
        Self { node_indices, grid_per_axis, center_x: Vec3::zeros(), center_v, v_lo, v_hi }
    }

    pub fn with_center_x(mut self, c: Vec3) -> Self {
        self.center_x = c;
        self
    }

    /// Probes at time `t` for the given particle positions.
    pub fn probes(&self, t: f64, positions: &[Vec3]) -> Vec<Probe> {
        let mut out: Vec<Probe> = self.node_indices.iter().map(|&i| Probe { point: positions[i], node: Some(i) }).collect();
        let m = self.grid_per_axis;
        if m > 0 {
            let s = t.max(1.0);
            let lerp = |k: usize, a: f64, b: f64| if m == 1 { 0.5 * (a + b) } else { a + (b - a) * k as f64 / (m - 1) as f64 };
            for i in 0..m {
                for j in 0..m {
                    for k in 0..m {
                        let u = Vec3::new(
                            lerp(i, self.v_lo[0], self.v_hi[0]),
                            lerp(j, self.v_lo[1], self.v_hi[1]),
                            lerp(k, self.v_lo[2], self.v_hi[2]),
                        );
                        out.push(Probe { point: self.center_x + u * s, node: None });
                    }
                }
            }
        }
        out
    }
}

/// Probe-set maxima of `|E|`, `‖∇E‖₂` and `max |∂²E|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupNorms {
    pub sup_e: f64,
    pub sup_grad_e: f64,
    pub sup_hess_e: f64,
    pub n_probes: usize,
}

/// Spectral norm of a 3×3 matrix.
pub fn operator_norm(m: &Mat3) -> f64 {
    m.singular_values().max()
}

pub fn sup_field_norms(p: &RieszParams, positions: &[Vec3], weights: &[f64], probes: &[Probe], t: f64, h: f64) -> SupNorms {
    let per: Vec<(f64, f64, f64)> = probes
        .par_iter()
        .map(|pr| {
            let s = sample_field(p, positions, weights, t, &pr.point, pr.node, h);
            (s.e.norm(), operator_norm(&s.grad_e), max_abs_rank3(&s.hess_e))
        })
        .collect();
    let mut out = SupNorms { sup_e: 0.0, sup_grad_e: 0.0, sup_hess_e: 0.0, n_probes: probes.len() };
    for (a, b, c) in per {
        out.sup_e = out.sup_e.max(a);
        out.sup_grad_e = out.sup_grad_e.max(b);
        out.sup_hess_e = out.sup_hess_e.max(c);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn kp(alpha: f64, eps: f64) -> RieszParams {
        RieszParams::new(alpha, 1.0, eps).unwrap()
    }

    fn random_ensemble(n: usize, seed: u64) -> (Vec<Vec3>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos = (0..n)
            .map(|_| {
                Vec3::new(
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                )
            })
            .collect();
        let w = (0..n).map(|_| rng.random_range(0.5..1.5) / n as f64).collect();
        (pos, w)
    }

    #[test]
    fn single_node_and_symmetric_pair() {
        let p = kp(0.75, 0.0);
        let e = field_direct(&p, &[Vec3::zeros()], &[1.0], &Vec3::x(), None).unwrap();
        assert_relative_eq!(e, Vec3::new(0.75, 0.0, 0.0), epsilon = 1e-15);
        let e = field_direct(&p, &[Vec3::x(), -Vec3::x()], &[1.0, 1.0], &Vec3::zeros(), None).unwrap();
        assert_eq!(e, Vec3::zeros());
        assert!(field_direct(&p, &[Vec3::zeros()], &[1.0], &Vec3::zeros(), None).is_err());
        assert_eq!(field_direct(&p, &[Vec3::zeros()], &[1.0], &Vec3::zeros(), Some(0)).unwrap(), Vec3::zeros());
    }

    #[test]
    fn internal_forces_balance() {
        let (pos, w) = random_ensemble(100, 3);
        let p = kp(0.75, 0.0);
        let mut total = Vec3::zeros();
        let mut scale = 0.0;
        for i in 0..pos.len() {
            let e = field_direct(&p, &pos, &w, &pos[i], Some(i)).unwrap();
            total += e * w[i];
            scale += w[i] * e.norm();
        }
        assert!(total.norm() <= 1e-12 * scale, "{} vs {}", total.norm(), scale);
    }

    #[test]
    fn gradient_single_node_coulomb() {
        let p = kp(1.0, 0.0);
        let g = field_gradient(&p, &[Vec3::zeros()], &[0.5], &Vec3::x(), None).unwrap();
        assert_relative_eq!(g, -Mat3::from_diagonal(&Vec3::new(2.0, -1.0, -1.0)) * 0.5, epsilon = 1e-15);
        assert_eq!(field_gradient(&p, &[], &[], &Vec3::x(), None).unwrap(), Mat3::zeros());
    }

    #[test]
    fn gradient_matches_fd_of_field() {
        let (pos, w) = random_ensemble(50, 4);
        let p = kp(0.75, 0.2);
        let probe = Vec3::new(0.3, -0.4, 1.1);
        let g = field_gradient(&p, &pos, &w, &probe, None).unwrap();
        let h = 1e-5;
        for k in 0..3 {
            let mut d = Vec3::zeros();
            d[k] = h;
            let fd = (field_direct(&p, &pos, &w, &(probe + d), None).unwrap()
                - field_direct(&p, &pos, &w, &(probe - d), None).unwrap())
                / (2.0 * h);
            for i in 0..3 {
                assert!((fd[i] - g[(i, k)]).abs() <= 1e-6 * g.amax(), "{i}{k}");
            }
        }
    }

    /// Third derivative of the softened kernel, written out by hand:
    /// `∂ₖ∂ᵢ∂ⱼ w = a(a+2)λ (δᵢₖxⱼ + xᵢδⱼₖ + δᵢⱼxₖ) s^{-(a+4)/2} - a(a+2)(a+4)λ xᵢxⱼxₖ s^{-(a+6)/2}`.
    fn third_derivative(alpha: f64, lambda: f64, eps: f64, x: &Vec3) -> Rank3 {
        let s = x.norm_squared() + eps * eps;
        let a = alpha;
        let c1 = a * (a + 2.0) * lambda * s.powf(-(a + 4.0) / 2.0);
        let c2 = a * (a + 2.0) * (a + 4.0) * lambda * s.powf(-(a + 6.0) / 2.0);
        let d = |i: usize, j: usize| if i == j { 1.0 } else { 0.0 };
        let mut out = [Mat3::zeros(); 3];
        for (k, m) in out.iter_mut().enumerate() {
            for i in 0..3 {
                for j in 0..3 {
                    m[(i, j)] = c1 * (d(i, k) * x[j] + x[i] * d(j, k) + d(i, j) * x[k]) - c2 * x[i] * x[j] * x[k];
                }
            }
        }
        out
    }

    #[test]
    fn hessian_fd_matches_symbolic_third_derivative() {
        let p = kp(0.75, 0.3);
        let probe = Vec3::new(0.9, -0.4, 0.6);
        let fd = field_hessian_fd(&p, &[Vec3::zeros()], &[1.0], &probe, None, 1e-3).unwrap();
        let exact = third_derivative(0.75, 1.0, 0.3, &probe);
        for k in 0..3 {
            assert_relative_eq!(fd[k], -exact[k], epsilon = 1e-5 * exact[k].amax());
        }
        let zero = field_hessian_fd(&p, &[], &[], &probe, None, 1e-3).unwrap();
        assert!(zero.iter().all(|m| *m == Mat3::zeros()));
        assert!(field_hessian_fd(&p, &[], &[], &probe, None, 0.0).is_err());
    }

    #[test]
    fn hessian_fd_symmetry_defect() {
        let (pos, w) = random_ensemble(60, 5);
        let p = kp(0.75, 0.25);
        let probe = Vec3::new(0.2, 0.5, -0.3);
        let t = field_hessian_fd(&p, &pos, &w, &probe, None, 1e-3).unwrap();
        let scale = max_abs_rank3(&t);
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    // ∂ₖ(∇E)ᵢⱼ is symmetric under any permutation of (i, j, k)
                    assert!((t[k][(i, j)] - t[j][(i, k)]).abs() <= 1e-4 * scale);
                    assert!((t[k][(i, j)] - t[k][(j, i)]).abs() <= 1e-4 * scale);
                }
            }
        }
    }

    #[test]
    fn linearity_under_concatenation() {
        let (a, wa) = random_ensemble(40, 6);
        let (b, wb) = random_ensemble(30, 7);
        let p = kp(0.5, 0.1);
        let probe = Vec3::new(0.1, 0.2, 0.3);
        let ea = field_direct(&p, &a, &wa, &probe, None).unwrap();
        let eb = field_direct(&p, &b, &wb, &probe, None).unwrap();
        let all: Vec<Vec3> = a.iter().chain(&b).copied().collect();
        let wall: Vec<f64> = wa.iter().chain(&wb).copied().collect();
        let e = field_direct(&p, &all, &wall, &probe, None).unwrap();
        assert!((e - ea - eb).norm() <= 1e-12 * e.norm());
    }

    #[test]
    fn tree_with_zero_theta_is_direct() {
        let (pos, w) = random_ensemble(500, 8);
        let p = kp(0.75, 0.05);
        let tree = Octree::build(&pos, &w, TreeParams { theta: 0.0, ..Default::default() });
        for i in (0..500).step_by(37) {
            let d = field_direct(&p, &pos, &w, &pos[i], Some(i)).unwrap();
            let t = tree.field(&p, &pos[i], Some(i));
            assert!((d - t).norm() <= 1e-14 * d.norm());
        }
        let one = Octree::build(&pos[..1], &w[..1], TreeParams::default());
        let probe = Vec3::new(2.0, 0.0, 0.0);
        assert_eq!(one.field(&p, &probe, None), field_fast(&p, &pos[..1], &w[..1], &probe, None));
    }

    /// Largest tree error over the probes, relative to the largest field
    /// magnitude among them.
    fn tree_error(pos: &[Vec3], w: &[f64], theta: f64, probes: &[usize]) -> f64 {
        let p = kp(0.75, 0.05);
        let tree = Octree::build(pos, w, TreeParams { theta, ..Default::default() });
        let mut err = 0.0f64;
        let mut scale = 0.0f64;
        for &i in probes {
            let d = field_fast(&p, pos, w, &pos[i], Some(i));
            err = err.max((tree.field(&p, &pos[i], Some(i)) - d).norm());
            scale = scale.max(d.norm());
        }
        err / scale
    }

    #[test]
    fn tree_accuracy_and_monotone_in_theta() {
        let (pos, w) = random_ensemble(20_000, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let probes = sample(&mut rng, pos.len(), 100).into_vec();
        let errs: Vec<f64> = [0.9, 0.7, 0.5, 0.3].iter().map(|&th| tree_error(&pos, &w, th, &probes)).collect();
        assert!(errs[2] <= 1e-3, "{errs:?}");
        assert!(errs.windows(2).all(|e| e[1] < e[0]), "{errs:?}");
    }

    #[test]
    fn sup_norms_zero_and_monotone() {
        let p = kp(0.75, 0.1);
        let (pos, _) = random_ensemble(30, 11);
        let zero_w = vec![0.0; 30];
        let probes: Vec<Probe> = pos.iter().map(|x| Probe { point: *x, node: None }).collect();
        let s = sup_field_norms(&p, &pos, &zero_w, &probes, 0.0, 1e-3);
        assert_eq!((s.sup_e, s.sup_grad_e, s.sup_hess_e), (0.0, 0.0, 0.0));
        let w = vec![1.0 / 30.0; 30];
        let a = sup_field_norms(&p, &pos, &w, &probes[..10], 0.0, 1e-3);
        let b = sup_field_norms(&p, &pos, &w, &probes, 0.0, 1e-3);
        assert!(b.sup_e >= a.sup_e && b.sup_grad_e >= a.sup_grad_e && b.sup_hess_e >= a.sup_hess_e);
        assert!(a.sup_e > 0.0 && a.sup_e.is_finite());
    }

    #[test]
    fn probe_plan_is_deterministic() {
        let (pos, w) = random_ensemble(2000, 12);
        let a = ProbePlan::new(2000, 100, 3, &pos, &w, 7);
        let b = ProbePlan::new(2000, 100, 3, &pos, &w, 7);
        assert_eq!(a, b);
        assert_eq!(a.probes(5.0, &pos).len(), 100 + 27);
        assert!(a.node_indices.windows(2).all(|x| x[0] < x[1]));
    }
}
