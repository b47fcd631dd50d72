//! Input-space loss curvature.
//!
//! Everything here works on an [`InputObjective`]: a per-sample loss `l(x)`
//! with its input gradient, the feature map used to define stability, and
//! the logits that bound loss changes. A trained model with a fixed label is
//! one objective; [`QuadraticHook`] is another whose Hessian is known exactly.

use serde::{Deserialize, Serialize};

use crate::diffcore::{log_sum_exp, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::{derive_seed, NoiseStream};

/// Largest input dimension accepted by [`exact_hessian`].
pub const HESSIAN_DIM_CAP: usize = 64;

pub trait InputObjective {
    fn input_dim(&self) -> usize;
    fn loss(&self, x: &[f64]) -> Result<f64>;
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>>;
    fn features(&self, x: &[f64]) -> Result<Vec<f64>>;
    fn logits(&self, x: &[f64]) -> Result<Vec<f64>>;
    /// `max_j ‖W_j‖` of the head acting on the features.
    fn head_norm(&self) -> f64;
}

/// Softmax loss of `model` for a fixed label.
#[derive(Clone, Copy, Debug)]
pub struct LabelledModel<'a> {
    pub model: &'a Model,
    pub label: usize,
}

impl<'a> LabelledModel<'a> {
    pub fn new(model: &'a Model, label: usize) -> Result<Self> {
        if label >= model.class_count() {
            return Err(Error::LabelOutOfRange {
                label,
                classes: model.class_count(),
            });
        }
        Ok(Self { model, label })
    }
}

impl InputObjective for LabelledModel<'_> {
    fn input_dim(&self) -> usize {
        self.model.input_dim()
    }

    fn loss(&self, x: &[f64]) -> Result<f64> {
        let z = self.model.logits_of_input(x)?;
        Ok(log_sum_exp(&z) - z[self.label])
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input of length {} for model expecting {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut tape = Tape::new();
        let vars = self.model.register_frozen(&mut tape);
        let xv = tape.leaf(Tensor::vector(x.to_vec()));
        let q = vars.features(&mut tape, xv)?;
        let z = vars.logits(&mut tape, q)?;
        let l = tape.softmax_nll(z, vec![self.label])?;
        Ok(tape.backward(l)?.wrt(xv).into_data())
    }

    fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.model.features(x)
    }

    fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.model.logits_of_input(x)
    }

    fn head_norm(&self) -> f64 {
        self.model.head.max_row_norm()
    }
}

/// Exactly quadratic loss `l0 + gᵀe + ½ eᵀHe` with `e = x − center`,
/// identity features, and logits `W x` where `W` stacks the rows `±c·e_i`.
///
/// With `c` large enough every loss change is at most twice the largest
/// logit change, which is the only model property the curvature bounds use.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticHook {
    pub center: Vec<f64>,
    pub l0: f64,
    pub g: Vec<f64>,
    /// Row-major symmetric `n × n` matrix.
    pub h: Vec<f64>,
    pub head_scale: f64,
}

impl QuadraticHook {
    pub fn new(center: Vec<f64>, l0: f64, g: Vec<f64>, h: Vec<f64>, head_scale: f64) -> Result<Self> {
        let n = center.len();
        if n == 0 || g.len() != n || h.len() != n * n {
            return Err(Error::Dimension(format!(
                "quadratic hook with center {}, gradient {}, hessian {}",
                n,
                g.len(),
                h.len()
            )));
        }
        Ok(Self {
            center,
            l0,
            g,
            h,
            head_scale,
        })
    }

    /// `½ xᵀAx` around the origin.
    pub fn pure(a: Vec<f64>, n: usize) -> Result<Self> {
        Self::new(vec![0.0; n], 0.0, vec![0.0; n], a, 1.0)
    }

    /// Smallest head scale `c` for which `|Δl| ≤ 2 max_i |Δz_i|` holds for
    /// every perturbation of norm at most `radius`.
    pub fn sufficient_head_scale(&self, radius: f64) -> f64 {
        let n = self.center.len() as f64;
        let gnorm = self.g.iter().map(|v| v * v).sum::<f64>().sqrt();
        n.sqrt() * (gnorm + 0.5 * spectral_norm(&self.h, self.center.len()) * radius) / 2.0
    }

    fn offset(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.center.len() {
            return Err(Error::Dimension(format!(
                "input of length {} for hook of dimension {}",
                x.len(),
                self.center.len()
            )));
        }
        Ok(x.iter().zip(&self.center).map(|(a, b)| a - b).collect())
    }
}

impl InputObjective for QuadraticHook {
    fn input_dim(&self) -> usize {
        self.center.len()
    }

    fn loss(&self, x: &[f64]) -> Result<f64> {
        let e = self.offset(x)?;
        let he = mat_vec(&self.h, &e);
        Ok(self.l0 + dot(&self.g, &e) + 0.5 * dot(&e, &he))
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let e = self.offset(x)?;
        Ok(mat_vec(&self.h, &e).iter().zip(&self.g).map(|(a, b)| a + b).collect())
    }

    fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.offset(x)?;
        Ok(x.to_vec())
    }

    fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.offset(x)?;
        Ok(x.iter()
            .flat_map(|&v| [self.head_scale * v, -self.head_scale * v])
            .collect())
    }

    fn head_norm(&self) -> f64 {
        self.head_scale.abs()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mat_vec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..m.len() / n).map(|i| dot(&m[i * n..(i + 1) * n], v)).collect()
}

fn diff_norm_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_step(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::InvalidArgument(format!("step must be positive, got {t}")));
    }
    Ok(())
}

fn finite(v: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

pub fn input_gradient(obj: &impl InputObjective, x: &[f64]) -> Result<Vec<f64>> {
    finite(obj.gradient(x)?, "input gradient")
}

/// Forward-difference Hessian-vector product `(∇l(x + t v) − ∇l(x)) / t`.
pub fn hvp(obj: &impl InputObjective, x: &[f64], v: &[f64], t: f64) -> Result<Vec<f64>> {
    check_step(t)?;
    if v.len() != x.len() {
        return Err(Error::Dimension(format!("direction of length {} at point of length {}", v.len(), x.len())));
    }
    let g0 = obj.gradient(x)?;
    let shifted: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + t * b).collect();
    let g1 = obj.gradient(&shifted)?;
    finite(g1.iter().zip(&g0).map(|(a, b)| (a - b) / t).collect(), "hessian-vector product")
}

/// Per-draw terms `‖∇l(x + tε_j) − ∇l(x)‖² / t²` with `ε_j ~ N(0, I)` drawn
/// from `rng`.
pub fn curvature_samples(
    obj: &impl InputObjective,
    x: &[f64],
    t: f64,
    k: usize,
    rng: &mut NoiseStream,
) -> Result<Vec<f64>> {
    check_step(t)?;
    if k == 0 {
        return Err(Error::InvalidArgument("curvature estimate needs at least one draw".into()));
    }
    let g0 = obj.gradient(x)?;
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let shifted: Vec<f64> = x.iter().map(|a| a + t * rng.normal()).collect();
        let g1 = obj.gradient(&shifted)?;
        let v = diff_norm_sq(&g1, &g0) / (t * t);
        if !v.is_finite() {
            return Err(Error::NonFinite("curvature draw".into()));
        }
        out.push(v);
    }
    Ok(out)
}

/// `Λ(x) = (1/K) Σ_j ‖∇l(x + tε_j) − ∇l(x)‖² / t²`.
pub fn curvature_estimate(obj: &impl InputObjective, x: &[f64], t: f64, k: usize, rng: &mut NoiseStream) -> Result<f64> {
    let s = curvature_samples(obj, x, t, k, rng)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Dense symmetric Hessian from central-difference gradient columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Hessian {
    pub n: usize,
    /// Row-major, symmetrised.
    pub data: Vec<f64>,
    /// `‖H − Hᵀ‖_F / ‖H‖_F` before symmetrisation (0 for a zero matrix).
    pub symmetry_defect: f64,
}

pub fn exact_hessian(obj: &impl InputObjective, x: &[f64], step: f64) -> Result<Hessian> {
    check_step(step)?;
    let n = obj.input_dim();
    if n > HESSIAN_DIM_CAP {
        return Err(Error::InvalidArgument(format!(
            "exact Hessian limited to {HESSIAN_DIM_CAP} input dimensions, got {n}"
        )));
    }
    if x.len() != n {
        return Err(Error::Dimension(format!("point of length {} for input dimension {}", x.len(), n)));
    }
    let mut cols = vec![0.0; n * n];
    let mut probe = x.to_vec();
    for j in 0..n {
        probe[j] = x[j] + step;
        let up = obj.gradient(&probe)?;
        probe[j] = x[j] - step;
        let down = obj.gradient(&probe)?;
        probe[j] = x[j];
        for i in 0..n {
            cols[i * n + j] = (up[i] - down[i]) / (2.0 * step);
        }
    }
    let mut asym = 0.0;
    let mut total = 0.0;
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (cols[i * n + j], cols[j * n + i]);
            asym += (a - b) * (a - b);
            total += a * a;
            data[i * n + j] = 0.5 * (a + b);
        }
    }
    let data = finite(data, "hessian")?;
    let symmetry_defect = if total > 0.0 { (asym / total).sqrt() } else { 0.0 };
    Ok(Hessian {
        n,
        data,
        symmetry_defect,
    })
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn jacobi_eigenvalues(m: &[f64], n: usize) -> Result<Vec<f64>> {
    if m.len() != n * n {
        return Err(Error::Dimension(format!("{} entries for a {n}x{n} matrix", m.len())));
    }
    let scale = m.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[i * n + j] - m[j * n + i]).abs() > 1e-8 * scale {
                return Err(Error::InvalidArgument(format!(
                    "matrix is not symmetric at ({i}, {j}): {} vs {}",
                    m[i * n + j],
                    m[j * n + i]
                )));
            }
        }
    }
    let mut a = m.to_vec();
    let off = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i * n + j] * a[i * n + j];
                }
            }
        }
        s.sqrt()
    };
    for _sweep in 0..100 {
        if off(&a) <= 1e-12 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}

/// Largest absolute eigenvalue of a symmetric matrix.
pub fn spectral_norm(m: &[f64], n: usize) -> f64 {
    jacobi_eigenvalues(m, n)
        .map(|e| e.iter().fold(0.0f64, |s, v| s.max(v.abs())))
        .unwrap_or(f64::NAN)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigSums {
    pub sum_sq: f64,
    pub sum_abs: f64,
    pub trace: f64,
}

/// `(Σλᵢ², Σ|λᵢ|, Σλᵢ)` of a symmetric matrix.
pub fn eig_sums(m: &[f64], n: usize) -> Result<EigSums> {
    let eig = jacobi_eigenvalues(m, n)?;
    Ok(EigSums {
        sum_sq: eig.iter().map(|v| v * v).sum(),
        sum_abs: eig.iter().map(|v| v.abs()).sum(),
        trace: eig.iter().sum(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityEstimate {
    /// Fraction of draws whose feature stays within `delta` of the clean feature.
    pub eta: f64,
    /// Mean loss over the draws that leave the ball; `None` when none do.
    pub l_out: Option<f64>,
    /// Largest absolute logit over the draws and the clean input.
    pub k_max: f64,
    pub n_samples: usize,
    pub sigma: f64,
    pub delta: f64,
}

/// Monte-Carlo stability of `x` under `N(0, σ²I)` perturbations; draw `j`
/// uses the stream `(seed, j)`.
pub fn stability_estimates(
    obj: &impl InputObjective,
    x: &[f64],
    sigma: f64,
    delta: f64,
    n: usize,
    seed: u64,
) -> Result<StabilityEstimate> {
    if n == 0 {
        return Err(Error::InvalidArgument("stability needs at least one draw".into()));
    }
    if !(sigma >= 0.0) || !(delta >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma {sigma} and delta {delta} must be >= 0")));
    }
    let q0 = obj.features(x)?;
    let mut k_max = obj.logits(x)?.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    let (mut inside, mut out_sum, mut out_n) = (0usize, 0.0, 0usize);
    for j in 0..n {
        let mut rng = NoiseStream::keyed(seed, j as u64);
        let xp: Vec<f64> = x.iter().map(|a| a + sigma * rng.normal()).collect();
        let q = obj.features(&xp)?;
        k_max = obj.logits(&xp)?.iter().fold(k_max, |s, v| s.max(v.abs()));
        if diff_norm_sq(&q, &q0).sqrt() <= delta {
            inside += 1;
        } else {
            out_sum += obj.loss(&xp)?;
            out_n += 1;
        }
    }
    Ok(StabilityEstimate {
        eta: inside as f64 / n as f64,
        l_out: (out_n > 0).then(|| out_sum / out_n as f64),
        k_max,
        n_samples: n,
        sigma,
        delta,
    })
}

/// Parameters of a curvature check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureParams {
    pub sigma: f64,
    pub delta: f64,
    /// Monte-Carlo draws for η and `l_out`.
    pub n: usize,
    /// Finite-difference step of the estimator.
    pub t: f64,
    /// Estimator draws.
    pub k: usize,
    /// Central-difference step of the exact Hessian.
    pub hessian_step: f64,
    pub seed: u64,
}

impl Default for CurvatureParams {
    fn default() -> Self {
        Self {
            sigma: 0.06,
            delta: 0.1,
            n: 500,
            t: 1e-2,
            k: 20,
            hessian_step: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureReport {
    pub lambda_estimate: f64,
    pub sum_sq_eigs: f64,
    pub sum_abs_eigs: f64,
    pub trace: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub eta: f64,
    pub l_out: Option<f64>,
    pub k_max: f64,
    pub head_norm: f64,
    pub sigma: f64,
    pub delta: f64,
    /// Upper bound on `Σλᵢ²`.
    pub upper_rhs: f64,
    /// Lower bound on `2Σλᵢ² + (Σ|λᵢ|)²`.
    pub lower_rhs: f64,
    pub lower_lhs: f64,
    pub upper_holds: bool,
    pub lower_holds: bool,
    pub n_samples: usize,
    pub estimator_draws: usize,
    pub seed: u64,
}

/// Evaluates both curvature bounds at `x` against the exact Hessian.
pub fn theorem1_check(obj: &impl InputObjective, x: &[f64], p: &CurvatureParams) -> Result<CurvatureReport> {
    if !(p.sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {}", p.sigma)));
    }
    let hess = exact_hessian(obj, x, p.hessian_step)?;
    let sums = eig_sums(&hess.data, hess.n)?;
    let loss = obj.loss(x)?;
    let grad = input_gradient(obj, x)?;
    let grad_norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    let st = stability_estimates(obj, x, p.sigma, p.delta, p.n, derive_seed(p.seed, 1))?;
    let lambda_estimate = curvature_estimate(obj, x, p.t, p.k, &mut NoiseStream::keyed(derive_seed(p.seed, 2), 0))?;
    let head_norm = obj.head_norm();
    let s4 = p.sigma.powi(4);
    let eta = st.eta;
    let upper_rhs = (8.0 / s4) * (eta * head_norm * head_norm * p.delta * p.delta + 4.0 * (1.0 - eta) * st.k_max * st.k_max);
    let out_term = match st.l_out {
        Some(lo) => (1.0 - eta) * (lo - loss) * (lo - loss),
        None => 0.0,
    };
    let lower_rhs = (4.0 / s4) * (out_term - p.sigma * p.sigma * grad_norm * grad_norm);
    let lower_lhs = 2.0 * sums.sum_sq + sums.sum_abs * sums.sum_abs;
    Ok(CurvatureReport {
        lambda_estimate,
        sum_sq_eigs: sums.sum_sq,
        sum_abs_eigs: sums.sum_abs,
        trace: sums.trace,
        loss,
        grad_norm,
        eta,
        l_out: st.l_out,
        k_max: st.k_max,
        head_norm,
        sigma: p.sigma,
        delta: p.delta,
        upper_rhs,
        lower_rhs,
        lower_lhs,
        upper_holds: sums.sum_sq <= upper_rhs,
        lower_holds: lower_lhs >= lower_rhs,
        n_samples: p.n,
        estimator_draws: p.k,
        seed: p.seed,
    })
}

/// Sample means of `(εᵀHε)²` and of each coordinate of `ε·εᵀHε` for
/// `ε ~ N(0, σ²I)`, with their standard errors.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticFormMoments {
    pub fourth_mean: f64,
    pub fourth_std_err: f64,
    pub cross_mean: Vec<f64>,
    pub cross_std_err: Vec<f64>,
}

pub fn quadratic_form_moments(h: &[f64], n: usize, sigma: f64, draws: usize, seed: u64) -> Result<QuadraticFormMoments> {
    if h.len() != n * n || draws < 2 {
        return Err(Error::InvalidArgument(format!("{} entries for n = {n} with {draws} draws", h.len())));
    }
    let mut rng = NoiseStream::keyed(seed, 0);
    let (mut s4, mut s4sq) = (0.0, 0.0);
    let mut cs = vec![0.0; n];
    let mut csq = vec![0.0; n];
    for _ in 0..draws {
        let e: Vec<f64> = (0..n).map(|_| sigma * rng.normal()).collect();
        let quad = dot(&e, &mat_vec(h, &e));
        let f = quad * quad;
        s4 += f;
        s4sq += f * f;
        for i in 0..n {
            let v = e[i] * quad;
            cs[i] += v;
            csq[i] += v * v;
        }
    }
    let m = draws as f64;
    let se = |s: f64, sq: f64| ((sq / m - (s / m).powi(2)).max(0.0) * m / (m - 1.0) / m).sqrt();
    Ok(QuadraticFormMoments {
        fourth_mean: s4 / m,
        fourth_std_err: se(s4, s4sq),
        cross_mean: cs.iter().map(|s| s / m).collect(),
        cross_std_err: cs.iter().zip(&csq).map(|(s, sq)| se(*s, *sq)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_and_identity_eig_sums() {
        let s = eig_sums(&[3.0, 0.0, 0.0, -4.0], 2).unwrap();
        assert_eq!((s.sum_sq, s.sum_abs, s.trace), (25.0, 7.0, -1.0));
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        let s = eig_sums(&eye, 4).unwrap();
        assert_eq!((s.sum_sq, s.sum_abs, s.trace), (4.0, 4.0, 4.0));
        assert!(eig_sums(&[1.0, 2.0, 0.0, 1.0], 2).is_err());
    }

    #[test]
    fn jacobi_two_by_two() {
        let e = jacobi_eigenvalues(&[2.0, 1.0, 1.0, 2.0], 2).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-14 && (e[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn quadratic_hook_hvp_is_exact() {
        let hook = QuadraticHook::pure(vec![1.0, 0.5, 0.5, 2.0], 2).unwrap();
        let x = [0.3, -0.7];
        for t in [1e-3, 1.0, 10.0] {
            let hv = hvp(&hook, &x, &[1.0, 1.0], t).unwrap();
            assert!((hv[0] - 1.5).abs() < 1e-12 && (hv[1] - 2.5).abs() < 1e-12);
        }
        assert_eq!(hvp(&hook, &x, &[0.0, 0.0], 0.1).unwrap(), vec![0.0, 0.0]);
        assert!(hvp(&hook, &x, &[1.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn zero_curvature_is_exactly_zero() {
        let hook = QuadraticHook::pure(vec![0.0; 9], 3).unwrap();
        let v = curvature_estimate(&hook, &[1.0, 2.0, 3.0], 1e-2, 50, &mut NoiseStream::keyed(1, 0)).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn hessian_cap_enforced() {
        let n = HESSIAN_DIM_CAP + 1;
        let hook = QuadraticHook::pure(vec![0.0; n * n], n).unwrap();
        assert!(exact_hessian(&hook, &vec![0.0; n], 1e-4).is_err());
    }

    #[test]
    fn tiny_sigma_keeps_features_inside() {
        let hook = QuadraticHook::pure(vec![1.0, 0.0, 0.0, 1.0], 2).unwrap();
        let st = stability_estimates(&hook, &[0.5, 0.5], 1e-9, 1e-3, 50, 3).unwrap();
        assert_eq!(st.eta, 1.0);
        assert!(st.l_out.is_none());
        let st = stability_estimates(&hook, &[0.5, 0.5], 0.1, 0.0, 50, 3).unwrap();
        assert_eq!(st.eta, 0.0);
        assert!(st.l_out.is_some());
    }
}
