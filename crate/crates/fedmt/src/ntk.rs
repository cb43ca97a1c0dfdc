//! Block kernel matrix of the corrected losses at initialization, extreme
//! eigenvalues, the geometric convergence envelope, and the two corollary
//! sweeps (partition coarseness and noise level).
//!
//! The kernel is assembled from analytic Jacobians of g = softmax(forward).
//! For the one-hidden-layer network, the gradient of g_l(x) with respect to
//! the hidden weights factorizes as x ⊗ c_l(x) with
//! c_l(x)[m] = (1/sqrt(M)) 1(u_m.x > 0) g_l (a_lm - sum_k g_k a_km),
//! so every Jacobian inner product is (x1.x2) * (c(x1) c(x2)^T)_{lm}.
//! Columns belonging to class m of a client sample carry the prefactor
//! sum_j Q^+(m, j); columns of a server sample carry sum_k T^{-1}(k, m).
//! These are the same per-class weights the weighted quadratic loss uses,
//! so the kernel and the loss cannot drift apart.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::datagen::FederatedDataset;
use crate::error::{Error, Result};
use crate::losses::{mse_class_weights, softmax_rows, LabeledBatch};
use crate::model::TwoLayerReluNet;
use crate::projection::{
    build_hierarchical_q, build_symmetric_noise_t, LabelSpaceSpec, MatrixRole, ProjectionMatrix,
};

/// Largest permitted matrix side for dense assembly.
pub const DEFAULT_SIDE_CAP: usize = 5000;

/// Dense kernel matrix with class-major block layout: row index
/// l * total + s for class l and sample s, samples ordered clients first,
/// then servers, each pool in storage order.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    matrix: DMatrix<f64>,
    k: usize,
    total: usize,
}

impl GramMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn side(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn samples(&self) -> usize {
        self.total
    }

    /// The (l, m) class block, a total x total matrix.
    pub fn block(&self, l: usize, m: usize) -> DMatrix<f64> {
        self.matrix
            .view((l * self.total, m * self.total), (self.total, self.total))
            .into_owned()
    }

    /// Frobenius norm of G - G^T. Nonzero whenever per-class column
    /// prefactors differ, which is why eigenvalues are taken on the
    /// symmetrized matrix.
    pub fn asymmetry_norm(&self) -> f64 {
        (&self.matrix - self.matrix.transpose()).norm()
    }

    /// (G + G^T) / 2.
    pub fn symmetrized(&self) -> DMatrix<f64> {
        (&self.matrix + self.matrix.transpose()) * 0.5
    }
}

/// Per-sample factor matrix: row l holds c_l(x) as defined in the module
/// docs. The Jacobian of g_l at x is x ⊗ (row l).
fn factor_matrix(net: &TwoLayerReluNet, x_row: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (_, m_width, k) = net.dims();
    let scale = 1.0 / (m_width as f64).sqrt();
    let pre = x_row * net.hidden_weights();
    let logits = net.forward(x_row)?;
    let g = softmax_rows(&logits);
    let a = net.output_signs();
    // abar[m] = sum_k g_k a_km
    let abar = &g * a;
    let mut c = DMatrix::zeros(k, m_width);
    for l in 0..k {
        for mm in 0..m_width {
            if pre[(0, mm)] > 0.0 {
                c[(l, mm)] = scale * g[(0, l)] * (a[(l, mm)] - abar[(0, mm)]);
            }
        }
    }
    Ok(c)
}

fn gather_pools(dataset: &FederatedDataset) -> Vec<(&LabeledBatch, bool)> {
    let mut pools: Vec<(&LabeledBatch, bool)> =
        dataset.client_sets.iter().map(|b| (b, false)).collect();
    pools.extend(dataset.server_sets.iter().map(|b| (b, true)));
    pools
}

/// Assembles the dense kernel at the net's current parameters over every
/// participant sample, with per-class column prefactors from q (client
/// samples) and t (server samples).
pub fn build_gram(
    net: &TwoLayerReluNet,
    dataset: &FederatedDataset,
    q: &ProjectionMatrix,
    t: &ProjectionMatrix,
) -> Result<GramMatrix> {
    build_gram_with_cap(net, dataset, q, t, DEFAULT_SIDE_CAP)
}

/// [`build_gram`] with an explicit side cap.
pub fn build_gram_with_cap(
    net: &TwoLayerReluNet,
    dataset: &FederatedDataset,
    q: &ProjectionMatrix,
    t: &ProjectionMatrix,
    cap: usize,
) -> Result<GramMatrix> {
    let (d, _, k) = net.dims();
    if q.role() != MatrixRole::LabelSpaceMap || t.role() != MatrixRole::NoiseMap {
        return Err(Error::ConfigInvalid(
            "kernel assembly needs a label-space map and a noise map, in that order".into(),
        ));
    }
    if q.cols() != k || t.cols() != k {
        return Err(Error::ShapeMismatch(format!(
            "projections cover {} / {} classes but the net has {k} outputs",
            q.cols(),
            t.cols()
        )));
    }
    let pools = gather_pools(dataset);
    let total: usize = pools.iter().map(|(b, _)| b.len()).sum();
    let side = k * total;
    if side > cap {
        return Err(Error::TooLarge(format!("kernel side {side} exceeds cap {cap}")));
    }
    let wq = mse_class_weights(q);
    let wt = mse_class_weights(t);

    // Flatten samples; remember each sample's column weights.
    let mut xs: Vec<DMatrix<f64>> = Vec::with_capacity(total);
    let mut col_w: Vec<&[f64]> = Vec::with_capacity(total);
    for (batch, is_server) in &pools {
        if batch.dim() != d {
            return Err(Error::ShapeMismatch(format!(
                "pool has {}-dimensional inputs, net expects {d}",
                batch.dim()
            )));
        }
        for i in 0..batch.len() {
            let row = batch.inputs().row(i);
            xs.push(DMatrix::from_fn(1, d, |_, c| row[c]));
            col_w.push(if *is_server { &wt } else { &wq });
        }
    }
    let factors: Vec<DMatrix<f64>> =
        xs.iter().map(|x| factor_matrix(net, x)).collect::<Result<_>>()?;

    let mut g = DMatrix::zeros(side, side);
    for s1 in 0..total {
        for s2 in 0..total {
            let xdot = (&xs[s1] * xs[s2].transpose())[(0, 0)];
            let ip = &factors[s1] * factors[s2].transpose();
            for l in 0..k {
                for m in 0..k {
                    g[(l * total + s1, m * total + s2)] = col_w[s2][m] * xdot * ip[(l, m)];
                }
            }
        }
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonfiniteLoss("kernel entries are not finite".into()));
    }
    Ok(GramMatrix { matrix: g, k, total })
}

/// Smallest eigenvalue of a dense symmetric matrix.
pub fn min_eigenvalue_dense(m: &DMatrix<f64>) -> Result<f64> {
    let eig = nalgebra::linalg::SymmetricEigen::try_new(m.clone(), 1.0e-13, 10_000)
        .ok_or_else(|| Error::ConvergenceFailure("symmetric eigensolve did not converge".into()))?;
    eig.eigenvalues
        .iter()
        .copied()
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.min(v))))
        .ok_or_else(|| Error::ConvergenceFailure("empty spectrum".into()))
}

/// Smallest eigenvalue of the symmetrized kernel (G + G^T)/2.
pub fn min_eigenvalue(g: &GramMatrix) -> Result<f64> {
    min_eigenvalue_dense(&g.symmetrized())
}

/// Result of checking a loss trace against the geometric decay bound
/// loss_r <= rho_theory^r * loss_0 * (1 + slack).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateEnvelope {
    pub rho_theory: f64,
    /// Least-squares geometric factor fitted to the positive losses.
    pub rho_fitted: f64,
    pub holds: bool,
    pub first_violation: Option<usize>,
}

/// Evaluates rho_theory = 1 - eta_agg * eta_sgd * lambda * t / (2C) and
/// checks the trace of losses against the decay envelope.
pub fn rate_envelope(
    losses: &[f64],
    eta_agg: f64,
    eta_sgd: f64,
    t: usize,
    c: usize,
    lambda: f64,
    slack: f64,
) -> Result<RateEnvelope> {
    if losses.len() < 2 {
        return Err(Error::ConfigInvalid("envelope needs at least two trace points".into()));
    }
    let rho_theory = 1.0 - eta_agg * eta_sgd * lambda * t as f64 / (2.0 * c as f64);
    if !(rho_theory > 0.0 && rho_theory < 1.0) {
        return Err(Error::InvalidRate(format!(
            "geometric factor {rho_theory} is outside (0, 1)"
        )));
    }
    let mut holds = true;
    let mut first_violation = None;
    let mut bound = losses[0] * (1.0 + slack);
    for (r, &l) in losses.iter().enumerate() {
        if r > 0 {
            bound *= rho_theory;
        }
        if l > bound {
            holds = false;
            first_violation = Some(r);
            break;
        }
    }
    // Fit log(loss) = log(loss_0) + r log(rho) by least squares over the
    // positive entries.
    let pts: Vec<(f64, f64)> = losses
        .iter()
        .enumerate()
        .filter(|(_, l)| **l > 0.0)
        .map(|(r, l)| (r as f64, l.ln()))
        .collect();
    let rho_fitted = if pts.len() >= 2 {
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|(x, _)| x).sum();
        let sy: f64 = pts.iter().map(|(_, y)| y).sum();
        let sxx: f64 = pts.iter().map(|(x, _)| x * x).sum();
        let sxy: f64 = pts.iter().map(|(x, y)| x * y).sum();
        ((n * sxy - sx * sy) / (n * sxx - sx * sx)).exp()
    } else {
        f64::NAN
    };
    Ok(RateEnvelope { rho_theory, rho_fitted, holds, first_violation })
}

/// One named inequality check in a corollary report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

/// Outcome of the partition and noise sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorollaryReport {
    /// lambda_min keyed by the number of coarse classes J.
    pub lambda_by_j: BTreeMap<String, f64>,
    /// lambda_min keyed by the noise level.
    pub lambda_by_xi: BTreeMap<String, f64>,
    /// Frobenius norm of G - G^T for the dataset's own projections.
    pub asymmetry_norm: f64,
    pub bound_checks: Vec<BoundCheck>,
}

const COROLLARY1_TOL: f64 = 1e-8;
const COROLLARY2_REL_TOL: f64 = 1e-9;

/// Runs the two numerical corollary checks on a fixed net and dataset:
/// for every partition of the K classes, lambda_min of the weighted kernel
/// must sit below (min_j 1/k_j) * lambda_0 where lambda_0 is lambda_min of
/// the unweighted kernel; across noise levels lambda_min must not move.
pub fn corollary_checks(
    net: &TwoLayerReluNet,
    dataset: &FederatedDataset,
    partitions: &[Vec<usize>],
    xis: &[f64],
) -> Result<CorollaryReport> {
    let (_, _, k) = net.dims();
    for p in partitions {
        let total: usize = p.iter().sum();
        if total != k {
            return Err(Error::PartitionMismatch(format!(
                "partition {p:?} covers {total} classes, net has {k}"
            )));
        }
    }
    // Unweighted reference: identity projections force every prefactor to 1.
    let iq = build_hierarchical_q(&LabelSpaceSpec::identity(k))?;
    let it = build_symmetric_noise_t(k, 0.0)?;
    let lambda0 = min_eigenvalue(&build_gram(net, dataset, &iq, &it)?)?;

    let mut report = CorollaryReport {
        lambda_by_j: BTreeMap::new(),
        lambda_by_xi: BTreeMap::new(),
        asymmetry_norm: build_gram(net, dataset, &dataset.q, &dataset.t)?.asymmetry_norm(),
        bound_checks: Vec::new(),
    };

    for p in partitions {
        let q = build_hierarchical_q(&LabelSpaceSpec::hierarchical(p))?;
        let lambda = min_eigenvalue(&build_gram(net, dataset, &q, &dataset.t)?)?;
        let j = p.len();
        report.lambda_by_j.insert(j.to_string(), lambda);
        let min_inv_kj = p.iter().map(|&kj| 1.0 / kj as f64).fold(f64::INFINITY, f64::min);
        report.bound_checks.push(BoundCheck {
            name: format!("partition-bound-J{j}"),
            lhs: lambda,
            rhs: min_inv_kj * lambda0 + COROLLARY1_TOL,
            pass: lambda <= min_inv_kj * lambda0 + COROLLARY1_TOL,
        });
    }

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &xi in xis {
        let t = build_symmetric_noise_t(k, xi)?;
        let lambda = min_eigenvalue(&build_gram(net, dataset, &dataset.q, &t)?)?;
        report.lambda_by_xi.insert(format!("{xi}"), lambda);
        lo = lo.min(lambda);
        hi = hi.max(lambda);
    }
    if !xis.is_empty() {
        let spread = (hi - lo).abs() / hi.abs().max(lo.abs()).max(f64::MIN_POSITIVE);
        report.bound_checks.push(BoundCheck {
            name: "noise-independence-spread".into(),
            lhs: spread,
            rhs: COROLLARY2_REL_TOL,
            pass: spread <= COROLLARY2_REL_TOL,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_gaussian_clusters, SyntheticTaskSpec};
    use crate::losses::LabelSpace;
    use approx::assert_abs_diff_eq;

    /// Task with an unbalanced coarse partition: its per-class column
    /// weights differ, so lambda_min of the symmetrized kernel is
    /// macroscopically negative rather than a floating-point zero, which
    /// keeps relative comparisons across noise levels meaningful.
    fn tiny_dataset(k: usize, d: usize) -> FederatedDataset {
        gen_gaussian_clusters(&SyntheticTaskSpec {
            d,
            k,
            space: LabelSpaceSpec::hierarchical(&[k - 1, 1]),
            n_server_per_class: 2,
            clients: 2,
            per_client: 3 * k.max(3),
            xi: 0.0,
            seed: 31,
            separation: 2.0,
        })
        .unwrap()
    }

    /// Literal kernel builder used as an oracle: materializes the full
    /// d*M-length gradient of every g_l and dots the vectors directly,
    /// no factorization shared with build_gram.
    fn plain_kernel_literal(net: &TwoLayerReluNet, xs: &[Vec<f64>]) -> DMatrix<f64> {
        let (d, m_width, k) = net.dims();
        let scale = 1.0 / (m_width as f64).sqrt();
        let u = net.hidden_weights();
        let a = net.output_signs();
        let mut jacobians: Vec<Vec<Vec<f64>>> = Vec::new();
        for x in xs {
            let xm = DMatrix::from_row_slice(1, d, x);
            let logits = net.forward(&xm).unwrap();
            let g = softmax_rows(&logits);
            let mut per_class = vec![vec![0.0; d * m_width]; k];
            for mm in 0..m_width {
                let mut pre = 0.0;
                for dd in 0..d {
                    pre += u[(dd, mm)] * x[dd];
                }
                if pre <= 0.0 {
                    continue;
                }
                let mut abar = 0.0;
                for kk in 0..k {
                    abar += g[(0, kk)] * a[(kk, mm)];
                }
                for l in 0..k {
                    let coef = scale * g[(0, l)] * (a[(l, mm)] - abar);
                    for dd in 0..d {
                        per_class[l][dd * m_width + mm] = coef * x[dd];
                    }
                }
            }
            jacobians.push(per_class);
        }
        let total = xs.len();
        let mut g0 = DMatrix::zeros(k * total, k * total);
        for s1 in 0..total {
            for s2 in 0..total {
                for l in 0..k {
                    for m in 0..k {
                        let dot: f64 = jacobians[s1][l]
                            .iter()
                            .zip(jacobians[s2][m].iter())
                            .map(|(p, q)| p * q)
                            .sum();
                        g0[(l * total + s1, m * total + s2)] = dot;
                    }
                }
            }
        }
        g0
    }

    fn all_inputs(ds: &FederatedDataset) -> Vec<Vec<f64>> {
        let mut xs = Vec::new();
        for b in ds.client_sets.iter().chain(ds.server_sets.iter()) {
            for i in 0..b.len() {
                xs.push(b.inputs().row(i).iter().copied().collect());
            }
        }
        xs
    }

    #[test]
    fn identity_projections_match_literal_plain_kernel() {
        let ds = tiny_dataset(3, 2);
        let net = TwoLayerReluNet::init_ntk(2, 16, 3, 41).unwrap();
        let iq = build_hierarchical_q(&LabelSpaceSpec::identity(3)).unwrap();
        let it = build_symmetric_noise_t(3, 0.0).unwrap();
        let g = build_gram(&net, &ds, &iq, &it).unwrap();
        let oracle = plain_kernel_literal(&net, &all_inputs(&ds));
        assert_eq!(g.side(), oracle.nrows());
        for (a, b) in g.matrix().iter().zip(oracle.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        // Identity prefactors are exactly 1, so the matrix is symmetric.
        assert_abs_diff_eq!(g.asymmetry_norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let net = TwoLayerReluNet::init_ntk(2, 32, 3, 43).unwrap();
        let x = vec![0.7, -0.4];
        let xm = DMatrix::from_row_slice(1, 2, &x);
        let c = factor_matrix(&net, &xm).unwrap();
        let h = 1e-6;
        let probs_of = |n: &TwoLayerReluNet| {
            let logits = n.forward(&xm).unwrap();
            softmax_rows(&logits)
        };
        for l in 0..3 {
            for dd in 0..2 {
                for mm in 0..32 {
                    let analytic = x[dd] * c[(l, mm)];
                    let mut plus = net.clone();
                    plus.hidden_weights_mut()[(dd, mm)] += h;
                    let mut minus = net.clone();
                    minus.hidden_weights_mut()[(dd, mm)] -= h;
                    let fd = (probs_of(&plus)[(0, l)] - probs_of(&minus)[(0, l)]) / (2.0 * h);
                    let scale = analytic.abs().max(fd.abs()).max(1e-4);
                    assert!(
                        (analytic - fd).abs() / scale < 1e-4,
                        "l={l} dd={dd} mm={mm}: analytic {analytic} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn single_class_kernel_collapses_to_zero() {
        // With one class, softmax is constantly 1 and the probability
        // Jacobian vanishes, so both builders agree on the zero matrix.
        let ds = {
            let inputs = DMatrix::from_row_slice(2, 2, &[0.3, 0.8, -0.6, 0.1]);
            let batch = LabeledBatch::new(inputs, vec![0, 0], LabelSpace::Desired(1)).unwrap();
            FederatedDataset {
                spec: SyntheticTaskSpec {
                    d: 2,
                    k: 1,
                    space: LabelSpaceSpec::identity(1),
                    n_server_per_class: 2,
                    clients: 1,
                    per_client: 2,
                    xi: 0.0,
                    seed: 0,
                    separation: 1.0,
                },
                q: build_hierarchical_q(&LabelSpaceSpec::identity(1)).unwrap(),
                t: ProjectionMatrix::new(DMatrix::identity(1, 1), MatrixRole::NoiseMap).unwrap(),
                server_sets: vec![batch.clone()],
                client_sets: vec![batch],
                test_set: LabeledBatch::new(
                    DMatrix::from_row_slice(1, 2, &[0.0, 0.0]),
                    vec![0],
                    LabelSpace::Desired(1),
                )
                .unwrap(),
            }
        };
        let net = TwoLayerReluNet::init_ntk(2, 8, 1, 44).unwrap();
        let g = build_gram(&net, &ds, &ds.q, &ds.t).unwrap();
        let oracle = plain_kernel_literal(&net, &all_inputs(&ds));
        for (a, b) in g.matrix().iter().zip(oracle.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
            assert_abs_diff_eq!(*a, 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn size_cap_is_enforced() {
        let ds = tiny_dataset(3, 2);
        let net = TwoLayerReluNet::init_ntk(2, 8, 3, 45).unwrap();
        let err = build_gram_with_cap(&net, &ds, &ds.q, &ds.t, 10).unwrap_err();
        assert!(matches!(err, Error::TooLarge(_)));
    }

    #[test]
    fn min_eigenvalue_on_simple_matrices() {
        let id = DMatrix::<f64>::identity(3, 3);
        assert_abs_diff_eq!(min_eigenvalue_dense(&id).unwrap(), 1.0, epsilon = 1e-12);
        let diag = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 1.0, 2.0]));
        assert_abs_diff_eq!(min_eigenvalue_dense(&diag).unwrap(), 1.0, epsilon = 1e-12);
    }

    /// 5x5 determinant by literal cofactor expansion.
    fn det_literal(m: &Vec<Vec<f64>>) -> f64 {
        let n = m.len();
        if n == 1 {
            return m[0][0];
        }
        let mut det = 0.0;
        for (j, &mj) in m[0].iter().enumerate() {
            let minor: Vec<Vec<f64>> = m[1..]
                .iter()
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .filter(|(c, _)| *c != j)
                        .map(|(_, v)| *v)
                        .collect()
                })
                .collect();
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            det += sign * mj * det_literal(&minor);
        }
        det
    }

    #[test]
    fn min_eigenvalue_matches_characteristic_polynomial_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::stream(46, "psd", 0);
        let b = DMatrix::from_fn(5, 5, |_, _| rng.gen_range(-1.0..1.0));
        let a = &b * b.transpose();
        let computed = min_eigenvalue_dense(&a).unwrap();

        // Oracle: smallest root of det(A - lambda I), found by scanning for
        // the first sign change of the literal determinant and bisecting.
        let char_det = |lam: f64| {
            let shifted: Vec<Vec<f64>> = (0..5)
                .map(|i| (0..5).map(|j| a[(i, j)] - if i == j { lam } else { 0.0 }).collect())
                .collect();
            det_literal(&shifted)
        };
        let trace: f64 = (0..5).map(|i| a[(i, i)]).sum();
        let step = trace / 20000.0;
        let mut lo = 0.0;
        let mut hi = None;
        let d0 = char_det(0.0);
        let mut prev = d0;
        let mut lam = 0.0;
        while lam < trace {
            lam += step;
            let d = char_det(lam);
            if d.signum() != prev.signum() {
                hi = Some(lam);
                lo = lam - step;
                break;
            }
            prev = d;
        }
        let mut hi = hi.expect("no sign change found");
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if char_det(mid).signum() == d0.signum() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let oracle = 0.5 * (lo + hi);
        assert_abs_diff_eq!(computed, oracle, epsilon = 1e-8);
    }

    #[test]
    fn envelope_flags_constant_traces_and_passes_fast_decay() {
        let constant = vec![1.0; 30];
        let res = rate_envelope(&constant, 1.0, 0.02, 1, 1, 1.0, 0.1).unwrap();
        assert_abs_diff_eq!(res.rho_theory, 0.99, epsilon = 1e-12);
        assert!(!res.holds);
        let r = res.first_violation.unwrap();
        assert!(0.99f64.powi(r as i32) * 1.1 < 1.0);
        assert!(0.99f64.powi(r as i32 - 1) * 1.1 >= 1.0);

        let fast: Vec<f64> = (0..20).map(|r| 0.5f64.powi(r)).collect();
        let res = rate_envelope(&fast, 1.0, 0.2, 1, 1, 1.0, 0.1).unwrap();
        assert_abs_diff_eq!(res.rho_theory, 0.9, epsilon = 1e-12);
        assert!(res.holds);
        assert_abs_diff_eq!(res.rho_fitted, 0.5, epsilon = 1e-9);
    }

    #[test]
    fn envelope_rejects_rates_outside_unit_interval() {
        let trace = vec![1.0, 0.5];
        assert!(matches!(
            rate_envelope(&trace, 1.0, 1.0, 10, 1, 1.0, 0.1),
            Err(Error::InvalidRate(_))
        ));
        assert!(matches!(
            rate_envelope(&trace, 1.0, 0.0, 1, 1, 1.0, 0.1),
            Err(Error::InvalidRate(_))
        ));
    }

    #[test]
    fn server_column_prefactors_are_one_for_every_noise_level() {
        for &xi in &[0.0, 0.1, 0.3, 0.45] {
            let t = build_symmetric_noise_t(4, xi).unwrap();
            for w in mse_class_weights(&t) {
                assert_abs_diff_eq!(w, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn corollary_report_checks_bounds_and_noise_independence() {
        let ds = tiny_dataset(4, 2);
        let net = TwoLayerReluNet::init_ntk(2, 32, 4, 47).unwrap();
        let partitions = vec![vec![4], vec![2, 2], vec![1, 1, 1, 1]];
        let xis = vec![0.0, 0.2, 0.4];
        let report = corollary_checks(&net, &ds, &partitions, &xis).unwrap();
        assert_eq!(report.lambda_by_j.len(), 3);
        assert_eq!(report.lambda_by_xi.len(), 3);
        for check in &report.bound_checks {
            assert!(check.pass, "{} failed: {} > {}", check.name, check.lhs, check.rhs);
        }
        // Trivial partition (J = K) reproduces the identity-projection
        // kernel exactly, since all prefactors become 1.
        let iq = build_hierarchical_q(&LabelSpaceSpec::identity(4)).unwrap();
        let it = build_symmetric_noise_t(4, 0.0).unwrap();
        let lambda_identity = min_eigenvalue(&build_gram(&net, &ds, &iq, &it).unwrap()).unwrap();
        let q_trivial = build_hierarchical_q(&LabelSpaceSpec::hierarchical(&[1, 1, 1, 1])).unwrap();
        let g_trivial = build_gram(&net, &ds, &q_trivial, &ds.t).unwrap();
        let g_identity = build_gram(&net, &ds, &iq, &it).unwrap();
        for (a, b) in g_trivial.matrix().iter().zip(g_identity.matrix().iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(
            report.lambda_by_j["4"],
            lambda_identity,
            epsilon = 1e-12
        );
        // The report serializes with the documented field names.
        let json = serde_json::to_value(&report).unwrap();
        assert!(json.get("lambda_by_j").is_some());
        assert!(json.get("lambda_by_xi").is_some());
        assert!(json.get("asymmetry_norm").is_some());
        assert!(json.get("bound_checks").is_some());
    }

    #[test]
    fn partition_mismatch_is_rejected() {
        let ds = tiny_dataset(3, 2);
        let net = TwoLayerReluNet::init_ntk(2, 8, 3, 48).unwrap();
        let err = corollary_checks(&net, &ds, &[vec![2, 2]], &[]).unwrap_err();
        assert!(matches!(err, Error::PartitionMismatch(_)));
    }
}
