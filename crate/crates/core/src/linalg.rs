//! Dense kernels: pseudo-inverse, truncated SVD, flattened cosine, Gram matrices.
//!
//! SVDs come from `faer`, with `nalgebra` as a last resort; matrices stay in
//! `nalgebra` everywhere else. Every decomposition here passes through
//! [`svd`].

use crate::{Error, Matrix, Result};

/// Relative singular-value cutoff used by [`pinv`] when callers have no
/// better choice.
pub const DEFAULT_RCOND: f64 = 1e-10;

/// A rank-`r` factorization `B·A` with `B: rows x r` and `A: r x cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankPair {
    pub b: Matrix,
    pub a: Matrix,
}

impl LowRankPair {
    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn product(&self) -> Matrix {
        &self.b * &self.a
    }
}

/// Thin SVD `M = U·diag(σ)·Vᵀ` with σ descending and deterministic signs.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v_t: Matrix,
}

fn ensure_finite(op: &'static str, m: &Matrix) -> Result<()> {
    if let Some(index) = m.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            name: op.to_string(),
            index,
        });
    }
    Ok(())
}

/// Reconstruction residuals relative to `‖m‖_F`: below the first the
/// primary result is taken as is, above the second every backend has failed.
const SVD_RESIDUAL_GOOD: f64 = 1e-12;
const SVD_RESIDUAL_MAX: f64 = 1e-8;

fn faer_svd(m: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let (rows, cols) = m.shape();
    let dec = faer::Mat::<f64>::from_fn(rows, cols, |i, j| m[(i, j)]).thin_svd();
    let (fu, fv, fs) = (dec.u(), dec.v(), dec.s_diagonal());
    let p = rows.min(cols);
    let u = Matrix::from_fn(rows, p, |i, k| fu.read(i, k));
    let v_t = Matrix::from_fn(p, cols, |k, j| fv.read(j, k));
    (u, (0..p).map(|k| fs.read(k)).collect(), v_t)
}

fn nalgebra_svd(m: &Matrix) -> Option<(Matrix, Vec<f64>, Matrix)> {
    let dec = m.clone().svd(true, true);
    Some((dec.u?, dec.singular_values.iter().copied().collect(), dec.v_t?))
}

fn residual(m: &Matrix, (u, sigma, v_t): &(Matrix, Vec<f64>, Matrix)) -> f64 {
    let mut scaled = u.clone();
    for (k, s) in sigma.iter().enumerate() {
        scaled.column_mut(k).scale_mut(*s);
    }
    (scaled * v_t - m).norm()
}

/// Thin SVD with singular values in nonincreasing order. Each column of `u`
/// has its largest-magnitude entry positive.
///
/// Both backends occasionally return factors that do not reconstruct an
/// exactly rank-deficient input, so the `faer` result is checked. When its
/// residual is not at rounding level, `faer` on `mᵀ` and `nalgebra` are also
/// run and the best reconstruction wins.
pub fn svd(m: &Matrix) -> Result<ThinSvd> {
    ensure_finite("svd input", m)?;
    if m.is_empty() {
        return Err(Error::dims("svd", "empty matrix"));
    }
    let norm = m.norm().max(f64::MIN_POSITIVE);
    let primary = faer_svd(m);
    let primary_res = residual(m, &primary) / norm;
    let (u, sigma, v_t) = if primary_res <= SVD_RESIDUAL_GOOD {
        primary
    } else {
        let (u, s, v_t) = faer_svd(&m.transpose());
        let mut candidates = vec![(primary_res, primary), (0.0, (v_t.transpose(), s, u.transpose()))];
        candidates[1].0 = residual(m, &candidates[1].1) / norm;
        if let Some(c) = nalgebra_svd(m) {
            candidates.push((residual(m, &c) / norm, c));
        }
        let (best, dec) = candidates
            .into_iter()
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .expect("at least two candidates");
        if best > SVD_RESIDUAL_MAX {
            return Err(Error::Numeric(format!(
                "no SVD backend reconstructed a {:?} matrix (best relative residual {best:e})",
                m.shape()
            )));
        }
        tracing::debug!(residual = best, primary = primary_res, "SVD fallback used");
        dec
    };

    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));
    let sigma: Vec<f64> = order.iter().map(|&k| sigma[k]).collect();
    let mut u = Matrix::from_fn(u.nrows(), order.len(), |i, k| u[(i, order[k])]);
    let mut v_t = Matrix::from_fn(order.len(), v_t.ncols(), |k, j| v_t[(order[k], j)]);
    for k in 0..sigma.len() {
        let col = u.column(k);
        let pivot = col
            .iter()
            .enumerate()
            .fold((0, 0.0_f64), |best, (i, v)| {
                if v.abs() > best.1.abs() {
                    (i, *v)
                } else {
                    best
                }
            })
            .1;
        if pivot < 0.0 {
            u.column_mut(k).neg_mut();
            v_t.row_mut(k).neg_mut();
        }
    }
    Ok(ThinSvd { u, sigma, v_t })
}

/// Moore–Penrose pseudo-inverse. Singular values at or below
/// `rcond · σ_max` are treated as zero; an all-zero input yields the zero
/// matrix of transposed shape.
pub fn pinv(m: &Matrix, rcond: f64) -> Result<Matrix> {
    if !(rcond > 0.0 && rcond < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "rcond must lie in (0, 1), got {rcond}"
        )));
    }
    ensure_finite("pinv input", m)?;
    let (rows, cols) = m.shape();
    if m.iter().all(|v| *v == 0.0) {
        return Ok(Matrix::zeros(cols, rows));
    }
    let dec = svd(m)?;
    let cutoff = rcond * dec.sigma[0];
    let mut out = Matrix::zeros(cols, rows);
    for (k, &s) in dec.sigma.iter().enumerate() {
        if s <= cutoff {
            break;
        }
        // out += v_k · u_kᵀ / σ_k
        out.ger(1.0 / s, &dec.v_t.row(k).transpose(), &dec.u.column(k), 1.0);
    }
    Ok(out)
}

/// Best rank-`r` factorization of `m` (Eckart–Young), with `√σ` split evenly
/// between the two factors.
pub fn truncated_svd(m: &Matrix, r: usize) -> Result<LowRankPair> {
    let (rows, cols) = m.shape();
    if r == 0 || r > rows.min(cols) {
        return Err(Error::InvalidRank { rank: r, rows, cols });
    }
    let dec = svd(m)?;
    let mut b = Matrix::zeros(rows, r);
    let mut a = Matrix::zeros(r, cols);
    for k in 0..r {
        let root = dec.sigma[k].sqrt();
        b.set_column(k, &(dec.u.column(k) * root));
        a.set_row(k, &(dec.v_t.row(k) * root));
    }
    Ok(LowRankPair { b, a })
}

/// Cosine of the angle between `vec(m1)` and `vec(m2)`. Zero when either
/// side is the zero matrix.
pub fn flat_cosine(m1: &Matrix, m2: &Matrix) -> Result<f64> {
    if m1.shape() != m2.shape() {
        return Err(Error::dims(
            "flat_cosine",
            format!("{:?} vs {:?}", m1.shape(), m2.shape()),
        ));
    }
    let (n1, n2) = (m1.norm(), m2.norm());
    if n1 == 0.0 || n2 == 0.0 {
        return Ok(0.0);
    }
    Ok((m1.dot(m2) / (n1 * n2)).clamp(-1.0, 1.0))
}

/// Linear-kernel Gram matrix `X·Xᵀ`.
pub fn gram(x: &Matrix) -> Matrix {
    x * x.transpose()
}

/// Squared Frobenius norm of the singular values past index `r`.
pub fn tail_energy(sigma: &[f64], r: usize) -> f64 {
    sigma.iter().skip(r).map(|s| s * s).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    fn rel(a: &Matrix, b: &Matrix) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn pinv_identity_and_diagonal() {
        let i3 = Matrix::identity(3, 3);
        assert!(rel(&pinv(&i3, DEFAULT_RCOND).unwrap(), &i3) < 1e-14);
        let d = Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let p = pinv(&d, DEFAULT_RCOND).unwrap();
        assert_eq!(p, Matrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn pinv_matches_normal_equations_oracle() {
        let m = gaussian(100, 32, 11);
        let p = pinv(&m, DEFAULT_RCOND).unwrap();
        // independent route: (MᵀM)⁻¹Mᵀ via LU
        let oracle = (m.transpose() * &m).try_inverse().unwrap() * m.transpose();
        assert!(rel(&p, &oracle) < 1e-10);
        assert!(rel(&(&p * &m), &Matrix::identity(32, 32)) < 1e-8);
    }

    #[test]
    fn pinv_zero_matrix() {
        let z = Matrix::zeros(3, 5);
        assert_eq!(pinv(&z, DEFAULT_RCOND).unwrap(), Matrix::zeros(5, 3));
    }

    #[test]
    fn pinv_rejects_bad_rcond_and_nan() {
        let m = Matrix::identity(2, 2);
        assert!(pinv(&m, 0.0).is_err());
        assert!(pinv(&m, 1.0).is_err());
        let mut bad = m.clone();
        bad[(0, 1)] = f64::NAN;
        assert!(matches!(pinv(&bad, 1e-10), Err(Error::NonFinite { .. })));
    }

    fn penrose(m: &Matrix) {
        let p = pinv(m, DEFAULT_RCOND).unwrap();
        let scale = m.norm();
        assert!((m * &p * m - m).norm() <= 1e-8 * scale);
        assert!((&p * m * &p - &p).norm() <= 1e-8 * p.norm());
        let mp = m * &p;
        let pm = &p * m;
        assert!((&mp - mp.transpose()).norm() <= 1e-8 * mp.norm());
        assert!((&pm - pm.transpose()).norm() <= 1e-8 * pm.norm());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn penrose_identities(rows in 1usize..24, cols in 1usize..24, rank in 1usize..8, seed in any::<u64>()) {
            let full = gaussian(rows, cols, seed);
            penrose(&full);
            let k = rank.min(rows).min(cols);
            let deficient = gaussian(rows, k, seed ^ 1) * gaussian(k, cols, seed ^ 2);
            penrose(&deficient);
        }

        #[test]
        fn truncation_error_non_increasing(n in 2usize..12, seed in any::<u64>()) {
            let m = gaussian(n, n + 3, seed);
            let mut last = f64::INFINITY;
            for r in 1..=n {
                let err = (&m - truncated_svd(&m, r).unwrap().product()).norm_squared();
                prop_assert!(err <= last + 1e-9 * m.norm_squared());
                last = err;
            }
            // exact once r reaches rank(m) = n
            prop_assert!(last <= 1e-20 * m.norm_squared());
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant(seed in any::<u64>(), s1 in 0.01f64..100.0, s2 in 0.01f64..100.0) {
            let a = gaussian(4, 5, seed);
            let b = gaussian(4, 5, seed.wrapping_add(1));
            let c = flat_cosine(&a, &b).unwrap();
            prop_assert!((c - flat_cosine(&b, &a).unwrap()).abs() < 1e-15);
            prop_assert!((c - flat_cosine(&(&a * s1), &(&b * s2)).unwrap()).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }

    #[test]
    fn truncated_svd_exact_cases() {
        let m = gaussian(6, 2, 1) * gaussian(2, 5, 2);
        let pair = truncated_svd(&m, 2).unwrap();
        assert!((pair.product() - &m).norm() <= 1e-10 * m.norm().max(1.0));
        let u = gaussian(7, 1, 3);
        let v = gaussian(1, 4, 4);
        let outer = &u * &v;
        let pair = truncated_svd(&outer, 1).unwrap();
        assert!(rel(&pair.product(), &outer) < 1e-12);
        assert_eq!((pair.b.shape(), pair.a.shape()), ((7, 1), (1, 4)));
    }

    #[test]
    fn truncated_svd_tail_energy_matches_eigen_oracle() {
        let m = gaussian(48, 48, 9);
        let r = 8;
        let pair = truncated_svd(&m, r).unwrap();
        let err = (&m - pair.product()).norm_squared();
        // σ² are eigenvalues of MᵀM; the tail is everything except the top r
        let mut eig: Vec<f64> = SymmetricEigen::new(m.transpose() * &m)
            .eigenvalues
            .iter()
            .copied()
            .collect();
        eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let oracle: f64 = eig[r..].iter().sum();
        assert!((err - oracle).abs() <= 1e-8 * oracle);
    }

    #[test]
    fn truncated_svd_rank_errors() {
        let m = gaussian(3, 5, 1);
        assert!(matches!(truncated_svd(&m, 4), Err(Error::InvalidRank { .. })));
        assert!(matches!(truncated_svd(&m, 0), Err(Error::InvalidRank { .. })));
    }

    #[test]
    fn block_sparse_low_rank_reconstructs() {
        // low rank with whole zero row and column blocks
        for seed in 0..200 {
            let inner = &gaussian(48, 4, seed) * &gaussian(4, 32, seed + 1000) * 1e-3;
            let mut m = Matrix::zeros(48, 48);
            m.view_mut((0, 0), (48, 32)).copy_from(&inner);
            for t in [m.clone(), m.transpose()] {
                let d = svd(&t).unwrap();
                let mut us = d.u.clone();
                for (k, s) in d.sigma.iter().enumerate() {
                    us.column_mut(k).scale_mut(*s);
                }
                assert!(rel(&(us * &d.v_t), &t) < 1e-12, "seed {seed}");
            }
        }
    }

    #[test]
    fn svd_signs_are_deterministic() {
        let m = gaussian(5, 4, 21);
        let d1 = svd(&m).unwrap();
        let d2 = svd(&(-&m)).unwrap();
        for k in 0..4 {
            let col = d1.u.column(k);
            let (imax, _) = col.iamax_full();
            assert!(col[imax] > 0.0);
            // negating M flips V, not U
            assert!((d1.u.column(k) - d2.u.column(k)).norm() < 1e-10);
        }
        assert!(d1.sigma.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn cosine_cases() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let b = Matrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(flat_cosine(&a, &b).unwrap(), 0.0);
        let m = gaussian(3, 3, 5);
        assert!((flat_cosine(&m, &m).unwrap() - 1.0).abs() < 1e-15);
        assert!((flat_cosine(&m, &(-&m)).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(flat_cosine(&Matrix::zeros(3, 3), &m).unwrap(), 0.0);
        assert!(flat_cosine(&m, &Matrix::zeros(2, 3)).is_err());
    }
}
