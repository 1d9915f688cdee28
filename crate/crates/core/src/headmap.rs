//! Attention-head matching between two mapped layers.
//!
//! Each query head `i` is described by two input-independent `d x d` matrices,
//! `QK_i = Q_i·K_iᵀ` and `VO_i = V_i·O_i`. Old-model matrices are moved into the
//! new hidden space as `W_hᵀ·M·W_h`, heads are scored by flattened cosine, and
//! the Hungarian algorithm picks the best one-to-one assignment.
//!
//! Both matrices have rank at most `head_dim`, so they are kept as factor
//! pairs and never materialized unless asked for.

use rayon::prelude::*;

use crate::tensor_io::{LayerWeights, ModelSpec};
use crate::{Error, Matrix, Result};

/// Default weight of the QK cosine in the head similarity; VO gets the rest.
pub const DEFAULT_QK_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Contiguous column blocks (Q, K, V in input x output storage).
    Column,
    /// Contiguous row blocks (O).
    Row,
}

pub fn split_heads(w: &Matrix, h: usize, axis: Axis) -> Result<Vec<Matrix>> {
    let len = match axis {
        Axis::Column => w.ncols(),
        Axis::Row => w.nrows(),
    };
    if h == 0 || len % h != 0 {
        return Err(Error::NotDivisible {
            what: "head split",
            len,
            parts: h,
        });
    }
    let width = len / h;
    Ok((0..h)
        .map(|i| match axis {
            Axis::Column => w.columns(i * width, width).into_owned(),
            Axis::Row => w.rows(i * width, width).into_owned(),
        })
        .collect())
}

/// Inverse of [`split_heads`].
pub fn concat_heads(parts: &[Matrix], axis: Axis) -> Result<Matrix> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dims("concat_heads", "no heads"))?;
    let (r, c) = first.shape();
    if parts.iter().any(|p| p.shape() != (r, c)) {
        return Err(Error::dims("concat_heads", "heads differ in shape"));
    }
    Ok(match axis {
        Axis::Column => Matrix::from_fn(r, c * parts.len(), |i, j| parts[j / c][(i, j % c)]),
        Axis::Row => Matrix::from_fn(r * parts.len(), c, |i, j| parts[i / r][(i % r, j)]),
    })
}

fn group_size(n_kv: usize, n_q: usize) -> Result<usize> {
    if n_kv == 0 || n_q % n_kv != 0 {
        return Err(Error::NotDivisible {
            what: "query heads per kv head",
            len: n_q,
            parts: n_kv,
        });
    }
    Ok(n_q / n_kv)
}

/// Tiles each of the `n_kv` column blocks of `w` so the result has one block
/// per query head, in group order.
pub fn replicate_columns(w: &Matrix, n_kv: usize, n_q: usize) -> Result<Matrix> {
    let group = group_size(n_kv, n_q)?;
    if group == 1 {
        return Ok(w.clone());
    }
    let heads = split_heads(w, n_kv, Axis::Column)?;
    let tiled: Vec<Matrix> = heads
        .iter()
        .flat_map(|hm| std::iter::repeat(hm.clone()).take(group))
        .collect();
    concat_heads(&tiled, Axis::Column)
}

pub fn replicate_kv_heads(w_k: &Matrix, w_v: &Matrix, n_kv: usize, n_q: usize) -> Result<(Matrix, Matrix)> {
    Ok((replicate_columns(w_k, n_kv, n_q)?, replicate_columns(w_v, n_kv, n_q)?))
}

/// Averages the replicas of each kv group back to `n_kv` column blocks; the
/// adjoint of [`replicate_columns`] up to the `1/group` factor.
pub fn average_kv_groups(w: &Matrix, n_kv: usize, n_q: usize) -> Result<Matrix> {
    let group = group_size(n_kv, n_q)?;
    if group == 1 {
        return Ok(w.clone());
    }
    let heads = split_heads(w, n_q, Axis::Column)?;
    let averaged: Vec<Matrix> = heads
        .chunks(group)
        .map(|chunk| chunk.iter().fold(Matrix::zeros(chunk[0].nrows(), chunk[0].ncols()), |acc, m| acc + m) / group as f64)
        .collect();
    concat_heads(&averaged, Axis::Column)
}

/// `left·rightᵀ`, both factors `d x head_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Factored {
    pub left: Matrix,
    pub right: Matrix,
}

impl Factored {
    pub fn dense(&self) -> Matrix {
        &self.left * self.right.transpose()
    }

    /// Frobenius inner product with another factored matrix, via
    /// `Σ (L₁ᵀL₂) ∘ (R₁ᵀR₂)`.
    pub fn inner(&self, other: &Factored) -> f64 {
        let l = self.left.transpose() * &other.left;
        let r = self.right.transpose() * &other.right;
        l.dot(&r)
    }

    /// `W_hᵀ·(L·Rᵀ)·W_h`, still factored.
    pub fn conjugate(&self, w_h: &Matrix) -> Factored {
        Factored {
            left: w_h.transpose() * &self.left,
            right: w_h.transpose() * &self.right,
        }
    }

    fn dim(&self) -> usize {
        self.left.nrows()
    }
}

fn factored_cosine(a: &Factored, b: &Factored) -> f64 {
    let (na, nb) = (a.inner(a), b.inner(b));
    if na <= 0.0 || nb <= 0.0 {
        return 0.0;
    }
    (a.inner(b) / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Per query head `QK_i` and `VO_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadInteraction {
    pub qk: Vec<Factored>,
    pub vo: Vec<Factored>,
}

impl HeadInteraction {
    pub fn n_heads(&self) -> usize {
        self.qk.len()
    }

    pub fn hidden(&self) -> usize {
        self.qk.first().map_or(0, Factored::dim)
    }

    pub fn conjugate(&self, w_h: &Matrix) -> HeadInteraction {
        HeadInteraction {
            qk: self.qk.iter().map(|f| f.conjugate(w_h)).collect(),
            vo: self.vo.iter().map(|f| f.conjugate(w_h)).collect(),
        }
    }
}

/// Interactions from full projection matrices; `w_k` and `w_v` must already
/// be at query-head granularity.
pub fn head_interactions(w_q: &Matrix, w_k: &Matrix, w_v: &Matrix, w_o: &Matrix, h: usize) -> Result<HeadInteraction> {
    let d = w_q.nrows();
    if [w_k.nrows(), w_v.nrows(), w_o.ncols()].iter().any(|&x| x != d)
        || w_k.ncols() != w_q.ncols()
        || w_v.ncols() != w_q.ncols()
        || w_o.nrows() != w_v.ncols()
    {
        return Err(Error::dims(
            "head_interactions",
            format!(
                "q {:?}, k {:?}, v {:?}, o {:?}",
                w_q.shape(),
                w_k.shape(),
                w_v.shape(),
                w_o.shape()
            ),
        ));
    }
    let q = split_heads(w_q, h, Axis::Column)?;
    let k = split_heads(w_k, h, Axis::Column)?;
    let v = split_heads(w_v, h, Axis::Column)?;
    let o = split_heads(w_o, h, Axis::Row)?;
    Ok(HeadInteraction {
        qk: q.into_iter().zip(k).map(|(left, right)| Factored { left, right }).collect(),
        vo: v
            .into_iter()
            .zip(o)
            .map(|(left, o)| Factored { left, right: o.transpose() })
            .collect(),
    })
}

/// Interactions of one layer, replicating K/V heads when the model uses
/// grouped-query attention.
pub fn layer_interactions(layer: &LayerWeights, spec: &ModelSpec) -> Result<HeadInteraction> {
    let (k, v) = replicate_kv_heads(&layer.k, &layer.v, spec.n_kv_heads, spec.n_heads)?;
    head_interactions(&layer.q, &k, &v, &layer.o, spec.n_heads)
}

/// `H_o x H_n` similarity with QK and VO cosines weighted equally.
pub fn head_similarity(old: &HeadInteraction, new: &HeadInteraction, w_h: &Matrix) -> Result<Matrix> {
    head_similarity_weighted(old, new, w_h, DEFAULT_QK_WEIGHT)
}

pub fn head_similarity_weighted(
    old: &HeadInteraction,
    new: &HeadInteraction,
    w_h: &Matrix,
    qk_weight: f64,
) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&qk_weight) {
        return Err(Error::InvalidConfig(format!(
            "qk weight must lie in [0, 1], got {qk_weight}"
        )));
    }
    if w_h.shape() != (old.hidden(), new.hidden()) {
        return Err(Error::dims(
            "head_similarity",
            format!(
                "W_h is {:?}, hidden sizes are {} -> {}",
                w_h.shape(),
                old.hidden(),
                new.hidden()
            ),
        ));
    }
    let moved = old.conjugate(w_h);
    let (ho, hn) = (old.n_heads(), new.n_heads());
    let cells: Vec<f64> = (0..ho * hn)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / hn, idx % hn);
            qk_weight * factored_cosine(&moved.qk[i], &new.qk[j])
                + (1.0 - qk_weight) * factored_cosine(&moved.vo[i], &new.vo[j])
        })
        .collect();
    Ok(Matrix::from_row_slice(ho, hn, &cells))
}

/// A minimum-cost assignment of rows to columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(row, column)`, sorted by row; `min(m, n)` pairs.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

pub fn hungarian(cost: &Matrix) -> Result<Assignment> {
    let mut ops = 0;
    hungarian_counted(cost, &mut ops)
}

/// Hungarian algorithm on `cost` padded to square with zeros. After row and
/// column reduction a greedy zero matching seeds the solution; every
/// unmatched row is then added along a shortest augmenting path while the
/// dual potentials are adjusted, which is the line-covering `δ` step in
/// potential form. Adds the number of inner-loop cell visits to `ops`.
pub fn hungarian_counted(cost: &Matrix, ops: &mut u64) -> Result<Assignment> {
    if let Some(index) = cost.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            name: "assignment cost".into(),
            index,
        });
    }
    let (m, n) = cost.shape();
    let size = m.max(n);
    if size == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        });
    }
    let a = |i: usize, j: usize| if i < m && j < n { cost[(i, j)] } else { 0.0 };

    // 1-based indices below; index 0 is the virtual root of the search tree
    let mut u = vec![0.0; size + 1];
    let mut v = vec![0.0; size + 1];
    for i in 1..=size {
        u[i] = (1..=size).map(|j| a(i - 1, j - 1)).fold(f64::INFINITY, f64::min);
        *ops += size as u64;
    }
    for j in 1..=size {
        v[j] = (1..=size).map(|i| a(i - 1, j - 1) - u[i]).fold(f64::INFINITY, f64::min);
        *ops += size as u64;
    }
    let reduced = |i: usize, j: usize, u: &[f64], v: &[f64]| (a(i - 1, j - 1) - u[i]) - v[j];

    // p[j]: row matched to column j
    let mut p = vec![0usize; size + 1];
    let mut row_matched = vec![false; size + 1];
    for i in 1..=size {
        for j in 1..=size {
            *ops += 1;
            if p[j] == 0 && reduced(i, j, &u, &v) == 0.0 {
                p[j] = i;
                row_matched[i] = true;
                break;
            }
        }
    }

    let mut way = vec![0usize; size + 1];
    for i in 1..=size {
        if row_matched[i] {
            continue;
        }
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; size + 1];
        let mut used = vec![false; size + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=size {
                *ops += 1;
                if used[j] {
                    continue;
                }
                let cur = reduced(i0, j, &u, &v);
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=size {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=size)
        .filter(|&j| p[j] != 0 && p[j] - 1 < m && j - 1 < n)
        .map(|j| (p[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(i, j)| cost[(i, j)]).sum();
    Ok(Assignment { pairs, total_cost })
}

/// Head pairs of one mapped layer pair.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadAssignment {
    /// `(old head, new head)`, sorted by old head.
    pub pairs: Vec<(usize, usize)>,
    pub sim_total: f64,
}

impl HeadAssignment {
    /// Head `i` to head `i` for the first `min(h_o, h_n)` heads.
    pub fn identity(h_o: usize, h_n: usize) -> Self {
        HeadAssignment {
            pairs: (0..h_o.min(h_n)).map(|i| (i, i)).collect(),
            sim_total: f64::NAN,
        }
    }

    /// Old head assigned to new head `j`, if any.
    pub fn old_for_new(&self, j: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == j).map(|p| p.0)
    }
}

/// Similarity-maximizing assignment, solved as a minimization over
/// `max(sim) - sim`.
pub fn map_heads(sim: &Matrix) -> Result<HeadAssignment> {
    if sim.is_empty() {
        return Ok(HeadAssignment {
            pairs: Vec::new(),
            sim_total: 0.0,
        });
    }
    let top = sim.max();
    let solved = hungarian(&sim.map(|s| top - s))?;
    let sim_total = solved.pairs.iter().map(|&(i, j)| sim[(i, j)]).sum();
    Ok(HeadAssignment {
        pairs: solved.pairs,
        sim_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::flat_cosine;
    use nalgebra::linalg::QR;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
    }

    /// Minimum over all injections of the smaller side into the larger.
    fn brute_force(cost: &Matrix) -> f64 {
        let transposed = cost.nrows() > cost.ncols();
        let c = if transposed { cost.transpose() } else { cost.clone() };
        fn go(c: &Matrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == c.nrows() {
                *best = best.min(acc);
                return;
            }
            for j in 0..c.ncols() {
                if !used[j] {
                    used[j] = true;
                    go(c, row + 1, used, acc + c[(row, j)], best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        go(&c, 0, &mut vec![false; c.ncols()], 0.0, &mut best);
        best
    }

    fn permutation_total(cost: &Matrix, pairs: &[(usize, usize)]) -> f64 {
        // same left-to-right order as the enumeration on the wide orientation
        let mut ordered: Vec<(usize, usize)> = if cost.nrows() > cost.ncols() {
            pairs.iter().map(|&(i, j)| (j, i)).collect()
        } else {
            pairs.to_vec()
        };
        ordered.sort_unstable();
        ordered
            .iter()
            .map(|&(a, b)| if cost.nrows() > cost.ncols() { cost[(b, a)] } else { cost[(a, b)] })
            .sum()
    }

    #[test]
    fn split_and_concat() {
        let w = Matrix::from_fn(8, 8, |r, c| (r * 8 + c) as f64);
        let parts = split_heads(&w, 4, Axis::Column).unwrap();
        assert_eq!(parts.len(), 4);
        assert!(parts.iter().all(|p| p.shape() == (8, 2)));
        assert_eq!(parts[1][(3, 0)], w[(3, 2)]);
        assert_eq!(concat_heads(&parts, Axis::Column).unwrap(), w);
        let rows = split_heads(&w, 2, Axis::Row).unwrap();
        assert_eq!(rows[1].shape(), (4, 8));
        assert_eq!(concat_heads(&rows, Axis::Row).unwrap(), w);
        assert!(matches!(
            split_heads(&w, 3, Axis::Column),
            Err(Error::NotDivisible { len: 8, parts: 3, .. })
        ));
    }

    #[test]
    fn minicpm_width_split() {
        let w = Matrix::zeros(4, 2304);
        let parts = split_heads(&w, 36, Axis::Column).unwrap();
        assert_eq!(parts.len(), 36);
        assert!(parts.iter().all(|p| p.ncols() == 64));
    }

    #[test]
    fn replication() {
        let w = Matrix::from_fn(3, 4, |_, c| if c < 2 { 1.0 } else { 2.0 });
        let (k, v) = replicate_kv_heads(&w, &w, 2, 4).unwrap();
        let expect: Vec<f64> = [1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0].to_vec();
        assert_eq!(k.row(0).iter().copied().collect::<Vec<_>>(), expect);
        assert_eq!(k, v);
        let same = replicate_columns(&w, 2, 2).unwrap();
        assert_eq!(same, w);
        assert!(matches!(
            replicate_kv_heads(&w, &w, 8, 36),
            Err(Error::NotDivisible { .. })
        ));
        let wide = Matrix::zeros(2, 12 * 2);
        assert_eq!(replicate_columns(&wide, 12, 36).unwrap().ncols(), 72);
        assert_eq!(average_kv_groups(&k, 2, 4).unwrap(), w);
    }

    #[test]
    fn interactions_match_dense_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (d, h) = (8, 2);
        let (q, k, v, o) = (
            gaussian(d, d, &mut rng),
            gaussian(d, d, &mut rng),
            gaussian(d, d, &mut rng),
            gaussian(d, d, &mut rng),
        );
        let hi = head_interactions(&q, &k, &v, &o, h).unwrap();
        for i in 0..h {
            let qi = q.columns(i * 4, 4);
            let ki = k.columns(i * 4, 4);
            let vi = v.columns(i * 4, 4);
            let oi = o.rows(i * 4, 4);
            let qk = qi * ki.transpose();
            let vo = vi * oi;
            assert!((hi.qk[i].dense() - &qk).norm() <= 1e-12 * qk.norm());
            assert!((hi.vo[i].dense() - &vo).norm() <= 1e-12 * vo.norm());
        }
        let whole = head_interactions(&q, &k, &v, &o, 1).unwrap();
        assert!((whole.qk[0].dense() - &q * k.transpose()).norm() < 1e-12 * q.norm() * k.norm());
    }

    #[test]
    fn orthonormal_qk_is_projector() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let basis = QR::new(gaussian(8, 8, &mut rng)).q();
        let qk = head_interactions(&basis, &basis, &basis, &basis.transpose(), 2).unwrap();
        for f in &qk.qk {
            let p = f.dense();
            assert!((&p * &p - &p).norm() < 1e-12);
        }
    }

    #[test]
    fn factored_inner_and_conjugation_match_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Factored {
            left: gaussian(6, 2, &mut rng),
            right: gaussian(6, 2, &mut rng),
        };
        let b = Factored {
            left: gaussian(6, 2, &mut rng),
            right: gaussian(6, 2, &mut rng),
        };
        assert!((a.inner(&b) - a.dense().dot(&b.dense())).abs() < 1e-12);
        let w_h = gaussian(6, 9, &mut rng);
        let dense = w_h.transpose() * a.dense() * &w_h;
        assert!((a.conjugate(&w_h).dense() - &dense).norm() < 1e-12 * dense.norm());
        assert!((factored_cosine(&a, &b) - flat_cosine(&a.dense(), &b.dense()).unwrap()).abs() < 1e-12);
    }

    fn random_layer(d: usize, h: usize, hd: usize, rng: &mut ChaCha8Rng) -> (Matrix, Matrix, Matrix, Matrix) {
        (
            gaussian(d, h * hd, rng),
            gaussian(d, h * hd, rng),
            gaussian(d, h * hd, rng),
            gaussian(h * hd, d, rng),
        )
    }

    fn permute_heads(w: &Matrix, h: usize, axis: Axis, perm: &[usize]) -> Matrix {
        // new head j is old head perm_inv[j]; perm maps old -> new
        let parts = split_heads(w, h, axis).unwrap();
        let mut out = parts.clone();
        for (old, &new) in perm.iter().enumerate() {
            out[new] = parts[old].clone();
        }
        concat_heads(&out, axis).unwrap()
    }

    #[test]
    fn self_similarity_diagonal_dominates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (q, k, v, o) = random_layer(16, 4, 4, &mut rng);
        let hi = head_interactions(&q, &k, &v, &o, 4).unwrap();
        let s = head_similarity(&hi, &hi, &Matrix::identity(16, 16)).unwrap();
        for i in 0..4 {
            assert!((s[(i, i)] - 1.0).abs() < 1e-12);
            assert_eq!(s.row(i).transpose().argmax().0, i);
        }
    }

    #[test]
    fn permutation_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for h in [2usize, 5, 12] {
            let (q, k, v, o) = random_layer(24, h, 2, &mut rng);
            let mut perm: Vec<usize> = (0..h).collect();
            perm.shuffle(&mut rng);
            let old = head_interactions(&q, &k, &v, &o, h).unwrap();
            let new = head_interactions(
                &permute_heads(&q, h, Axis::Column, &perm),
                &permute_heads(&k, h, Axis::Column, &perm),
                &permute_heads(&v, h, Axis::Column, &perm),
                &permute_heads(&o, h, Axis::Row, &perm),
                h,
            )
            .unwrap();
            let s = head_similarity(&old, &new, &Matrix::identity(24, 24)).unwrap();
            for i in 0..h {
                assert_eq!(s.row(i).transpose().argmax().0, perm[i]);
            }
            let a = map_heads(&s).unwrap();
            assert_eq!(a.pairs, (0..h).map(|i| (i, perm[i])).collect::<Vec<_>>());
        }
    }

    #[test]
    fn zero_vo_halves_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (q, k, _, _) = random_layer(8, 2, 4, &mut rng);
        let z = Matrix::zeros(8, 8);
        let hi = head_interactions(&q, &k, &z, &z, 2).unwrap();
        let s = head_similarity(&hi, &hi, &Matrix::identity(8, 8)).unwrap();
        let qk_cos = flat_cosine(&hi.qk[0].dense(), &hi.qk[1].dense()).unwrap();
        assert!((s[(0, 1)] - 0.5 * qk_cos).abs() < 1e-12);
        assert!((s[(0, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn similarity_shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (q, k, v, o) = random_layer(8, 2, 4, &mut rng);
        let hi = head_interactions(&q, &k, &v, &o, 2).unwrap();
        assert!(head_similarity(&hi, &hi, &Matrix::identity(8, 9)).is_err());
        assert!(head_similarity_weighted(&hi, &hi, &Matrix::identity(8, 8), 1.5).is_err());
        assert!(head_interactions(&q, &k, &v, &o.transpose().columns(0, 4).into_owned(), 2).is_err());
    }

    #[test]
    fn hungarian_examples() {
        let j_minus_i = Matrix::from_fn(4, 4, |r, c| if r == c { 0.0 } else { 1.0 });
        let a = hungarian(&j_minus_i).unwrap();
        assert_eq!(a.pairs, (0..4).map(|i| (i, i)).collect::<Vec<_>>());
        assert_eq!(a.total_cost, 0.0);

        let c = Matrix::from_row_slice(3, 3, &[4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0]);
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, vec![(0, 1), (1, 0), (2, 2)]);
        assert_eq!(a.total_cost, 5.0);
        assert_eq!(brute_force(&c), 5.0);

        assert!(hungarian(&Matrix::from_element(2, 2, f64::NAN)).is_err());
        assert!(hungarian(&Matrix::zeros(0, 0)).unwrap().pairs.is_empty());
    }

    #[test]
    fn hungarian_rectangular_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (m, n) in [(2, 3), (3, 2), (1, 5), (5, 1), (4, 7)] {
            for _ in 0..20 {
                let c = Matrix::from_fn(m, n, |_, _| rng.gen_range(0.0..10.0));
                let a = hungarian(&c).unwrap();
                assert_eq!(a.pairs.len(), m.min(n));
                assert_eq!(permutation_total(&c, &a.pairs), brute_force(&c));
            }
        }
    }

    #[test]
    fn assignment_invariant_to_similarity_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let s = Matrix::from_fn(5, 5, |_, _| rng.gen_range(-1.0..1.0));
            let a = map_heads(&s).unwrap();
            let b = map_heads(&s.add_scalar(0.3)).unwrap();
            assert_eq!(a.pairs, b.pairs);
        }
    }

    #[test]
    fn identity_assignment() {
        let a = HeadAssignment::identity(3, 5);
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(a.old_for_new(2), Some(2));
        assert_eq!(a.old_for_new(4), None);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn hungarian_is_optimal(m in 1usize..=7, n in 1usize..=7, integer in any::<bool>(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = Matrix::from_fn(m, n, |_, _| {
                if integer { rng.gen_range(0..6) as f64 } else { rng.gen_range(-5.0..5.0) }
            });
            let a = hungarian(&c).unwrap();
            prop_assert_eq!(a.pairs.len(), m.min(n));
            let rows: std::collections::BTreeSet<_> = a.pairs.iter().map(|p| p.0).collect();
            let cols: std::collections::BTreeSet<_> = a.pairs.iter().map(|p| p.1).collect();
            prop_assert_eq!(rows.len(), a.pairs.len());
            prop_assert_eq!(cols.len(), a.pairs.len());
            prop_assert_eq!(permutation_total(&c, &a.pairs), brute_force(&c));
        }
    }
}
