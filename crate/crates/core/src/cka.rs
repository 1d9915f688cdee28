//! Minibatch centered kernel alignment with the unbiased HSIC estimator.
//!
//! For each minibatch the linear Gram matrices `K = X·Xᵀ` and `L = Y·Yᵀ` are
//! built with their diagonals zeroed. The cross term `HSIC₁(K, L)` and the two
//! self terms accumulate as running sums over minibatches in a fixed order.
//! CKA is `mean_cross / sqrt(mean_self_x · mean_self_y)`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::tensor_io::ActivationSet;
use crate::{Error, Matrix, Result};

/// Admissible slack around `[0, 1]` for similarity entries. The unbiased
/// estimator can dip slightly below zero.
pub const SIMILARITY_SLACK: f64 = 0.05;

/// Self-HSIC at or below this fraction of the Gram energy counts as zero.
const DEGENERATE_RTOL: f64 = 1e-10;

/// A Gram matrix with zeroed diagonal plus the sums the estimator reuses.
#[derive(Debug, Clone)]
pub struct ZeroDiagGram {
    k: Matrix,
    row_sums: DVector<f64>,
    total: f64,
}

impl ZeroDiagGram {
    pub fn from_gram(mut k: Matrix) -> Result<Self> {
        if !k.is_square() {
            return Err(Error::dims("hsic1", format!("Gram matrix is {:?}", k.shape())));
        }
        k.fill_diagonal(0.0);
        let row_sums = DVector::from_iterator(k.nrows(), k.row_iter().map(|r| r.sum()));
        let total = row_sums.sum();
        Ok(ZeroDiagGram { k, row_sums, total })
    }

    /// Linear-kernel Gram of activation rows.
    pub fn from_activations(x: &Matrix) -> Self {
        Self::from_gram(crate::linalg::gram(x)).expect("X·Xᵀ is square")
    }

    pub fn n(&self) -> usize {
        self.k.nrows()
    }

    fn energy(&self) -> f64 {
        self.k.norm_squared()
    }
}

/// Unbiased HSIC estimator on zero-diagonal Grams.
pub fn hsic1_prepared(k: &ZeroDiagGram, l: &ZeroDiagGram) -> Result<f64> {
    let n = k.n();
    if l.n() != n {
        return Err(Error::dims("hsic1", format!("n = {} vs {}", n, l.n())));
    }
    if n < 4 {
        return Err(Error::TooFewSamples(n));
    }
    let nf = n as f64;
    // tr(K̃·L̃) = Σ_ij K̃_ij L̃_ji
    let trace = k.k.dot(&l.k.transpose());
    // 1ᵀK̃L̃1 with K̃ symmetric
    let cross = k.row_sums.dot(&l.row_sums);
    let value = trace + k.total * l.total / ((nf - 1.0) * (nf - 2.0)) - 2.0 / (nf - 2.0) * cross;
    Ok(value / (nf * (nf - 3.0)))
}

/// `HSIC₁(K, L)` for symmetric Gram matrices of `n ≥ 4` samples.
pub fn hsic1(k: &Matrix, l: &Matrix) -> Result<f64> {
    if k.shape() != l.shape() {
        return Err(Error::dims("hsic1", format!("{:?} vs {:?}", k.shape(), l.shape())));
    }
    if k.nrows() < 4 {
        return Err(Error::TooFewSamples(k.nrows()));
    }
    hsic1_prepared(&ZeroDiagGram::from_gram(k.clone())?, &ZeroDiagGram::from_gram(l.clone())?)
}

/// Per-layer Gram matrices and self terms for one activation capture.
struct PreparedLayer {
    grams: Vec<ZeroDiagGram>,
    self_sum: f64,
    energy: f64,
}

impl PreparedLayer {
    fn new(batches: &[Matrix]) -> Result<Self> {
        let grams: Vec<ZeroDiagGram> = batches.iter().map(ZeroDiagGram::from_activations).collect();
        let mut self_sum = 0.0;
        let mut energy = 0.0;
        for g in &grams {
            self_sum += hsic1_prepared(g, g)?;
            let n = g.n() as f64;
            energy += g.energy() / (n * (n - 3.0));
        }
        Ok(PreparedLayer {
            grams,
            self_sum,
            energy,
        })
    }

    fn is_degenerate(&self) -> bool {
        self.self_sum <= DEGENERATE_RTOL * self.energy
    }
}

fn cka_prepared(x: &PreparedLayer, y: &PreparedLayer) -> Result<f64> {
    if x.is_degenerate() || y.is_degenerate() {
        return Err(Error::UndefinedSimilarity(
            "activations have zero self-HSIC (constant across samples)".into(),
        ));
    }
    let mut cross = 0.0;
    for (gx, gy) in x.grams.iter().zip(&y.grams) {
        cross += hsic1_prepared(gx, gy)?;
    }
    let k = x.grams.len() as f64;
    Ok((cross / k) / ((x.self_sum / k) * (y.self_sum / k)).sqrt())
}

fn check_batches(xs: &[Matrix], ys: &[Matrix]) -> Result<()> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::Activations(format!(
            "minibatch counts differ or are zero: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    let m = xs[0].nrows();
    for (b, (x, y)) in xs.iter().zip(ys).enumerate() {
        if x.nrows() != m || y.nrows() != m {
            return Err(Error::Activations(format!(
                "ragged minibatch {b}: {} and {} rows, expected {m}",
                x.nrows(),
                y.nrows()
            )));
        }
    }
    if m < 4 {
        return Err(Error::TooFewSamples(m));
    }
    Ok(())
}

/// Minibatch CKA between two layers' activations (`k` minibatches of `m` rows).
pub fn minibatch_cka(xs: &[Matrix], ys: &[Matrix]) -> Result<f64> {
    check_batches(xs, ys)?;
    cka_prepared(&PreparedLayer::new(xs)?, &PreparedLayer::new(ys)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilaritySource {
    Cka,
    External,
}

/// `l_o x l_n` layer similarity scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Matrix,
    pub source: SimilaritySource,
}

impl SimilarityMatrix {
    pub fn new(values: Matrix, source: SimilaritySource) -> Result<Self> {
        let admissible = -SIMILARITY_SLACK..=1.0 + SIMILARITY_SLACK;
        for row in 0..values.nrows() {
            for col in 0..values.ncols() {
                let value = values[(row, col)];
                if !admissible.contains(&value) {
                    return Err(Error::SimilarityRange { row, col, value });
                }
            }
        }
        Ok(SimilarityMatrix { values, source })
    }

    pub fn n_old(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_new(&self) -> usize {
        self.values.ncols()
    }

    /// CSV with one row per old layer, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.row_iter() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |detail: String| Error::Json {
            path: path.to_path_buf(),
            detail,
        };
        let rows: Vec<Vec<f64>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split(',')
                    .map(|c| c.trim().parse::<f64>().map_err(|e| bad(e.to_string())))
                    .collect()
            })
            .collect::<Result<_>>()?;
        let cols = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || rows.iter().any(|r| r.len() != cols) {
            return Err(bad("similarity CSV must be a non-empty rectangular grid".into()));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Self::new(
            Matrix::from_row_slice(flat.len() / cols, cols, &flat),
            SimilaritySource::External,
        )
    }
}

/// `S[i][j] = minibatch_cka(old layer i, new layer j)` over all layer pairs.
pub fn layer_similarity_matrix(old: &ActivationSet, new: &ActivationSet) -> Result<SimilarityMatrix> {
    old.check_comparable(new)?;
    if old.rows_per_batch < 4 {
        return Err(Error::TooFewSamples(old.rows_per_batch));
    }
    let prep = |set: &ActivationSet| -> Result<Vec<PreparedLayer>> {
        set.layers.par_iter().map(|l| PreparedLayer::new(l)).collect()
    };
    let (po, pn) = (prep(old)?, prep(new)?);
    let (lo, ln) = (po.len(), pn.len());
    let cells: Vec<f64> = (0..lo * ln)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / ln, idx % ln);
            cka_prepared(&po[i], &pn[j]).map_err(|e| match e {
                Error::UndefinedSimilarity(msg) => {
                    Error::UndefinedSimilarity(format!("old layer {i} vs new layer {j}: {msg}"))
                }
                other => other,
            })
        })
        .collect::<Result<_>>()?;
    SimilarityMatrix::new(Matrix::from_row_slice(lo, ln, &cells), SimilaritySource::Cka)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::linalg::QR;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
    }

    /// Straight transcription of the estimator with explicit matrix products.
    fn hsic1_oracle(k: &Matrix, l: &Matrix) -> f64 {
        let n = k.nrows();
        let nf = n as f64;
        let mut kt = k.clone();
        let mut lt = l.clone();
        for i in 0..n {
            kt[(i, i)] = 0.0;
            lt[(i, i)] = 0.0;
        }
        let ones = Matrix::from_element(n, 1, 1.0);
        let tr = (&kt * &lt).trace();
        let one_k_one = (ones.transpose() * &kt * &ones)[(0, 0)];
        let one_l_one = (ones.transpose() * &lt * &ones)[(0, 0)];
        let one_kl_one = (ones.transpose() * &kt * &lt * &ones)[(0, 0)];
        (tr + one_k_one * one_l_one / ((nf - 1.0) * (nf - 2.0)) - 2.0 / (nf - 2.0) * one_kl_one)
            / (nf * (nf - 3.0))
    }

    #[test]
    fn all_ones_n4_matches_oracle() {
        let j = Matrix::from_element(4, 4, 1.0);
        let v = hsic1(&j, &j).unwrap();
        // K̃ = 11ᵀ − I: tr = 12, 1ᵀK̃1 = 12, 1ᵀK̃K̃1 = 36
        // (12 + 144/6 − 36) / 4 = 0
        assert!((v - hsic1_oracle(&j, &j)).abs() < 1e-12);
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn random_grams_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.gen_range(4..30);
            let x = gaussian(n, 5, &mut rng);
            let y = gaussian(n, 7, &mut rng);
            let (k, l) = (&x * x.transpose(), &y * y.transpose());
            let got = hsic1(&k, &l).unwrap();
            let want = hsic1_oracle(&k, &l);
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn zero_kernel_and_small_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = gaussian(6, 3, &mut rng);
        assert_eq!(hsic1(&(&x * x.transpose()), &Matrix::zeros(6, 6)).unwrap(), 0.0);
        let z = Matrix::zeros(3, 3);
        assert!(matches!(hsic1(&z, &z), Err(Error::TooFewSamples(3))));
    }

    #[test]
    fn self_hsic_nonnegative_on_random_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut violations = 0;
        for _ in 0..1000 {
            let n = rng.gen_range(4..24);
            let d = rng.gen_range(1..10);
            let x = gaussian(n, d, &mut rng);
            let k = &x * x.transpose();
            if hsic1(&k, &k).unwrap() < -1e-12 {
                violations += 1;
            }
        }
        assert_eq!(violations, 0);
    }

    fn batches(k: usize, m: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Matrix> {
        (0..k).map(|_| gaussian(m, d, rng)).collect()
    }

    #[test]
    fn self_similarity_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xs = batches(4, 16, 8, &mut rng);
        assert!((minibatch_cka(&xs, &xs).unwrap() - 1.0).abs() < 1e-10);
        let scaled: Vec<Matrix> = xs.iter().map(|x| x * 3.7).collect();
        assert!((minibatch_cka(&xs, &scaled).unwrap() - 1.0).abs() < 1e-10);
        let q = QR::new(gaussian(8, 8, &mut rng)).q();
        let rotated: Vec<Matrix> = xs.iter().map(|x| x * &q).collect();
        assert!((minibatch_cka(&xs, &rotated).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn constant_activations_are_undefined() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xs = batches(2, 8, 4, &mut rng);
        let constant = vec![Matrix::from_element(8, 4, 0.3); 2];
        assert!(matches!(
            minibatch_cka(&xs, &constant),
            Err(Error::UndefinedSimilarity(_))
        ));
    }

    #[test]
    fn ragged_batches_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xs = batches(2, 8, 4, &mut rng);
        let mut ys = batches(2, 8, 4, &mut rng);
        ys[1] = gaussian(7, 4, &mut rng);
        assert!(matches!(minibatch_cka(&xs, &ys), Err(Error::Activations(_))));
        assert!(minibatch_cka(&xs, &ys[..1]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn invariances(seed in any::<u64>(), scale in 0.05f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs = batches(3, 12, 6, &mut rng);
            let mix = gaussian(6, 5, &mut rng);
            let ys: Vec<Matrix> = xs.iter().map(|x| x * &mix + gaussian(12, 5, &mut rng) * 0.5).collect();
            let base = minibatch_cka(&xs, &ys).unwrap();
            let scaled: Vec<Matrix> = ys.iter().map(|y| y * scale).collect();
            prop_assert!((minibatch_cka(&xs, &scaled).unwrap() - base).abs() < 1e-8);
            let q = QR::new(gaussian(6, 6, &mut rng)).q();
            let rotated: Vec<Matrix> = xs.iter().map(|x| x * &q).collect();
            prop_assert!((minibatch_cka(&rotated, &ys).unwrap() - base).abs() < 1e-8);
            let mut order: Vec<usize> = (0..12).collect();
            order.shuffle(&mut rng);
            let permute = |m: &Matrix| Matrix::from_fn(12, m.ncols(), |r, c| m[(order[r], c)]);
            let px: Vec<Matrix> = xs.iter().map(permute).collect();
            let py: Vec<Matrix> = ys.iter().map(permute).collect();
            prop_assert!((minibatch_cka(&px, &py).unwrap() - base).abs() < 1e-8);
        }
    }

    #[test]
    fn duplicated_layers_attain_row_maxima() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let old_layers: Vec<Vec<Matrix>> = (0..3).map(|_| batches(2, 64, 6, &mut rng)).collect();
        // new model: layers 0,0,1,2,2 (duplicates)
        let dup = [0usize, 0, 1, 2, 2];
        let new_layers: Vec<Vec<Matrix>> = dup.iter().map(|&i| old_layers[i].clone()).collect();
        let old = ActivationSet::new("c", old_layers).unwrap();
        let new = ActivationSet::new("c", new_layers).unwrap();
        let s = layer_similarity_matrix(&old, &new).unwrap();
        assert_eq!(s.values.shape(), (3, 5));
        for i in 0..3 {
            let row = s.values.row(i);
            let max = row.max();
            for (j, &src) in dup.iter().enumerate() {
                if src == i {
                    assert_eq!(row[j], max);
                    assert!((row[j] - 1.0).abs() < 1e-10);
                } else {
                    assert!(row[j] < max);
                }
            }
        }
    }

    #[test]
    fn same_set_has_unit_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let layers: Vec<Vec<Matrix>> = (0..4).map(|_| batches(2, 64, 5, &mut rng)).collect();
        let set = ActivationSet::new("c", layers).unwrap();
        let s = layer_similarity_matrix(&set, &set).unwrap();
        for i in 0..4 {
            assert!((s.values[(i, i)] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn metadata_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = ActivationSet::new("a", vec![batches(2, 8, 3, &mut rng)]).unwrap();
        let b = ActivationSet::new("b", vec![batches(2, 8, 3, &mut rng)]).unwrap();
        assert!(matches!(layer_similarity_matrix(&a, &b), Err(Error::Activations(_))));
    }

    #[test]
    fn csv_roundtrip_keeps_17_digits() {
        let values = Matrix::from_row_slice(2, 3, &[0.1, 1.0 / 3.0, -0.01, 0.999_999_999_999_9, 0.5, 0.0]);
        let s = SimilarityMatrix::new(values, SimilaritySource::External).unwrap();
        let csv = s.to_csv();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with("1.0000000000000001e-1,"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        s.write_csv(&p).unwrap();
        assert_eq!(SimilarityMatrix::read_csv(&p).unwrap().values, s.values);
    }

    #[test]
    fn out_of_range_similarity_rejected() {
        let values = Matrix::from_row_slice(1, 2, &[0.5, 1.2]);
        assert!(matches!(
            SimilarityMatrix::new(values, SimilaritySource::External),
            Err(Error::SimilarityRange { row: 0, col: 1, .. })
        ));
    }
}
