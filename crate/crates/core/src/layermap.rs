//! Monotone layer alignment by dynamic programming over a similarity matrix.
//!
//! The shallower model is the source. Source layer `i` may only land on target
//! layers `j` with `i <= j <= i + delta`, and target indices strictly increase
//! along the mapping. Among mappings satisfying that, the one with the largest
//! summed similarity wins.

use serde::Serialize;

use crate::cka::SimilarityMatrix;
use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingDirection {
    /// Every old layer maps to a distinct new layer.
    OldToNew,
    /// Every new layer receives a distinct old layer.
    NewToOld,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMapping {
    /// `(old layer, new layer)`, increasing in both coordinates.
    pub pairs: Vec<(usize, usize)>,
    pub total_score: f64,
    pub delta: usize,
    pub direction: MappingDirection,
}

impl LayerMapping {
    /// Pairs as (source, target) in the direction the DP ran.
    pub fn source_target(&self) -> Vec<(usize, usize)> {
        match self.direction {
            MappingDirection::OldToNew => self.pairs.clone(),
            MappingDirection::NewToOld => self.pairs.iter().map(|&(o, n)| (n, o)).collect(),
        }
    }

    /// Checks monotonicity, the offset window and the recorded total against
    /// `s` (indexed old x new).
    pub fn check(&self, s: &Matrix) -> Result<()> {
        let st = self.source_target();
        for (idx, &(i, j)) in st.iter().enumerate() {
            if idx != i {
                return Err(Error::InfeasibleMapping(format!("source layer {idx} missing")));
            }
            if j < i || j > i + self.delta {
                return Err(Error::InfeasibleMapping(format!(
                    "pair ({i}, {j}) outside offset window {}",
                    self.delta
                )));
            }
        }
        if st.windows(2).any(|w| w[1].1 <= w[0].1) {
            return Err(Error::InfeasibleMapping("targets not strictly increasing".into()));
        }
        let total: f64 = self.pairs.iter().map(|&(o, n)| s[(o, n)]).sum();
        if total != self.total_score {
            return Err(Error::InfeasibleMapping(format!(
                "recorded total {} != recomputed {total}",
                self.total_score
            )));
        }
        Ok(())
    }
}

/// Runs the alignment with `s` indexed `source x target`.
pub fn dp_layer_mapping(s: &Matrix, delta: usize) -> Result<LayerMapping> {
    let mut ops = 0;
    dp_layer_mapping_counted(s, delta, &mut ops)
}

/// Same as [`dp_layer_mapping`], adding the number of inner transition
/// evaluations to `ops`.
pub fn dp_layer_mapping_counted(s: &Matrix, delta: usize, ops: &mut u64) -> Result<LayerMapping> {
    let (ls, lt) = s.shape();
    if ls == 0 {
        return Err(Error::InfeasibleMapping("empty similarity matrix".into()));
    }
    if ls > lt {
        return Err(Error::InfeasibleMapping(format!(
            "source has {ls} layers but target only {lt}; orient the problem first"
        )));
    }
    if delta < lt - ls {
        return Err(Error::InfeasibleMapping(format!(
            "offset {delta} is smaller than the depth gap {}",
            lt - ls
        )));
    }
    if let Some(bad) = s.iter().find(|v| !v.is_finite()) {
        return Err(Error::InfeasibleMapping(format!("non-finite similarity {bad}")));
    }

    let mut dp = vec![vec![f64::NEG_INFINITY; lt]; ls];
    let mut path = vec![vec![usize::MAX; lt]; ls];
    for j in 0..=delta.min(lt - 1) {
        *ops += 1;
        dp[0][j] = s[(0, j)];
    }
    for i in 1..ls {
        for j in i..=(i + delta).min(lt - 1) {
            let mut best = f64::NEG_INFINITY;
            let mut best_k = usize::MAX;
            for k in (i - 1)..j {
                *ops += 1;
                let cand = dp[i - 1][k] + s[(i, j)];
                if cand > best {
                    best = cand;
                    best_k = k;
                }
            }
            dp[i][j] = best;
            path[i][j] = best_k;
        }
    }

    let last = ls - 1;
    let mut end = usize::MAX;
    let mut total = f64::NEG_INFINITY;
    for j in last..=(last + delta).min(lt - 1) {
        if dp[last][j] > total {
            total = dp[last][j];
            end = j;
        }
    }
    if end == usize::MAX {
        return Err(Error::InfeasibleMapping("no monotone mapping fits the window".into()));
    }
    let mut targets = vec![0; ls];
    targets[last] = end;
    for i in (1..ls).rev() {
        targets[i - 1] = path[i][targets[i]];
    }
    Ok(LayerMapping {
        pairs: targets.into_iter().enumerate().collect(),
        total_score: total,
        delta,
        direction: MappingDirection::OldToNew,
    })
}

/// Aligns an old model with `l_o` layers to a new one with `l_n` layers,
/// always running the DP from the shallower side. `delta` defaults to the
/// depth gap and is raised to it when smaller.
pub fn orient_and_map(
    s: &SimilarityMatrix,
    l_o: usize,
    l_n: usize,
    delta: Option<usize>,
) -> Result<LayerMapping> {
    if s.values.shape() != (l_o, l_n) {
        return Err(Error::dims(
            "orient_and_map",
            format!("similarity is {:?}, layers are ({l_o}, {l_n})", s.values.shape()),
        ));
    }
    let gap = l_o.abs_diff(l_n);
    let delta = match delta {
        Some(d) if d < gap => {
            tracing::warn!(requested = d, gap, "layer offset below depth gap, raising it");
            gap
        }
        Some(d) => d,
        None => gap,
    };
    if l_o <= l_n {
        dp_layer_mapping(&s.values, delta)
    } else {
        let mut m = dp_layer_mapping(&s.values.transpose(), delta)?;
        m.pairs = m.pairs.into_iter().map(|(n, o)| (o, n)).collect();
        m.direction = MappingDirection::NewToOld;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cka::SimilaritySource;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Enumerates every strictly increasing target sequence inside the window.
    fn brute_force(s: &Matrix, delta: usize) -> Option<f64> {
        fn go(s: &Matrix, delta: usize, i: usize, min_j: usize, acc: f64, best: &mut Option<f64>) {
            if i == s.nrows() {
                if best.map_or(true, |b| acc > b) {
                    *best = Some(acc);
                }
                return;
            }
            for j in min_j.max(i)..=(i + delta).min(s.ncols() - 1) {
                go(s, delta, i + 1, j + 1, acc + s[(i, j)], best);
            }
        }
        let mut best = None;
        go(s, delta, 0, 0, 0.0, &mut best);
        best
    }

    fn random_s(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-0.05..1.0))
    }

    #[test]
    fn identity_with_zero_offset() {
        let m = dp_layer_mapping(&Matrix::identity(4, 4), 0).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert_eq!(m.total_score, 4.0);
    }

    #[test]
    fn three_by_five_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let s = random_s(3, 5, &mut rng);
            let m = dp_layer_mapping(&s, 2).unwrap();
            m.check(&s).unwrap();
            assert_eq!(Some(m.total_score), brute_force(&s, 2));
        }
    }

    #[test]
    fn planted_staircase_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let plant = [0usize, 2, 3, 5, 6];
        let mut s = Matrix::from_fn(5, 8, |_, _| rng.gen_range(0.0..0.5));
        for (i, &j) in plant.iter().enumerate() {
            s[(i, j)] = 0.95;
        }
        let m = dp_layer_mapping(&s, 3).unwrap();
        let got: Vec<usize> = m.pairs.iter().map(|p| p.1).collect();
        assert_eq!(got, plant);
    }

    #[test]
    fn errors() {
        assert!(dp_layer_mapping(&Matrix::zeros(4, 2), 2).is_err());
        assert!(matches!(
            dp_layer_mapping(&Matrix::zeros(2, 5), 1),
            Err(Error::InfeasibleMapping(_))
        ));
    }

    #[test]
    fn ties_prefer_smallest_predecessor_and_end() {
        let s = Matrix::from_element(2, 4, 0.5);
        let m = dp_layer_mapping(&s, 2).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn orient_old_shallower() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = SimilarityMatrix::new(random_s(2, 4, &mut rng), SimilaritySource::External).unwrap();
        let m = orient_and_map(&s, 2, 4, None).unwrap();
        assert_eq!(m.pairs.len(), 2);
        assert_eq!(m.direction, MappingDirection::OldToNew);
        assert_eq!(m.delta, 2);
    }

    #[test]
    fn orient_old_deeper_matches_transposed_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..30 {
            let raw = random_s(4, 2, &mut rng);
            let s = SimilarityMatrix::new(raw.clone(), SimilaritySource::External).unwrap();
            let m = orient_and_map(&s, 4, 2, None).unwrap();
            assert_eq!(m.direction, MappingDirection::NewToOld);
            let news: Vec<usize> = m.pairs.iter().map(|p| p.1).collect();
            assert_eq!(news, vec![0, 1]);
            assert!(m.pairs[0].0 < m.pairs[1].0);
            assert_eq!(Some(m.total_score), brute_force(&raw.transpose(), 2));
            m.check(&raw).unwrap();
        }
    }

    #[test]
    fn orient_equal_depth_diagonal_dominant() {
        let mut s = Matrix::from_element(5, 5, 0.2);
        s.fill_diagonal(0.9);
        let s = SimilarityMatrix::new(s, SimilaritySource::External).unwrap();
        let m = orient_and_map(&s, 5, 5, Some(2)).unwrap();
        assert_eq!(m.pairs, (0..5).map(|i| (i, i)).collect::<Vec<_>>());
    }

    #[test]
    fn small_offset_is_raised() {
        let s = SimilarityMatrix::new(Matrix::from_element(2, 5, 0.1), SimilaritySource::External).unwrap();
        assert_eq!(orient_and_map(&s, 2, 5, Some(1)).unwrap().delta, 3);
    }

    #[test]
    fn operation_count_formula() {
        // row 0 touches delta+1 cells; each later row sums (j-i+1) over the window
        let mut ops = 0;
        dp_layer_mapping_counted(&Matrix::zeros(10, 14), 4, &mut ops).unwrap();
        let mut expect = 5u64;
        for i in 1..10usize {
            for j in i..=(i + 4).min(13) {
                expect += (j - i + 1) as u64;
            }
        }
        assert_eq!(ops, expect);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn optimal_and_well_formed(ls in 1usize..=6, extra in 0usize..=3, slack in 0usize..=3, seed in any::<u64>()) {
            let lt = (ls + extra).min(9);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_s(ls, lt, &mut rng);
            let delta = lt - ls + slack;
            let m = dp_layer_mapping(&s, delta).unwrap();
            prop_assert!(m.check(&s).is_ok());
            prop_assert_eq!(Some(m.total_score), brute_force(&s, delta));
        }
    }
}
