use nalgebra::DMatrix;

/// Numerical rank from Householder QR with column pivoting.
#[derive(Debug, Clone, PartialEq)]
pub struct PivotedRank {
    pub rank: usize,
    /// Original column indices in pivot order; `pivots[rank..]` are the
    /// columns found to be linearly dependent on the earlier ones.
    pub pivots: Vec<usize>,
}

/// A diagonal entry `|R_jj|` counts toward the rank when it exceeds
/// `tolerance * |R_00|`.
pub fn pivoted_rank(a: &DMatrix<f64>, tolerance: f64) -> PivotedRank {
    let (m, n) = a.shape();
    let mut r = a.clone();
    let mut pivots: Vec<usize> = (0..n).collect();
    let mut norms: Vec<f64> = (0..n).map(|j| r.column(j).norm_squared()).collect();
    let steps = m.min(n);
    let mut leading = 0.0_f64;
    let mut rank = 0;

    for k in 0..steps {
        let (best, _) = norms[k..]
            .iter()
            .enumerate()
            .fold((k, f64::NEG_INFINITY), |acc, (i, &v)| {
                if v > acc.1 {
                    (k + i, v)
                } else {
                    acc
                }
            });
        if best != k {
            r.swap_columns(k, best);
            norms.swap(k, best);
            pivots.swap(k, best);
        }

        // Householder reflection zeroing r[k+1.., k].
        let alpha = r.view((k, k), (m - k, 1)).norm();
        if k == 0 {
            leading = alpha;
        }
        if alpha <= tolerance * leading || alpha == 0.0 {
            break;
        }
        rank += 1;
        let sign = if r[(k, k)] >= 0.0 { 1.0 } else { -1.0 };
        let mut v: Vec<f64> = (k..m).map(|i| r[(i, k)]).collect();
        v[0] += sign * alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            for j in k..n {
                let dot: f64 = (k..m).map(|i| v[i - k] * r[(i, j)]).sum();
                let scale = 2.0 * dot / vnorm2;
                for i in k..m {
                    r[(i, j)] -= scale * v[i - k];
                }
            }
        }
        // Downdate remaining column norms exactly from the trailing block.
        for (j, norm) in norms.iter_mut().enumerate().skip(k + 1) {
            *norm = (k + 1..m).map(|i| r[(i, j)] * r[(i, j)]).sum();
        }
    }
    PivotedRank { rank, pivots }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_rank_and_deficient() {
        let a = DMatrix::from_row_slice(4, 3, &[1., 0., 1., 1., 1., 2., 1., 2., 3., 1., 3., 4.]);
        let r = pivoted_rank(&a, 1e-10);
        assert_eq!(r.rank, 2);
        let b = DMatrix::from_row_slice(3, 2, &[1., 0., 1., 1., 1., 2.]);
        assert_eq!(pivoted_rank(&b, 1e-10).rank, 2);
    }

    #[test]
    fn zero_matrix_has_rank_zero() {
        let a = DMatrix::zeros(3, 2);
        assert_eq!(pivoted_rank(&a, 1e-10).rank, 0);
    }
}
