use crate::error::{shape_err, Error, Result};
use crate::numerics::{column_means, frobenius_norm, matmul, Tensor};

fn check_pow2(n: usize, what: &str) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::Config(format!("{what} must be a power of two, got {n}")));
    }
    Ok(())
}

/// Normalized Sylvester-ordered Walsh–Hadamard matrix of size `n`.
///
/// Built as `H_2 ⊗ H_{n/2}`, so row 0 is all `+1/√n` and the matrix is symmetric.
pub fn walsh_hadamard(n: usize) -> Result<Tensor> {
    check_pow2(n, "Hadamard size")?;
    let norm = 1.0 / (n as f64).sqrt();
    Ok(Tensor::from_fn(n, n, |i, j| {
        if (i & j).count_ones() % 2 == 0 {
            norm
        } else {
            -norm
        }
    }))
}

/// In-place normalized fast Walsh–Hadamard transform (`x ← H x`).
pub fn fht_in_place(x: &mut [f64]) -> Result<()> {
    let n = x.len();
    check_pow2(n, "FHT length")?;
    let mut h = 1;
    while h < n {
        for block in x.chunks_exact_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (u, v) = (*a, *b);
                *a = u + v;
                *b = u - v;
            }
        }
        h *= 2;
    }
    let norm = 1.0 / (n as f64).sqrt();
    x.iter_mut().for_each(|v| *v *= norm);
    Ok(())
}

pub fn fht(x: &[f64]) -> Result<Vec<f64>> {
    let mut out = x.to_vec();
    fht_in_place(&mut out)?;
    Ok(out)
}

/// `x · H` for every row of `x`, i.e. the online transform on activations.
pub fn fht_rows(x: &Tensor) -> Result<Tensor> {
    let mut out = x.clone();
    for i in 0..out.rows() {
        fht_in_place(out.row_mut(i))?;
    }
    Ok(out)
}

/// `H · w`, applied column by column with the fast transform.
pub fn fht_columns(w: &Tensor) -> Result<Tensor> {
    Ok(fht_rows(&w.transpose())?.transpose())
}

/// Incoherence coefficient `max|w_ij| · √(mn) / ‖w‖_F`.
pub fn incoherence(w: &Tensor) -> Result<f64> {
    let f = frobenius_norm(w);
    if f == 0.0 {
        return Err(Error::Precondition("incoherence of a zero matrix is undefined".into()));
    }
    Ok(w.max_abs() * ((w.rows() * w.cols()) as f64).sqrt() / f)
}

/// Row 0 of `H · w`, checked against `√n · column_means(w)`.
pub fn first_row_projection_check(w: &Tensor) -> Result<Vec<f64>> {
    let n = w.rows();
    check_pow2(n, "weight row count")?;
    let rotated = fht_columns(w)?;
    let row0 = rotated.row(0).to_vec();
    let root_n = (n as f64).sqrt();
    for (j, (&got, mean)) in row0.iter().zip(column_means(w)).enumerate() {
        let want = root_n * mean;
        let tol = 1e-8 * want.abs().max(1.0);
        if (got - want).abs() > tol {
            return shape_err(format!(
                "column {j}: rotated first row {got} differs from √n·mean {want}"
            ));
        }
    }
    Ok(row0)
}

/// `incoherence(H w) / incoherence(w)`.
pub fn incoherence_ratio(w: &Tensor) -> Result<f64> {
    check_pow2(w.rows(), "weight row count")?;
    let h = walsh_hadamard(w.rows())?;
    let rotated = matmul(&h, w)?;
    Ok(incoherence(&rotated)? / incoherence(w)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn small_hadamards() {
        assert_eq!(walsh_hadamard(1).unwrap().data(), &[1.0]);
        let r = 1.0 / 2f64.sqrt();
        assert_eq!(walsh_hadamard(2).unwrap().data(), &[r, r, r, -r]);
        assert!(matches!(walsh_hadamard(12), Err(Error::Config(_))));
        assert!(matches!(fht(&[1.0, 2.0, 3.0]), Err(Error::Config(_))));
    }

    #[test]
    fn orthogonal_n8() {
        let h = walsh_hadamard(8).unwrap();
        let hh = matmul(&h, &h.transpose()).unwrap();
        assert!(hh.max_abs_diff(&Tensor::identity(8)).unwrap() < 1e-12);
        assert!(h.row(0).iter().all(|&v| v > 0.0));
    }

    #[test]
    fn fht_constant_and_basis() {
        let y = fht(&[3.0; 16]).unwrap();
        assert!((y[0] - 4.0 * 3.0).abs() < 1e-12);
        assert!(y[1..].iter().all(|v| v.abs() < 1e-12));
        let mut e0 = vec![0.0; 8];
        e0[0] = 1.0;
        let y = fht(&e0).unwrap();
        assert!(y.iter().all(|v| (v - 1.0 / 8f64.sqrt()).abs() < 1e-15));
    }

    #[test]
    fn fht_matches_dense_n16() {
        let x = random(1, 16, 4);
        let dense = matmul(&walsh_hadamard(16).unwrap(), &x.transpose()).unwrap();
        let fast = fht(x.row(0)).unwrap();
        for (a, b) in dense.data().iter().zip(&fast) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn incoherence_cases() {
        let flat = Tensor::from_fn(4, 6, |_, _| -2.5);
        assert!((incoherence(&flat).unwrap() - 1.0).abs() < 1e-12);
        let mut spike = Tensor::zeros(4, 6);
        spike.set(2, 3, 7.0);
        assert!((incoherence(&spike).unwrap() - 24f64.sqrt()).abs() < 1e-12);
        assert!(incoherence(&Tensor::zeros(2, 2)).is_err());

        let w = random(8, 8, 5);
        let mut maxabs = 0.0f64;
        let mut sq = 0.0;
        for v in w.data() {
            maxabs = maxabs.max(v.abs());
            sq += v * v;
        }
        let oracle = maxabs * 8.0 / sq.sqrt();
        assert!((incoherence(&w).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn first_row_cases() {
        let mut w = random(8, 3, 6);
        for j in 0..3 {
            let m = w.column(j).iter().sum::<f64>() / 8.0;
            for i in 0..8 {
                w.set(i, j, w.get(i, j) - m);
            }
        }
        assert!(first_row_projection_check(&w).unwrap().iter().all(|v| v.abs() < 1e-12));
        let ones = Tensor::from_fn(4, 1, |_, _| 1.0);
        assert!((first_row_projection_check(&ones).unwrap()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn incoherence_ratio_cases() {
        let n = 8;
        let h = walsh_hadamard(n).unwrap();
        // a single spike spreads to n equal entries: max drops by √n
        let mut spike = Tensor::zeros(n, 1);
        spike.set(3, 0, 5.0);
        assert!((incoherence_ratio(&spike).unwrap() - 1.0 / (n as f64).sqrt()).abs() < 1e-12);
        // Hᵀ·spike is flat; rotating it back re-concentrates
        let flat = matmul(&h.transpose(), &spike).unwrap();
        assert!((incoherence_ratio(&flat).unwrap() - (n as f64).sqrt()).abs() < 1e-9);
        // mean-biased column with √n·mean > max
        let biased = Tensor::from_fn(n, 1, |i, _| 1.0 + 0.1 * i as f64);
        assert!(incoherence_ratio(&biased).unwrap() > 1.0);
    }

    proptest! {
        #[test]
        fn ratio_equals_max_ratio(k in 1u32..6, cols in 1usize..6, seed in any::<u64>()) {
            let w = random(1 << k, cols, seed);
            let rotated = fht_columns(&w).unwrap();
            let direct = rotated.max_abs() / w.max_abs();
            prop_assert!((incoherence_ratio(&w).unwrap() - direct).abs() < 1e-8);
        }
    }
}
