//! Dense Gaussian elimination with partial pivoting for small square systems.

/// Pivots smaller than this are treated as zero.
pub const PIVOT_EPS: f64 = 1e-12;

/// Returned when elimination meets a (numerically) zero pivot in `column`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Singular {
    pub column: usize,
}

/// Solves `A X = B` in place. `a` is `n×n`, `b` is `n×m`; on success `b`
/// holds `X`.
pub fn solve_in_place<const N: usize, const M: usize>(
    a: &mut [[f64; N]; N],
    b: &mut [[f64; M]; N],
) -> Result<(), Singular> {
    for col in 0..N {
        let pivot = (col..N)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if a[pivot][col].abs() < PIVOT_EPS {
            return Err(Singular { column: col });
        }
        a.swap(col, pivot);
        b.swap(col, pivot);

        for row in col + 1..N {
            let factor = a[row][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            for k in col..N {
                a[row][k] -= factor * a[col][k];
            }
            for k in 0..M {
                b[row][k] -= factor * b[col][k];
            }
        }
    }

    for col in (0..N).rev() {
        for k in 0..M {
            let mut acc = b[col][k];
            for j in col + 1..N {
                acc -= a[col][j] * b[j][k];
            }
            b[col][k] = acc / a[col][col];
        }
    }
    Ok(())
}

/// Inverse of `a`, or the column where elimination broke down.
pub fn invert<const N: usize>(a: &[[f64; N]; N]) -> Result<[[f64; N]; N], Singular> {
    let mut work = *a;
    let mut inv = identity::<N>();
    solve_in_place(&mut work, &mut inv)?;
    Ok(inv)
}

pub fn identity<const N: usize>() -> [[f64; N]; N] {
    let mut m = [[0.0; N]; N];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

pub fn mat_mul<const N: usize>(a: &[[f64; N]; N], b: &[[f64; N]; N]) -> [[f64; N]; N] {
    let mut out = [[0.0; N]; N];
    for i in 0..N {
        for k in 0..N {
            let aik = a[i][k];
            for j in 0..N {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

pub fn mat_vec<const N: usize>(a: &[[f64; N]; N], v: &[f64; N]) -> [f64; N] {
    let mut out = [0.0; N];
    for (o, row) in out.iter_mut().zip(a) {
        *o = row.iter().zip(v).map(|(x, y)| x * y).sum();
    }
    out
}
