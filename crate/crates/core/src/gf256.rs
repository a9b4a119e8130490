//! GF(2^8) arithmetic with the 0x11d reduction polynomial.

const POLY: u16 = 0x11d;

const fn build_tables() -> ([u8; 512], [u8; 256]) {
    let mut exp = [0u8; 512];
    let mut log = [0u8; 256];
    let mut x: u16 = 1;
    let mut i = 0;
    while i < 255 {
        exp[i] = x as u8;
        log[x as usize] = i as u8;
        x <<= 1;
        if x & 0x100 != 0 {
            x ^= POLY;
        }
        i += 1;
    }
    while i < 512 {
        exp[i] = exp[i - 255];
        i += 1;
    }
    (exp, log)
}

const TABLES: ([u8; 512], [u8; 256]) = build_tables();
const EXP: [u8; 512] = TABLES.0;
const LOG: [u8; 256] = TABLES.1;

#[inline]
pub fn mul(a: u8, b: u8) -> u8 {
    if a == 0 || b == 0 {
        0
    } else {
        EXP[LOG[a as usize] as usize + LOG[b as usize] as usize]
    }
}

#[inline]
pub fn inv(a: u8) -> u8 {
    assert!(a != 0, "zero has no inverse in GF(256)");
    EXP[255 - LOG[a as usize] as usize]
}

pub fn pow(a: u8, e: u32) -> u8 {
    if e == 0 {
        return 1;
    }
    if a == 0 {
        return 0;
    }
    EXP[(LOG[a as usize] as u32 * e % 255) as usize]
}

/// Gauss-Jordan inversion of a square matrix; `None` if singular.
pub fn invert_matrix(rows: &[Vec<u8>]) -> Option<Vec<Vec<u8>>> {
    let n = rows.len();
    let mut a: Vec<Vec<u8>> = rows.to_vec();
    let mut inv_m: Vec<Vec<u8>> = (0..n)
        .map(|i| (0..n).map(|j| u8::from(i == j)).collect())
        .collect();
    for col in 0..n {
        let pivot = (col..n).find(|&r| a[r][col] != 0)?;
        a.swap(col, pivot);
        inv_m.swap(col, pivot);
        let scale = inv(a[col][col]);
        for j in 0..n {
            a[col][j] = mul(a[col][j], scale);
            inv_m[col][j] = mul(inv_m[col][j], scale);
        }
        for r in 0..n {
            if r != col && a[r][col] != 0 {
                let f = a[r][col];
                for j in 0..n {
                    a[r][j] ^= mul(f, a[col][j]);
                    inv_m[r][j] ^= mul(f, inv_m[col][j]);
                }
            }
        }
    }
    Some(inv_m)
}

/// Inverse of the Vandermonde matrix with rows `(1, x, x^2, ...)` for the
/// given distinct points, in `O(t^2)`.
///
/// Column `i` holds the coefficients of the Lagrange basis polynomial of
/// `points[i]`.
pub fn vandermonde_inverse(points: &[u8]) -> Option<Vec<Vec<u8>>> {
    let t = points.len();
    // master polynomial prod (x + a), lowest coefficient first
    let mut master = vec![0u8; t + 1];
    master[0] = 1;
    for (deg, &a) in points.iter().enumerate() {
        for j in (1..=deg + 1).rev() {
            master[j] = master[j - 1] ^ mul(master[j], a);
        }
        master[0] = mul(master[0], a);
    }
    let mut out = vec![vec![0u8; t]; t];
    let mut q = vec![0u8; t];
    for (i, &a) in points.iter().enumerate() {
        // master / (x + a) by synthetic division
        q[t - 1] = master[t];
        for j in (1..t).rev() {
            q[j - 1] = master[j] ^ mul(a, q[j]);
        }
        let at_a = q.iter().rev().fold(0u8, |acc, &coef| mul(acc, a) ^ coef);
        if at_a == 0 {
            return None;
        }
        let w = inv(at_a);
        for j in 0..t {
            out[j][i] = mul(w, q[j]);
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    // carry-less multiply then reduce, bit by bit
    fn slow_mul(a: u8, b: u8) -> u8 {
        let mut acc: u16 = 0;
        for i in 0..8 {
            if b >> i & 1 == 1 {
                acc ^= (a as u16) << i;
            }
        }
        for bit in (8..16).rev() {
            if acc >> bit & 1 == 1 {
                acc ^= POLY << (bit - 8);
            }
        }
        acc as u8
    }

    #[test]
    fn table_mul_matches_bitwise_mul() {
        for a in 0..=255u8 {
            for b in 0..=255u8 {
                assert_eq!(mul(a, b), slow_mul(a, b));
            }
        }
    }

    #[test]
    fn fast_vandermonde_inverse_matches_gauss_jordan() {
        for points in [vec![1u8], vec![1, 2], vec![3, 7, 9, 200], (1..=40).collect::<Vec<u8>>()] {
            let rows: Vec<Vec<u8>> = points
                .iter()
                .map(|&x| (0..points.len()).map(|j| pow(x, j as u32)).collect())
                .collect();
            assert_eq!(vandermonde_inverse(&points), invert_matrix(&rows));
        }
        assert_eq!(vandermonde_inverse(&[4, 4]), None);
    }

    #[test]
    fn inverses() {
        for a in 1..=255u8 {
            assert_eq!(mul(a, inv(a)), 1);
        }
    }
}
