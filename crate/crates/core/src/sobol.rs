//! Sobol low-discrepancy sequences for up to 8 dimensions.
//!
//! Direction numbers are the Joe-Kuo primitive-polynomial set for the first
//! eight dimensions; the all-zeros origin point is skipped.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SobolError {
    #[error("dimension {0} unsupported (embedded direction numbers cover d <= {MAX_DIM})")]
    DimensionUnsupported(usize),
    #[error("invalid box: lower must be < upper elementwise")]
    InvalidBounds,
}

pub const MAX_DIM: usize = 8;
const BITS: usize = 32;

// (s, a, m[..s]) per dimension beyond the first; dimension 1 is the van der
// Corput sequence in base 2.
const PARAMS: [(usize, u32, [u32; 5]); 7] = [
    (1, 0, [1, 0, 0, 0, 0]),
    (2, 1, [1, 3, 0, 0, 0]),
    (3, 1, [1, 3, 1, 0, 0]),
    (3, 2, [1, 1, 1, 0, 0]),
    (4, 1, [1, 1, 3, 3, 0]),
    (4, 4, [1, 3, 5, 13, 0]),
    (5, 2, [1, 1, 5, 5, 17]),
];

fn direction_numbers(dim: usize) -> [u32; BITS] {
    let mut v = [0u32; BITS];
    if dim == 0 {
        for (i, vi) in v.iter_mut().enumerate() {
            *vi = 1 << (31 - i);
        }
        return v;
    }
    let (s, a, m) = PARAMS[dim - 1];
    for i in 0..s {
        v[i] = m[i] << (31 - i);
    }
    for i in s..BITS {
        let mut vi = v[i - s] ^ (v[i - s] >> s);
        for k in 1..s {
            if (a >> (s - 1 - k)) & 1 == 1 {
                vi ^= v[i - k];
            }
        }
        v[i] = vi;
    }
    v
}

/// First `n` Sobol points in the unit hypercube [0, 1)^d, origin skipped.
pub fn sobol_unit(n: usize, d: usize) -> Result<Vec<Vec<f64>>, SobolError> {
    if d == 0 || d > MAX_DIM {
        return Err(SobolError::DimensionUnsupported(d));
    }
    let dirs: Vec<[u32; BITS]> = (0..d).map(direction_numbers).collect();
    let mut state = vec![0u32; d];
    let mut out = Vec::with_capacity(n);
    // Gray-code update: point index i uses direction bit ctz(i).
    for i in 1..=n as u64 {
        let c = (i - 1).trailing_ones() as usize;
        for (j, s) in state.iter_mut().enumerate() {
            *s ^= dirs[j][c];
        }
        out.push(state.iter().map(|&x| x as f64 / (1u64 << 32) as f64).collect());
    }
    Ok(out)
}

/// First `n` Sobol points scaled to the box [lower, upper].
pub fn sobol(n: usize, d: usize, lower: &[f64], upper: &[f64]) -> Result<Vec<Vec<f64>>, SobolError> {
    if lower.len() != d || upper.len() != d || lower.iter().zip(upper).any(|(l, u)| l >= u) {
        return Err(SobolError::InvalidBounds);
    }
    let pts = sobol_unit(n, d)?;
    Ok(pts
        .into_iter()
        .map(|p| {
            p.iter()
                .enumerate()
                .map(|(j, &x)| lower[j] + x * (upper[j] - lower[j]))
                .collect()
        })
        .collect())
}
