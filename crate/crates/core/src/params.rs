//! Parameter counts of the matrix factor model and its single-margin
//! alternatives.

/// Population-specific parameter counts `(matrix model, age factorization,
/// time factorization)`: `NQR + N`, `NRT + N` and `NQA + N`.
///
/// The trailing `+ N` counts one noise variance per population.
pub fn count_parameters(n: u64, q: u64, r: u64, a: u64, t: u64) -> (u64, u64, u64) {
    (n * q * r + n, n * r * t + n, n * q * a + n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_counts() {
        assert_eq!(count_parameters(188, 6, 8, 96, 22), (9_212, 33_276, 108_476));
        assert_eq!(count_parameters(1, 1, 1, 1, 1), (2, 2, 2));
        assert_eq!(count_parameters(0, 3, 4, 5, 6), (0, 0, 0));
    }
}
