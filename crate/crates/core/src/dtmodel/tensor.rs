use super::Real;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![F::zero(); shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], v: F) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[F] {
        let n = self.shape[self.shape.len() - 1];
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let n = self.shape[self.shape.len() - 1];
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: F) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64() * x.as_f64()).sum()
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| G::of(x.as_f64())).collect() }
    }
}

/// `c (m x n) = beta * c + op(a) (m x k) * op(b) (k x n)`, all row-major.
/// `ta` means `a` is stored as `k x m`; `tb` means `b` is stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<F: Real>(
    c: &mut [F],
    a: &[F],
    b: &[F],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    beta: F,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    F::gemm(m, k, n, F::one(), a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

/// `a (m x k) * b (k x n)` into a fresh buffer.
pub(crate) fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    gemm(&mut c, a, b, m, k, n, false, false, F::zero());
    c
}

/// Adds `bias` to every row of `x`.
pub(crate) fn add_bias<F: Real>(x: &mut [F], bias: &[F]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += *b;
        }
    }
}

/// Accumulates the column sums of `x` into `acc`.
pub(crate) fn acc_col_sums<F: Real>(acc: &mut [F], x: &[F]) {
    for row in x.chunks_exact(acc.len()) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += *v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(&mut c, &a, &b, 2, 2, 2, false, false, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(&mut c, &a, &b, 2, 2, 2, true, false, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(&mut c, &a, &b, 2, 2, 2, false, true, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        gemm(&mut c, &a, &b, 2, 2, 2, false, true, 1.0);
        assert_eq!(c, [34.0, 46.0, 78.0, 106.0]);
    }
}
