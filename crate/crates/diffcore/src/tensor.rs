use crate::error::{DiffError, Result};

/// Dense row-major tensor of `f64`.
///
/// A tensor with an empty shape is a scalar and holds exactly one value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(DiffError::DataLength { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(DiffError::DataLength {
                    shape: vec![rows.len(), cols],
                    len: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |k| if k / n == k % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(DiffError::NotMatrix {
                shape: self.shape.clone(),
            }),
        }
    }

    /// Flat offset of a multi-index. Panics when the index is out of bounds.
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| {
            assert!(i < n, "index {index:?} out of bounds for {:?}", self.shape);
            acc * n + i
        })
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let k = self.offset(index);
        self.data[k] = value;
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(DiffError::Reshape {
                from: self.shape,
                to: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(DiffError::MatmulShape {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &other.data, false, &mut out, false);
        Tensor::new(vec![m, n], out)
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let shapes: Vec<&[usize]> = parts.iter().map(|p| p.shape()).collect();
        let shape = concat_shape(&shapes, axis)?;
        let datas: Vec<&[f64]> = parts.iter().map(|p| p.data()).collect();
        let data = concat_data(&shapes, &datas, axis);
        Tensor::new(shape, data)
    }

    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        check_slice(&self.shape, axis, start, len)?;
        let mut shape = self.shape.clone();
        shape[axis] = len;
        let data = slice_data(&self.shape, &self.data, axis, start, len);
        Tensor::new(shape, data)
    }
}

/// `c = op(a)·op(b)` (or `c += ...` when `accumulate`), with `op(a)` m×k and
/// `op(b)` k×n. `*_trans` means the stored buffer holds the transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices hold exactly m·k, k·n and m·n elements (asserted
    // above) and the strides describe dense row-major layouts of those buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `(outer, extent, inner)` decomposition of a shape around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn concat_shape(shapes: &[&[usize]], axis: usize) -> Result<Vec<usize>> {
    let first = shapes.first().ok_or(DiffError::EmptyConcat)?;
    if axis >= first.len() {
        return Err(DiffError::Axis {
            axis,
            rank: first.len(),
        });
    }
    let mut out = first.to_vec();
    for (index, s) in shapes.iter().enumerate().skip(1) {
        let compatible = s.len() == first.len()
            && s.iter()
                .zip(first.iter())
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !compatible {
            return Err(DiffError::ConcatShape {
                axis,
                index,
                first: first.to_vec(),
                shape: s.to_vec(),
            });
        }
        out[axis] += s[axis];
    }
    Ok(out)
}

pub(crate) fn concat_data(shapes: &[&[usize]], datas: &[&[f64]], axis: usize) -> Vec<f64> {
    let total: usize = datas.iter().map(|d| d.len()).sum();
    let mut out = Vec::with_capacity(total);
    let (outer, _, _) = axis_split(shapes[0], axis);
    let chunks: Vec<usize> = shapes
        .iter()
        .map(|s| {
            let (_, extent, inner) = axis_split(s, axis);
            extent * inner
        })
        .collect();
    for o in 0..outer {
        for (d, &chunk) in datas.iter().zip(&chunks) {
            out.extend_from_slice(&d[o * chunk..(o + 1) * chunk]);
        }
    }
    out
}

pub(crate) fn check_slice(shape: &[usize], axis: usize, start: usize, len: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(DiffError::Axis {
            axis,
            rank: shape.len(),
        });
    }
    if start + len > shape[axis] {
        return Err(DiffError::SliceRange {
            axis,
            start,
            end: start + len,
            extent: shape[axis],
        });
    }
    Ok(())
}

pub(crate) fn slice_data(shape: &[usize], data: &[f64], axis: usize, start: usize, len: usize) -> Vec<f64> {
    let (outer, extent, inner) = axis_split(shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * extent * inner + start * inner;
        out.extend_from_slice(&data[base..base + len * inner]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_matrix_is_matrix() {
        let m = Tensor::from_fn(&[3, 3], |k| k as f64 * 0.5 - 1.0);
        assert_eq!(Tensor::identity(3).matmul(&m).unwrap(), m);
    }

    #[test]
    fn small_matmul_by_hand() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_mismatch_reports_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        assert_eq!(
            err,
            DiffError::MatmulShape {
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3] x [2, 3]"));
    }

    #[test]
    fn transposed_gemm_matches_explicit_transpose() {
        let a = Tensor::from_fn(&[3, 2], |k| k as f64 + 1.0);
        let b = Tensor::from_fn(&[3, 4], |k| (k as f64).sin());
        // aᵀ·b with a stored as 3x2
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, a.data(), true, b.data(), false, &mut c, false);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a.at(&[p, i]) * b.at(&[p, j])).sum();
                assert!((c[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concat_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 4]);
        assert_eq!(Tensor::concat(&[&a], 1).unwrap().shape(), &[2, 3]);
        assert_eq!(Tensor::concat(&[&a, &b], 1).unwrap().shape(), &[2, 7]);
        assert!(matches!(
            Tensor::concat(&[&a, &b], 0),
            Err(DiffError::ConcatShape { index: 1, .. })
        ));
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let a = Tensor::from_fn(&[2, 3, 2], |k| k as f64);
        let b = Tensor::from_fn(&[2, 1, 2], |k| -(k as f64));
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.slice_axis(1, 0, 3).unwrap(), a);
        assert_eq!(c.slice_axis(1, 3, 1).unwrap(), b);
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert_eq!(Tensor::scalar(4.0).item(), Some(4.0));
    }
}
