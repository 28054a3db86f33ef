use super::tensor::Tensor;

/// Compressed sparse row matrix, used for neighbourhood aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets. Duplicate coordinates are summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut sorted = triplets.to_vec();
        sorted.sort_by_key(|t| (t.0, t.1));
        let mut row_ptr = vec![0; rows + 1];
        let mut col_idx = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            assert!(r < rows && c < cols, "triplet ({r}, {c}) outside ({rows}, {cols})");
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry") += v;
                continue;
            }
            last = Some((r, c));
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn matmul_dense(&self, x: &Tensor) -> Tensor {
        assert_eq!(
            self.cols,
            x.rows(),
            "sparse matmul shape mismatch: {:?} x {:?}",
            self.shape(),
            x.shape()
        );
        let mut out = Tensor::zeros(self.rows, x.cols());
        for r in 0..self.rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let (c, v) = (self.col_idx[k], self.values[k]);
                let src = x.row(c).to_vec();
                for (o, s) in out.row_mut(r).iter_mut().zip(src) {
                    *o += v * s;
                }
            }
        }
        out
    }

    /// `selfᵀ · g`.
    pub fn t_matmul_dense(&self, g: &Tensor) -> Tensor {
        assert_eq!(
            self.rows,
            g.rows(),
            "sparse transpose matmul shape mismatch: {:?}ᵀ x {:?}",
            self.shape(),
            g.shape()
        );
        let mut out = Tensor::zeros(self.cols, g.cols());
        for r in 0..self.rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let (c, v) = (self.col_idx[k], self.values[k]);
                for (o, s) in out.row_mut(c).iter_mut().zip(g.row(r)) {
                    *o += v * s;
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[k];
                out.set(r, c, out.get(r, c) + self.values[k]);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_dense_products() {
        let a = SparseMatrix::from_triplets(3, 2, &[(0, 1, 2.0), (2, 0, -1.0), (2, 0, 0.5), (1, 1, 3.0)]);
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(a.matmul_dense(&x), a.to_dense().matmul(&x));
        let g = Tensor::from_rows(&[vec![1.0], vec![-2.0], vec![0.5]]);
        assert_eq!(a.t_matmul_dense(&g), a.to_dense().t_matmul(&g));
        assert_eq!(a.nnz(), 3);
    }
}
