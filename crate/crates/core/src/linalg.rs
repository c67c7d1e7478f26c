//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Eigen-decomposition of a symmetric matrix, sorted by decreasing eigenvalue.
#[derive(Debug, Clone)]
pub struct SortedEigen {
    pub values: Vec<f64>,
    /// Eigenvectors as columns, in the order of `values`.
    pub vectors: DMatrix<f64>,
}

/// Flips `v` so that its component of largest magnitude is positive.
/// Magnitude ties (to 1e-12 relative) resolve to the lowest index.
pub fn orient(v: &mut [f64]) -> bool {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if max == 0.0 {
        return false;
    }
    let pivot = v
        .iter()
        .position(|x| x.abs() >= max * (1.0 - 1e-12))
        .unwrap_or(0);
    if v[pivot] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
        true
    } else {
        false
    }
}

/// Symmetric eigen-decomposition with eigenpairs sorted by (eigenvalue desc,
/// solver index asc) and each eigenvector oriented by [`orient`].
pub fn sym_eigen(m: &DMatrix<f64>) -> SortedEigen {
    let n = m.nrows();
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut vectors = DMatrix::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        values.push(eig.eigenvalues[src]);
        let mut col: Vec<f64> = eig.eigenvectors.column(src).iter().copied().collect();
        orient(&mut col);
        vectors.set_column(dst, &DVector::from_vec(col));
    }
    SortedEigen { values, vectors }
}

/// Singular triplets sorted by decreasing singular value. Left vectors are
/// oriented by [`orient`]; right vectors follow the same sign.
#[derive(Debug, Clone)]
pub struct SortedSvd {
    pub values: Vec<f64>,
    pub left: DMatrix<f64>,
    pub right: DMatrix<f64>,
}

pub fn svd(m: &DMatrix<f64>) -> SortedSvd {
    let k = m.nrows().min(m.ncols());
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut left = DMatrix::zeros(m.nrows(), k);
    let mut right = DMatrix::zeros(m.ncols(), k);
    let mut values = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        values.push(svd.singular_values[src]);
        let mut l: Vec<f64> = u.column(src).iter().copied().collect();
        let mut r: Vec<f64> = v_t.row(src).iter().copied().collect();
        if orient(&mut l) {
            r.iter_mut().for_each(|x| *x = -*x);
        }
        left.set_column(dst, &DVector::from_vec(l));
        right.set_column(dst, &DVector::from_vec(r));
    }
    SortedSvd {
        values,
        left,
        right,
    }
}

/// (M + M^T) / 2.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Uncentered second-moment matrix (1/T) X^T X of a T×N panel.
pub fn second_moment(x: &DMatrix<f64>) -> DMatrix<f64> {
    let t = x.nrows() as f64;
    let mut c = x.tr_mul(x) / t;
    // tr_mul is symmetric up to rounding; make it exact.
    for i in 0..c.nrows() {
        for j in 0..i {
            let v = c[(j, i)];
            c[(i, j)] = v;
        }
    }
    c
}

/// Population mean and standard deviation of a column slice.
pub fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Pearson correlation with population moments.
pub fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let (mx, sx) = mean_std(x.iter().copied());
    let (my, sy) = mean_std(y.iter().copied());
    let n = x.len() as f64;
    let cov = x
        .iter()
        .zip(y)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / n;
    cov / (sx * sy)
}

/// Cosine similarity of two vectors.
pub fn cosine(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx: f64 = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ny: f64 = y.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nx * ny)
}
