//! Structure descriptors built from backbone keys.

use candle_core::{DType, Tensor, D};
use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::exec::{self, ExecPolicy};

/// Norms at or below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// Cosine self-similarity of key rows.
///
/// `keys` is `(N, d)` or `(B, N, d)`; the result is `(N, N)` or `(B, N, N)`.
/// Differentiable with respect to `keys`. A row whose norm is at most
/// [`ZERO_NORM`] is an error rather than being silently regularized.
pub fn key_self_similarity(keys: &Tensor) -> Result<Tensor> {
    let norms = keys.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let host: Vec<f64> = norms.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let rows = keys.dim(D::Minus2)?;
    if let Some(i) = host.iter().position(|n| !(*n > ZERO_NORM)) {
        return Err(Error::ZeroNormKey { row: i % rows });
    }
    let unit = keys.broadcast_div(&norms)?;
    let s = unit.matmul(&unit.transpose(D::Minus2, D::Minus1)?)?;
    Ok(s.clamp(-1.0, 1.0)?)
}

/// Row-major `(rows × rows)` self-similarity of a row-major `(rows × cols)` key matrix.
pub fn self_similarity_host(keys: &[f64], rows: usize, cols: usize, policy: ExecPolicy) -> Result<Vec<f64>> {
    if keys.len() != rows * cols {
        return Err(Error::Shape(format!(
            "{} values cannot form a {rows}x{cols} matrix",
            keys.len()
        )));
    }
    let norms = exec::map_indexed(policy, rows, |i| {
        keys[i * cols..(i + 1) * cols].iter().map(|v| v * v).sum::<f64>().sqrt()
    });
    if let Some(row) = norms.iter().position(|n| !(*n > ZERO_NORM)) {
        return Err(Error::ZeroNormKey { row });
    }
    let mut out = vec![0f64; rows * rows];
    exec::for_each_chunk_mut(policy, &mut out, rows, |i, dst| {
        let ki = &keys[i * cols..(i + 1) * cols];
        for (j, o) in dst.iter_mut().enumerate() {
            let kj = &keys[j * cols..(j + 1) * cols];
            let dot: f64 = ki.iter().zip(kj).map(|(a, b)| a * b).sum();
            *o = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
        }
    });
    Ok(out)
}

/// Top principal components of the spatial rows of a self-similarity matrix.
#[derive(Debug, Clone)]
pub struct PcaMap {
    pub grid: (usize, usize),
    pub k: usize,
    /// `n × k` row-major projections, each column min-max scaled to `[0, 1]`.
    pub components: Vec<f64>,
    /// Fraction of total variance carried by each returned component.
    pub explained: Vec<f64>,
    /// Set when the spectrum cannot order the returned components (ties or no variance).
    pub degenerate: bool,
}

impl PcaMap {
    /// Component `c` as a `grid.0 × grid.1` row-major map.
    pub fn component(&self, c: usize) -> Vec<f64> {
        (0..self.grid.0 * self.grid.1)
            .map(|i| self.components[i * self.k + c])
            .collect()
    }
}

/// PCA of the spatial block of `s`.
///
/// `s` is `(n+1) × (n+1)` with the [CLS] row and column first; they are
/// dropped so components map onto the `grid` of `n` patches. Rows are centered
/// on the mean row before the eigendecomposition.
pub fn selfsim_pca(s: &Tensor, grid: (usize, usize), k: usize) -> Result<PcaMap> {
    let s = if s.rank() == 3 { s.squeeze(0)? } else { s.clone() };
    let (rows, cols) = s.dims2()?;
    let n = grid.0 * grid.1;
    if rows != cols || rows != n + 1 {
        return Err(Error::Shape(format!(
            "self-similarity is {rows}x{cols}, expected {0}x{0} for a {1}x{2} grid",
            n + 1,
            grid.0,
            grid.1
        )));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "component count {k} must be in 1..={n}"
        )));
    }
    let spatial: Vec<f64> = s
        .narrow(0, 1, n)?
        .narrow(1, 1, n)?
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1()?;
    let x = DMatrix::from_row_slice(n, n, &spatial);
    let mean = x.row_mean();
    let mut xc = x.clone();
    for mut r in xc.row_iter_mut() {
        r -= &mean;
    }
    let denom = (n.max(2) - 1) as f64;
    let cov = (xc.transpose() * &xc) / denom;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();

    let lambda = |i: usize| eig.eigenvalues[order[i]].max(0.0);
    let scale = lambda(0).max(f64::MIN_POSITIVE);
    let tie = |a: f64, b: f64| (a - b).abs() <= 1e-9 * scale;
    let mut degenerate = total <= 1e-15;
    for i in 0..k {
        if i + 1 < n && tie(lambda(i), lambda(i + 1)) {
            degenerate = true;
        }
    }

    let mut components = vec![0f64; n * k];
    let mut explained = Vec::with_capacity(k);
    for c in 0..k {
        let mut v = eig.eigenvectors.column(order[c]).clone_owned();
        // Fix the sign so the largest-magnitude entry is positive.
        let (imax, _) = v
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |acc, (i, x)| if x.abs() > acc.1 { (i, x.abs()) } else { acc });
        if v[imax] < 0.0 {
            v = -v;
        }
        let proj = &xc * v;
        let (lo, hi) = proj
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &p| (l.min(p), h.max(p)));
        let range = hi - lo;
        for i in 0..n {
            components[i * k + c] = if range > 0.0 { (proj[i] - lo) / range } else { 0.0 };
        }
        explained.push(if total > 0.0 { lambda(c) / total } else { 0.0 });
    }
    Ok(PcaMap {
        grid,
        k,
        components,
        explained,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(rows: &[&[f64]]) -> Tensor {
        let n = rows.len();
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(flat, (n, d), &Device::Cpu).unwrap()
    }

    fn host(s: &Tensor) -> Vec<Vec<f64>> {
        s.to_vec2().unwrap()
    }

    #[test]
    fn two_row_example() {
        let s = host(&key_self_similarity(&t(&[&[1.0, 0.0], &[1.0, 1.0]])).unwrap());
        let c = std::f64::consts::FRAC_1_SQRT_2;
        assert!((s[0][0] - 1.0).abs() < 1e-12);
        assert!((s[1][1] - 1.0).abs() < 1e-12);
        assert!((s[0][1] - c).abs() < 1e-8);
        assert!((s[1][0] - c).abs() < 1e-8);
    }

    #[test]
    fn identical_rows_give_all_ones() {
        let row: &[f64] = &[0.3, -2.0, 1.0];
        let s = host(&key_self_similarity(&t(&[row; 4])).unwrap());
        assert!(s.iter().flatten().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn orthogonal_rows_give_identity() {
        let s = host(&key_self_similarity(&t(&[&[2.0, 0.0, 0.0], &[0.0, -3.0, 0.0], &[0.0, 0.0, 0.5]])).unwrap());
        for (i, r) in s.iter().enumerate() {
            for (j, v) in r.iter().enumerate() {
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_row_is_reported() {
        let err = key_self_similarity(&t(&[&[1.0, 2.0], &[0.0, 0.0], &[3.0, 1.0]])).unwrap_err();
        assert!(matches!(err, Error::ZeroNormKey { row: 1 }));
        let err = self_similarity_host(&[1.0, 0.0, 0.0, 0.0], 2, 2, ExecPolicy::Sequential).unwrap_err();
        assert!(matches!(err, Error::ZeroNormKey { row: 1 }));
    }

    #[test]
    fn batched_matches_unbatched() {
        let k = t(&[&[1.0, 0.5], &[-0.2, 1.0], &[0.3, 0.3]]);
        let single = host(&key_self_similarity(&k).unwrap());
        let batched = key_self_similarity(&k.unsqueeze(0).unwrap()).unwrap();
        assert_eq!(batched.dims(), &[1, 3, 3]);
        assert_eq!(host(&batched.squeeze(0).unwrap()), single);
    }

    #[test]
    fn host_matches_tensor() {
        let keys: Vec<f64> = (0..35).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let h = self_similarity_host(&keys, 7, 5, ExecPolicy::Parallel).unwrap();
        let s = key_self_similarity(&Tensor::from_vec(keys, (7, 5), &Device::Cpu).unwrap()).unwrap();
        let s: Vec<f64> = s.flatten_all().unwrap().to_vec1().unwrap();
        for (a, b) in h.iter().zip(&s) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pca_rejects_bad_k() {
        let s = Tensor::eye(5, DType::F64, &Device::Cpu).unwrap();
        assert!(selfsim_pca(&s, (2, 2), 0).is_err());
        assert!(selfsim_pca(&s, (2, 2), 5).is_err());
        assert!(selfsim_pca(&s, (2, 3), 1).is_err());
    }

    #[test]
    fn identity_spectrum_is_flagged() {
        let s = Tensor::eye(17, DType::F64, &Device::Cpu).unwrap();
        let pca = selfsim_pca(&s, (4, 4), 3).unwrap();
        assert!(pca.degenerate);
        assert_eq!(pca.components.len(), 16 * 3);
        assert!(pca.components.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!((pca.explained[0] - pca.explained[2]).abs() < 1e-9);
    }

    #[test]
    fn components_are_unit_range() {
        let keys: Vec<f64> = (0..17 * 6).map(|i| ((i * 13 % 29) as f64 - 14.0) / 7.0 + 0.1).collect();
        let s = key_self_similarity(&Tensor::from_vec(keys, (17, 6), &Device::Cpu).unwrap()).unwrap();
        let pca = selfsim_pca(&s, (4, 4), 3).unwrap();
        for c in 0..3 {
            let comp = pca.component(c);
            let lo = comp.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = comp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(lo.abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
        }
        assert!(pca.explained.windows(2).all(|w| w[0] >= w[1]));
    }
}
