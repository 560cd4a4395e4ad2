//! Multi-resolution local bisquare basis and the sparse basis matrix S.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{check_locations, KnotLayout, Location, Metric};

/// Local bisquare Ψ(d) = (1 − d²)² on [0, 1], zero beyond.
pub fn bisquare(d: f64) -> Result<f64> {
    if !(d >= 0.0) {
        return Err(Error::invalid(format!(
            "bisquare argument must be nonnegative, got {d}"
        )));
    }
    Ok(bisquare_unchecked(d))
}

#[inline]
fn bisquare_unchecked(d: f64) -> f64 {
    if d <= 1.0 {
        let t = 1.0 - d * d;
        t * t
    } else {
        0.0
    }
}

/// r_l = b · (minimum inter-knot distance at resolution l).
pub fn bandwidth(layout: &KnotLayout, resolution: usize, b: f64, metric: &Metric) -> Result<f64> {
    check_b(b)?;
    Ok(b * layout.min_interknot_distance(resolution, metric)?)
}

fn check_b(b: f64) -> Result<()> {
    if b > 0.0 && b.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "bandwidth constant b must be positive, got {b}"
        )))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisConfig {
    pub b: f64,
    pub layout: KnotLayout,
    pub metric: Metric,
}

impl BasisConfig {
    pub fn new(b: f64, layout: KnotLayout, metric: Metric) -> Result<Self> {
        check_b(b)?;
        Ok(BasisConfig { b, layout, metric })
    }

    pub fn with_b(&self, b: f64) -> Result<Self> {
        Self::new(b, self.layout.clone(), self.metric)
    }

    pub fn num_basis(&self) -> usize {
        self.layout.len()
    }

    /// Bandwidth for every column of S, in column order.
    pub fn column_bandwidths(&self) -> Result<Vec<f64>> {
        let mut per_res = Vec::new();
        for l in self.layout.resolutions() {
            per_res.push((l, bandwidth(&self.layout, l, self.b, &self.metric)?));
        }
        Ok(self
            .layout
            .knots()
            .iter()
            .map(|k| per_res.iter().find(|(l, _)| *l == k.resolution).map(|p| p.1).unwrap())
            .collect())
    }
}

/// Sparse n×m basis matrix in compressed-row form. Only entries inside the
/// bisquare support are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

/// Builds S with entry (i, k) = Ψ(‖s_i − u_k‖ / r_{l(k)}).
pub fn build_basis_matrix(locations: &[Location], config: &BasisConfig) -> Result<BasisMatrix> {
    if locations.is_empty() {
        return Err(Error::invalid("no locations to evaluate the basis at"));
    }
    let dim = check_locations(locations, &config.metric)?;
    if dim != config.layout.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{dim}-D locations against {}-D knots",
            config.layout.dim()
        )));
    }
    let knots = config.layout.locations();
    check_locations(&knots, &config.metric)?;
    let radii = config.column_bandwidths()?;
    let metric = config.metric;

    let row = |s: &Location| -> Vec<(usize, f64)> {
        knots
            .iter()
            .zip(&radii)
            .enumerate()
            .filter_map(|(k, (u, &r))| {
                let d = metric.distance(s, u);
                (d <= r)
                    .then(|| (k, bisquare_unchecked(d / r)))
                    .filter(|&(_, v)| v > 0.0)
            })
            .collect()
    };
    let rows: Vec<Vec<(usize, f64)>> = if locations.len() * knots.len() > 50_000 {
        locations.par_iter().map(row).collect()
    } else {
        locations.iter().map(row).collect()
    };
    Ok(BasisMatrix::from_rows(knots.len(), rows))
}

impl BasisMatrix {
    pub fn from_rows(ncols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        row_ptr.push(0);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for r in &rows {
            for &(c, v) in r {
                debug_assert!(c < ncols);
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        BasisMatrix {
            nrows: rows.len(),
            ncols,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        BasisMatrix {
            nrows,
            ncols,
            row_ptr: vec![0; nrows + 1],
            cols: Vec::new(),
            vals: Vec::new(),
        }
    }

    /// Sparse copy of a dense matrix, dropping exact zeros.
    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let rows = (0..m.nrows())
            .map(|i| {
                (0..m.ncols())
                    .filter(|&j| m[(i, j)] != 0.0)
                    .map(|j| (j, m[(i, j)]))
                    .collect()
            })
            .collect();
        Self::from_rows(m.ncols(), rows)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    #[inline]
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.cols[a..b], &self.vals[a..b])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (c, v) = self.row(i);
        c.iter().position(|&k| k == j).map_or(0.0, |p| v[p])
    }

    /// Row subset, in the order given.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let rows = idx.iter().map(|&i| {
            let (c, v) = self.row(i);
            c.iter().copied().zip(v.iter().copied()).collect()
        });
        Self::from_rows(self.ncols, rows.collect())
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            let (c, v) = self.row(i);
            for (&j, &x) in c.iter().zip(v) {
                d[(i, j)] = x;
            }
        }
        d
    }

    /// S · B for a dense m×q matrix B.
    pub fn mul_dense(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(b.nrows(), self.ncols, "S·B inner dimension");
        let mut out = DMatrix::zeros(self.nrows, b.ncols());
        for i in 0..self.nrows {
            let (c, v) = self.row(i);
            for q in 0..b.ncols() {
                out[(i, q)] = c.iter().zip(v).map(|(&j, &x)| x * b[(j, q)]).sum();
            }
        }
        out
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.ncols, "S·x inner dimension");
        DVector::from_fn(self.nrows, |i, _| {
            let (c, v) = self.row(i);
            c.iter().zip(v).map(|(&j, &s)| s * x[j]).sum()
        })
    }

    /// S′ · B for a dense n×q matrix B.
    pub fn tr_mul_dense(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(b.nrows(), self.nrows, "S'·B inner dimension");
        let mut out = DMatrix::zeros(self.ncols, b.ncols());
        for q in 0..b.ncols() {
            for i in 0..self.nrows {
                let bi = b[(i, q)];
                if bi == 0.0 {
                    continue;
                }
                let (c, v) = self.row(i);
                for (&j, &x) in c.iter().zip(v) {
                    out[(j, q)] += x * bi;
                }
            }
        }
        out
    }

    pub fn tr_mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.nrows, "S'·x inner dimension");
        let mut out = DVector::zeros(self.ncols);
        for i in 0..self.nrows {
            let (c, v) = self.row(i);
            for (&j, &s) in c.iter().zip(v) {
                out[j] += s * x[i];
            }
        }
        out
    }

    /// S′ diag(w) S.
    pub fn weighted_gram(&self, w: &DVector<f64>) -> DMatrix<f64> {
        assert_eq!(w.len(), self.nrows);
        let mut g = DMatrix::zeros(self.ncols, self.ncols);
        for i in 0..self.nrows {
            let (c, v) = self.row(i);
            for (a, (&ja, &va)) in c.iter().zip(v).enumerate() {
                let wa = w[i] * va;
                for (&jb, &vb) in c[a..].iter().zip(&v[a..]) {
                    g[(ja.min(jb), ja.max(jb))] += wa * vb;
                }
            }
        }
        g.fill_lower_triangle_with_upper_triangle();
        g
    }

    /// Coordinate-list dump, one `row,col,value` line per stored entry.
    pub fn write_coo<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "row,col,value")?;
        for i in 0..self.nrows {
            let (c, v) = self.row(i);
            for (&j, &x) in c.iter().zip(v) {
                writeln!(w, "{i},{j},{x:?}")?;
            }
        }
        Ok(())
    }
}
