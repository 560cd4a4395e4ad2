//! File formats: observation and target CSVs, prediction CSVs and the
//! fitted-model file.
//!
//! Observation CSVs carry a header. `coord1` (and `coord2` for 2-D data) give
//! the location, `y` the response, and the optional `v_delta` / `v_eps`
//! columns the variance weights. Every other column is a covariate. An
//! intercept column is prepended to the design matrix unless disabled.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Knot, KnotLayout, Location, Metric};
use crate::model::{Dataset, FitResult, SmeParams};
use crate::prediction::KrigingOutput;

pub const FIT_FORMAT_VERSION: u32 = 1;

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize);
    Error::data(line, e.to_string())
}

struct Columns {
    coords: Vec<usize>,
    covariates: Vec<usize>,
    covariate_names: Vec<String>,
    y: Option<usize>,
    vdelta: Option<usize>,
    veps: Option<usize>,
}

fn classify(headers: &csv::StringRecord, need_y: bool) -> Result<Columns> {
    let find = |name: &str| headers.iter().position(|h| h == name);
    let mut coords = vec![find("coord1").ok_or_else(|| Error::data(Some(1), "missing column 'coord1'"))?];
    coords.extend(find("coord2"));
    let y = find("y");
    if need_y && y.is_none() {
        return Err(Error::data(Some(1), "missing column 'y'"));
    }
    let (vdelta, veps) = (find("v_delta"), find("v_eps"));
    let reserved = ["coord1", "coord2", "y", "v_delta", "v_eps"];
    let mut covariates = Vec::new();
    let mut covariate_names = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        if !reserved.contains(&h) {
            covariates.push(i);
            covariate_names.push(h.to_string());
        }
    }
    Ok(Columns {
        coords,
        covariates,
        covariate_names,
        y,
        vdelta,
        veps,
    })
}

fn field(rec: &csv::StringRecord, i: usize, line: usize, headers: &csv::StringRecord) -> Result<f64> {
    let raw = rec
        .get(i)
        .ok_or_else(|| Error::data(Some(line), format!("missing value for '{}'", &headers[i])))?;
    let v: f64 = raw.parse().map_err(|_| {
        Error::data(
            Some(line),
            format!("column '{}': cannot parse '{raw}' as a number", &headers[i]),
        )
    })?;
    if !v.is_finite() {
        return Err(Error::data(
            Some(line),
            format!("column '{}' is not finite", &headers[i]),
        ));
    }
    Ok(v)
}

/// Rows of a located table: locations, covariates, optional y and weights.
pub struct Table {
    pub locations: Vec<Location>,
    pub covariates: DMatrix<f64>,
    pub covariate_names: Vec<String>,
    pub y: Option<DVector<f64>>,
    pub vdelta: Option<DVector<f64>>,
    pub veps: Option<DVector<f64>>,
}

impl Table {
    /// Design matrix, with a leading column of ones when `intercept` is set.
    pub fn design(&self, intercept: bool) -> DMatrix<f64> {
        let n = self.locations.len();
        if !intercept {
            return self.covariates.clone();
        }
        let mut x = DMatrix::from_element(n, self.covariates.ncols() + 1, 1.0);
        x.view_mut((0, 1), (n, self.covariates.ncols()))
            .copy_from(&self.covariates);
        x
    }
}

pub fn read_table<R: Read>(r: R, need_y: bool) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let cols = classify(&headers, need_y)?;
    let mut locations = Vec::new();
    let mut cov = Vec::new();
    let (mut y, mut vd, mut ve) = (Vec::new(), Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::data(Some(line), e.to_string()))?;
        if rec.len() != headers.len() {
            return Err(Error::data(
                Some(line),
                format!("expected {} fields, found {}", headers.len(), rec.len()),
            ));
        }
        let c = cols
            .coords
            .iter()
            .map(|&j| field(&rec, j, line, &headers))
            .collect::<Result<Vec<_>>>()?;
        locations.push(Location::from_slice(&c).map_err(|e| Error::data(Some(line), e.to_string()))?);
        for &j in &cols.covariates {
            cov.push(field(&rec, j, line, &headers)?);
        }
        if let Some(j) = cols.y {
            y.push(field(&rec, j, line, &headers)?);
        }
        for (col, out) in [(cols.vdelta, &mut vd), (cols.veps, &mut ve)] {
            if let Some(j) = col {
                let v = field(&rec, j, line, &headers)?;
                if !(v > 0.0) {
                    return Err(Error::data(
                        Some(line),
                        format!("column '{}' must be positive", &headers[j]),
                    ));
                }
                out.push(v);
            }
        }
    }
    let n = locations.len();
    if n == 0 {
        return Err(Error::data(None, "no data rows"));
    }
    let p = cols.covariates.len();
    Ok(Table {
        locations,
        covariates: DMatrix::from_row_slice(n, p, &cov),
        covariate_names: cols.covariate_names,
        y: cols.y.map(|_| DVector::from_vec(y)),
        vdelta: cols.vdelta.map(|_| DVector::from_vec(vd)),
        veps: cols.veps.map(|_| DVector::from_vec(ve)),
    })
}

/// Reads an observation CSV into a dataset. Missing weight columns default
/// to one.
pub fn read_observations<R: Read>(r: R, intercept: bool) -> Result<Dataset> {
    let t = read_table(r, true)?;
    let n = t.locations.len();
    let x = t.design(intercept);
    if x.ncols() == 0 {
        return Err(Error::data(None, "no covariates and no intercept"));
    }
    Dataset::new(
        t.locations.clone(),
        x,
        t.y.clone().expect("y is required"),
        t.vdelta.clone().unwrap_or_else(|| DVector::from_element(n, 1.0)),
        t.veps.clone().unwrap_or_else(|| DVector::from_element(n, 1.0)),
    )
}

fn coord_header(dim: usize) -> Vec<String> {
    (1..=dim).map(|i| format!("coord{i}")).collect()
}

/// Writes observations with the covariate columns named `x1..xq`. When
/// `intercept` is set, the first design column is assumed to be the
/// intercept and is not written.
pub fn write_observations<W: Write>(w: W, data: &Dataset, intercept: bool) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let dim = data.locations.first().map_or(1, |l| l.dim());
    let skip = usize::from(intercept);
    let mut header = coord_header(dim);
    header.extend((skip..data.p()).map(|j| format!("x{}", j + 1 - skip)));
    header.extend(["y", "v_delta", "v_eps"].map(String::from));
    out.write_record(&header).map_err(csv_err)?;
    for i in 0..data.n() {
        let mut rec: Vec<String> = data.locations[i].coords().iter().map(|c| format!("{c:?}")).collect();
        rec.extend((skip..data.p()).map(|j| format!("{:?}", data.x[(i, j)])));
        rec.push(format!("{:?}", data.y[i]));
        rec.push(format!("{:?}", data.vdelta[i]));
        rec.push(format!("{:?}", data.veps[i]));
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush().map_err(|e| Error::data(None, e.to_string()))
}

/// Writes predictions with the interval bounds and, optionally, the trend
/// and spatial columns (which sum to `yhat`).
pub fn write_predictions<W: Write>(
    w: W,
    targets: &[Location],
    out: &KrigingOutput,
    intervals: &[(f64, f64)],
    decompose: bool,
) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let dim = targets.first().map_or(1, |l| l.dim());
    let mut header = coord_header(dim);
    header.extend(["yhat", "kse", "lo", "hi"].map(String::from));
    if decompose {
        header.extend(["trend", "spatial"].map(String::from));
    }
    wr.write_record(&header).map_err(csv_err)?;
    for (i, t) in targets.iter().enumerate() {
        let mut rec: Vec<String> = t.coords().iter().map(|c| format!("{c:?}")).collect();
        rec.push(format!("{:?}", out.yhat[i]));
        rec.push(format!("{:?}", out.kse[i]));
        rec.push(format!("{:?}", intervals[i].0));
        rec.push(format!("{:?}", intervals[i].1));
        if decompose {
            rec.push(format!("{:?}", out.trend[i]));
            rec.push(format!("{:?}", out.spatial[i]));
        }
        wr.write_record(&rec).map_err(csv_err)?;
    }
    wr.flush().map_err(|e| Error::data(None, e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotRecord {
    pub resolution: usize,
    pub coords: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsRecord {
    /// Rows of K.
    pub k: Vec<Vec<f64>>,
    pub sigma_delta2: f64,
    pub sigma_eps2: f64,
    pub beta: Vec<f64>,
    pub b: f64,
}

impl ParamsRecord {
    pub fn from_params(p: &SmeParams) -> Self {
        ParamsRecord {
            k: p.k.row_iter().map(|r| r.iter().copied().collect()).collect(),
            sigma_delta2: p.sigma_delta2,
            sigma_eps2: p.sigma_eps2(),
            beta: p.beta.iter().copied().collect(),
            b: p.b,
        }
    }

    pub fn to_params(&self) -> Result<SmeParams> {
        let m = self.k.len();
        if self.k.iter().any(|r| r.len() != m) {
            return Err(Error::data(None, "K is not square"));
        }
        let k = DMatrix::from_fn(m, m, |i, j| self.k[i][j]);
        SmeParams::new(
            k,
            self.sigma_delta2,
            self.sigma_eps2,
            DVector::from_vec(self.beta.clone()),
            self.b,
        )
    }
}

/// Fitted model as stored on disk (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitFile {
    pub format_version: u32,
    pub method: String,
    pub metric: Metric,
    /// Whether the design matrix has a prepended intercept column.
    pub intercept: bool,
    pub covariates: Vec<String>,
    pub knots: Vec<KnotRecord>,
    pub params: ParamsRecord,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub ridge_events: usize,
    /// Smallest and largest eigenvalue of K̂.
    pub k_eigen_range: (f64, f64),
    pub loglik_trace: Vec<f64>,
    pub b_trace: Vec<f64>,
}

impl FitFile {
    pub fn new(
        method: &str,
        metric: Metric,
        intercept: bool,
        covariates: Vec<String>,
        layout: &KnotLayout,
        fit: &FitResult,
    ) -> Self {
        let eig = fit.params.k.clone().symmetric_eigenvalues();
        FitFile {
            format_version: FIT_FORMAT_VERSION,
            method: method.to_string(),
            metric,
            intercept,
            covariates,
            knots: layout
                .knots()
                .iter()
                .map(|k| KnotRecord {
                    resolution: k.resolution,
                    coords: k.location.coords().to_vec(),
                })
                .collect(),
            params: ParamsRecord::from_params(&fit.params),
            loglik: fit.final_loglik(),
            converged: fit.converged,
            iterations: fit.iterations,
            ridge_events: fit.ridge_events,
            k_eigen_range: (eig.min(), eig.max()),
            loglik_trace: fit.loglik_trace.iter().map(|t| t.loglik).collect(),
            b_trace: fit.b_trace.clone(),
        }
    }

    pub fn layout(&self) -> Result<KnotLayout> {
        let knots = self
            .knots
            .iter()
            .map(|k| {
                Ok(Knot {
                    location: Location::from_slice(&k.coords)?,
                    resolution: k.resolution,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        KnotLayout::new(knots)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::data(None, format!("cannot serialize fit: {e}")))
    }

    /// Parses a fit file, checking the format version before anything else.
    pub fn from_toml(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Version {
            format_version: u32,
        }
        let v: Version = toml::from_str(s).map_err(|e| Error::data(None, format!("fit file: {e}")))?;
        if v.format_version != FIT_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: v.format_version,
                expected: FIT_FORMAT_VERSION,
            });
        }
        toml::from_str(s).map_err(|e| Error::data(None, format!("fit file: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn observations_roundtrip() {
        let data = Dataset::with_unit_weights(
            vec![Location::d1(1.0), Location::d1(2.5), Location::d1(4.0)],
            DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 2.5, 1.0, 4.0]),
            DVector::from_vec(vec![0.1, -0.3, 1.0 / 3.0]),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_observations(&mut buf, &data, true).unwrap();
        let back = read_observations(&buf[..], true).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn bad_row_names_line() {
        let csv = "coord1,y\n1,2\n2,abc\n";
        match read_observations(csv.as_bytes(), true) {
            Err(Error::Data { line: Some(3), message }) => assert!(message.contains("abc")),
            other => panic!("unexpected {other:?}"),
        }
        let short = "coord1,x1,y\n1,2,3\n2,3\n";
        assert!(matches!(
            read_observations(short.as_bytes(), true),
            Err(Error::Data { line: Some(3), .. })
        ));
        assert!(matches!(
            read_observations("coord1,x\n1,2\n".as_bytes(), true),
            Err(Error::Data { .. })
        ));
    }

    #[test]
    fn version_mismatch_is_typed() {
        let s = "format_version = 7\nmethod = \"em\"\n";
        assert!(matches!(
            FitFile::from_toml(s),
            Err(Error::VersionMismatch { found: 7, expected: 1 })
        ));
    }
}
