//! Empirical measures: the observed sample `(X_j, Y_j)` with weights `nu`, and
//! the discretized rank grid `(u_i, mu_i)` on `[0,1]^d`.
//!
//! Covariates are centered before fitting. The constant regressor is never
//! stored as a column: the per-rank marginal constraint carries the intercept.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VqrError};

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Selects a CSV column by header name or by zero-based position (`#3`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ColumnSelector {
    Name(String),
    Index(usize),
}

impl ColumnSelector {
    pub fn parse(s: &str) -> Self {
        let s = s.trim();
        match s.strip_prefix('#').and_then(|r| r.parse().ok()) {
            Some(i) => ColumnSelector::Index(i),
            None => ColumnSelector::Name(s.to_string()),
        }
    }

    /// Parses a comma-separated list, skipping empty entries.
    pub fn parse_list(s: &str) -> Vec<Self> {
        s.split(',').filter(|p| !p.trim().is_empty()).map(Self::parse).collect()
    }

    fn resolve(&self, headers: &[String]) -> Result<usize> {
        match self {
            ColumnSelector::Name(n) => headers
                .iter()
                .position(|h| h == n)
                .ok_or_else(|| VqrError::MissingColumn(n.clone())),
            ColumnSelector::Index(i) if *i < headers.len() => Ok(*i),
            ColumnSelector::Index(i) => Err(VqrError::MissingColumn(format!("#{i}"))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub x_cols: Vec<ColumnSelector>,
    pub y_cols: Vec<ColumnSelector>,
    pub intercept: bool,
    /// Optional positive weights; normalized to sum to one.
    pub weight_col: Option<ColumnSelector>,
}

/// Per-column affine map applied to the responses, kept so that quantiles can
/// be reported in original units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YScaling {
    pub min: Vec<f64>,
    pub range: Vec<f64>,
}

impl YScaling {
    pub fn unscale(&self, q: &mut [f64]) {
        for (k, v) in q.iter_mut().enumerate() {
            *v = *v * self.range[k] + self.min[k];
        }
    }
}

/// Observed sample with empirical weights.
///
/// `x` is `J x N`, `y` is `J x d`. After [`center_covariates`] the weighted
/// column means of `x` vanish and `x_mean` holds the subtracted means.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Array2<f64>,
    y: Array2<f64>,
    nu: Array1<f64>,
    x_mean: Array1<f64>,
    x_names: Vec<String>,
    y_names: Vec<String>,
    intercept: bool,
    y_scaling: Option<YScaling>,
}

impl Dataset {
    /// Builds a dataset with uniform weights `1/J`.
    pub fn new(x: Array2<f64>, y: Array2<f64>) -> Result<Self> {
        let j = y.nrows();
        if j == 0 {
            return Err(VqrError::EmptyData);
        }
        let nu = Array1::from_elem(j, 1.0 / j as f64);
        Self::with_weights(x, y, nu)
    }

    pub fn with_weights(x: Array2<f64>, y: Array2<f64>, nu: Array1<f64>) -> Result<Self> {
        let j = y.nrows();
        if j == 0 {
            return Err(VqrError::EmptyData);
        }
        if x.nrows() != j || nu.len() != j {
            return Err(VqrError::Shape(format!(
                "x has {} rows, y has {j}, nu has {}",
                x.nrows(),
                nu.len()
            )));
        }
        if y.ncols() == 0 {
            return Err(VqrError::Shape("at least one response column is required".into()));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(VqrError::NonFinite("covariates"));
        }
        if !y.iter().all(|v| v.is_finite()) {
            return Err(VqrError::NonFinite("responses"));
        }
        if nu.iter().any(|&w| !(w.is_finite() && w > 0.0)) {
            return Err(VqrError::InvalidInput("weights must be positive and finite".into()));
        }
        let total: f64 = nu.sum();
        let nu = if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            nu / total
        } else {
            nu
        };
        let n = x.ncols();
        let d = y.ncols();
        Ok(Dataset {
            x,
            y,
            nu,
            x_mean: Array1::zeros(n),
            x_names: (1..=n).map(|k| format!("x{k}")).collect(),
            y_names: (1..=d).map(|k| format!("y{k}")).collect(),
            intercept: true,
            y_scaling: None,
        })
    }

    pub fn with_names(mut self, x_names: Vec<String>, y_names: Vec<String>) -> Result<Self> {
        if x_names.len() != self.n_covariates() || y_names.len() != self.dim() {
            return Err(VqrError::Shape("column name count does not match data".into()));
        }
        self.x_names = x_names;
        self.y_names = y_names;
        Ok(self)
    }

    pub fn n_obs(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    /// Response dimension `d`.
    pub fn dim(&self) -> usize {
        self.y.ncols()
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn y(&self) -> ArrayView2<'_, f64> {
        self.y.view()
    }

    pub fn nu(&self) -> ArrayView1<'_, f64> {
        self.nu.view()
    }

    pub fn x_mean(&self) -> ArrayView1<'_, f64> {
        self.x_mean.view()
    }

    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }

    pub fn y_names(&self) -> &[String] {
        &self.y_names
    }

    pub fn intercept(&self) -> bool {
        self.intercept
    }

    pub fn y_scaling(&self) -> Option<&YScaling> {
        self.y_scaling.as_ref()
    }

    pub fn has_uniform_weights(&self) -> bool {
        let w = 1.0 / self.n_obs() as f64;
        self.nu.iter().all(|&v| (v - w).abs() <= 1e-15)
    }

    /// Covariate row `j` in the original (uncentered) units.
    pub fn raw_x(&self, j: usize) -> Array1<f64> {
        &self.x.row(j) + &self.x_mean
    }

    /// Largest per-column range of the responses; the unit in which response
    /// tolerances are expressed.
    pub fn y_scale(&self) -> f64 {
        self.y
            .axis_iter(Axis(1))
            .map(|c| {
                let (lo, hi) = min_max(c.iter().copied());
                hi - lo
            })
            .fold(0.0, f64::max)
    }

    /// Rescales each response column to `[0, 1]`, recording the map.
    pub fn min_max_scale_y(mut self) -> Self {
        let mut mins = Vec::with_capacity(self.dim());
        let mut ranges = Vec::with_capacity(self.dim());
        for mut col in self.y.axis_iter_mut(Axis(1)) {
            let (lo, hi) = min_max(col.iter().copied());
            let range = if hi > lo { hi - lo } else { 1.0 };
            col.mapv_inplace(|v| (v - lo) / range);
            mins.push(lo);
            ranges.push(range);
        }
        self.y_scaling = Some(YScaling {
            min: mins,
            range: ranges,
        });
        self
    }
}

fn min_max(it: impl Iterator<Item = f64>) -> (f64, f64) {
    it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

pub fn load_csv(
    path: impl AsRef<Path>,
    x_cols: &[ColumnSelector],
    y_cols: &[ColumnSelector],
    intercept: bool,
) -> Result<Dataset> {
    load_csv_with(
        path,
        &LoadOptions {
            x_cols: x_cols.to_vec(),
            y_cols: y_cols.to_vec(),
            intercept,
            weight_col: None,
        },
    )
}

pub fn load_csv_with(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| VqrError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_csv(file, opts)
}

/// Parses CSV from any reader; the header row is required.
pub fn read_csv<R: std::io::Read>(rdr: R, opts: &LoadOptions) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(rdr);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();

    let x_idx = opts
        .x_cols
        .iter()
        .map(|c| c.resolve(&headers))
        .collect::<Result<Vec<_>>>()?;
    let y_idx = opts
        .y_cols
        .iter()
        .map(|c| c.resolve(&headers))
        .collect::<Result<Vec<_>>>()?;
    if y_idx.is_empty() {
        return Err(VqrError::Config("no response columns selected".into()));
    }
    let w_idx = opts.weight_col.as_ref().map(|c| c.resolve(&headers)).transpose()?;

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut ws = Vec::new();
    let mut rows = 0usize;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        // 1-based data row, header excluded
        let row = r + 1;
        let cell = |k: usize| -> Result<f64> {
            let raw = rec.get(k).unwrap_or("").trim();
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(VqrError::Parse {
                    row,
                    column: headers[k].clone(),
                    value: raw.to_string(),
                }),
            }
        };
        for &k in &x_idx {
            xs.push(cell(k)?);
        }
        for &k in &y_idx {
            ys.push(cell(k)?);
        }
        if let Some(k) = w_idx {
            ws.push(cell(k)?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(VqrError::EmptyData);
    }
    let x = Array2::from_shape_vec((rows, x_idx.len()), xs).map_err(|e| VqrError::Shape(e.to_string()))?;
    let y = Array2::from_shape_vec((rows, y_idx.len()), ys).map_err(|e| VqrError::Shape(e.to_string()))?;
    let mut ds = match w_idx {
        Some(_) => Dataset::with_weights(x, y, Array1::from(ws))?,
        None => Dataset::new(x, y)?,
    };
    ds.x_names = x_idx.iter().map(|&k| headers[k].clone()).collect();
    ds.y_names = y_idx.iter().map(|&k| headers[k].clone()).collect();
    ds.intercept = opts.intercept;
    Ok(ds)
}

/// Subtracts the weighted column means from the covariates.
///
/// Repeated application accumulates the (rounding-level) residual mean into
/// `x_mean`, so the raw covariates stay recoverable.
pub fn center_covariates(d: &Dataset) -> Dataset {
    let mut out = d.clone();
    for (k, mut col) in out.x.axis_iter_mut(Axis(1)).enumerate() {
        let m: f64 = col.iter().zip(d.nu.iter()).map(|(x, w)| x * w).sum();
        col.mapv_inplace(|v| v - m);
        out.x_mean[k] += m;
    }
    out
}

/// How 1-D nodes are placed inside each rank cell `((i-1)/n, i/n]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodePlacement {
    /// `u_i = i/n`, the image of `1` under the inverse difference operator.
    #[default]
    RightEndpoint,
    /// `u_i = (i - 1/2)/n`.
    Midpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridScheme {
    Endpoint,
    TensorProduct,
}

/// Discretized latent ranks `u_i` in `(0,1]^d` with weights `mu_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankGrid {
    u: Array2<f64>,
    mu: Array1<f64>,
    scheme: GridScheme,
    placement: NodePlacement,
    n_per_axis: usize,
}

impl RankGrid {
    /// Grid from explicit nodes and weights (weights renormalized to one).
    pub fn from_nodes(u: Array2<f64>, mu: Array1<f64>) -> Result<Self> {
        if u.nrows() == 0 || u.nrows() != mu.len() {
            return Err(VqrError::InvalidGrid(format!(
                "{} nodes but {} weights",
                u.nrows(),
                mu.len()
            )));
        }
        if !u.iter().all(|v| v.is_finite()) || mu.iter().any(|&w| !(w.is_finite() && w > 0.0)) {
            return Err(VqrError::InvalidGrid("nodes must be finite, weights positive".into()));
        }
        let s = mu.sum();
        let n = u.nrows();
        Ok(RankGrid {
            u,
            mu: mu / s,
            scheme: GridScheme::Endpoint,
            placement: NodePlacement::RightEndpoint,
            n_per_axis: n,
        })
    }

    /// Reassembles a stored grid; a tensor-product layout must have `n^d` nodes.
    pub fn from_parts(
        u: Array2<f64>,
        mu: Array1<f64>,
        scheme: GridScheme,
        placement: NodePlacement,
        n_per_axis: usize,
    ) -> Result<Self> {
        let stored = mu.clone();
        let mut g = Self::from_nodes(u, mu)?;
        if (stored.sum() - 1.0).abs() <= 1e-12 {
            // keep stored weights bit-exact
            g.mu = stored;
        }
        if scheme == GridScheme::TensorProduct && n_per_axis.checked_pow(g.dim() as u32) != Some(g.len()) {
            return Err(VqrError::InvalidGrid(format!(
                "{} nodes do not form a {n_per_axis}^{} tensor grid",
                g.len(),
                g.dim()
            )));
        }
        g.scheme = scheme;
        g.placement = placement;
        g.n_per_axis = n_per_axis;
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.u.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.u.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.u.ncols()
    }

    pub fn u(&self) -> ArrayView2<'_, f64> {
        self.u.view()
    }

    pub fn mu(&self) -> ArrayView1<'_, f64> {
        self.mu.view()
    }

    pub fn scheme(&self) -> GridScheme {
        self.scheme
    }

    pub fn placement(&self) -> NodePlacement {
        self.placement
    }

    pub fn n_per_axis(&self) -> usize {
        self.n_per_axis
    }

    /// Multi-index of node `i` on a tensor grid, last axis fastest.
    pub fn axis_indices(&self, i: usize) -> Vec<usize> {
        let n = self.n_per_axis;
        let d = self.dim();
        let mut idx = vec![0; d];
        let mut rem = i;
        for k in (0..d).rev() {
            idx[k] = rem % n;
            rem /= n;
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().fold(0, |acc, &k| acc * self.n_per_axis + k)
    }
}

/// Uniform rank grid: `n` nodes per axis, `n^d` nodes in total.
pub fn make_rank_grid(d: usize, n: usize, placement: NodePlacement) -> Result<RankGrid> {
    if d == 0 {
        return Err(VqrError::InvalidGrid("dimension must be at least 1".into()));
    }
    if n < 2 {
        return Err(VqrError::InvalidGrid(format!(
            "need at least 2 nodes per axis, got {n}"
        )));
    }
    let total = n
        .checked_pow(d as u32)
        .filter(|&t| t <= 1 << 24)
        .ok_or_else(|| VqrError::InvalidGrid(format!("{n}^{d} nodes is too many")))?;
    let axis: Vec<f64> = (1..=n)
        .map(|i| match placement {
            NodePlacement::RightEndpoint => i as f64 / n as f64,
            NodePlacement::Midpoint => (i as f64 - 0.5) / n as f64,
        })
        .collect();
    let mut u = Array2::zeros((total, d));
    for (i, mut row) in u.axis_iter_mut(Axis(0)).enumerate() {
        let mut rem = i;
        for k in (0..d).rev() {
            row[k] = axis[rem % n];
            rem /= n;
        }
    }
    Ok(RankGrid {
        u,
        mu: Array1::from_elem(total, 1.0 / total as f64),
        scheme: if d == 1 {
            GridScheme::Endpoint
        } else {
            GridScheme::TensorProduct
        },
        placement,
        n_per_axis: n,
    })
}

/// JSON form of a [`Dataset`]: matrices stored column-major as lists of columns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetDoc {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub nu: Vec<f64>,
    pub x_mean: Vec<f64>,
    pub x_names: Vec<String>,
    pub y_names: Vec<String>,
    pub intercept: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_scaling: Option<YScaling>,
}

pub(crate) fn columns(m: ArrayView2<'_, f64>) -> Vec<Vec<f64>> {
    m.axis_iter(Axis(1)).map(|c| c.to_vec()).collect()
}

pub(crate) fn from_columns(cols: &[Vec<f64>], rows: usize) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((rows, cols.len()));
    for (k, c) in cols.iter().enumerate() {
        if c.len() != rows {
            return Err(VqrError::Shape(format!(
                "column {k} has {} entries, expected {rows}",
                c.len()
            )));
        }
        m.column_mut(k).assign(&ArrayView1::from(c.as_slice()));
    }
    Ok(m)
}

impl From<&Dataset> for DatasetDoc {
    fn from(d: &Dataset) -> Self {
        DatasetDoc {
            x: columns(d.x.view()),
            y: columns(d.y.view()),
            nu: d.nu.to_vec(),
            x_mean: d.x_mean.to_vec(),
            x_names: d.x_names.clone(),
            y_names: d.y_names.clone(),
            intercept: d.intercept,
            y_scaling: d.y_scaling.clone(),
        }
    }
}

impl TryFrom<DatasetDoc> for Dataset {
    type Error = VqrError;

    fn try_from(doc: DatasetDoc) -> Result<Self> {
        let rows = doc.nu.len();
        let x = from_columns(&doc.x, rows)?;
        let y = from_columns(&doc.y, rows)?;
        if doc.x_mean.len() != x.ncols() {
            return Err(VqrError::Shape("x_mean length does not match covariates".into()));
        }
        let mut ds = Dataset::with_weights(x, y, Array1::from(doc.nu))?.with_names(doc.x_names, doc.y_names)?;
        ds.x_mean = Array1::from(doc.x_mean);
        ds.intercept = doc.intercept;
        ds.y_scaling = doc.y_scaling;
        Ok(ds)
    }
}

impl Serialize for Dataset {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        DatasetDoc::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Dataset {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = DatasetDoc::deserialize(d)?;
        Dataset::try_from(doc).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sel(names: &[&str]) -> Vec<ColumnSelector> {
        names.iter().map(|n| ColumnSelector::parse(n)).collect()
    }

    #[test]
    fn three_row_csv_has_uniform_weights() {
        let csv = "h,w\n170,60\n180,75\n165,58\n";
        let ds = read_csv(
            csv.as_bytes(),
            &LoadOptions {
                x_cols: sel(&["h"]),
                y_cols: sel(&["w"]),
                intercept: true,
                weight_col: None,
            },
        )
        .unwrap();
        assert_eq!(ds.n_obs(), 3);
        assert_eq!(ds.n_covariates(), 1);
        for &w in ds.nu() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(ds.intercept());
        assert_eq!(ds.x_names(), ["h"]);
    }

    #[test]
    fn nan_cell_names_row() {
        let csv = "h,w\n170,60\n180,NaN\n";
        let err = read_csv(
            csv.as_bytes(),
            &LoadOptions {
                x_cols: sel(&["h"]),
                y_cols: sel(&["w"]),
                ..Default::default()
            },
        )
        .unwrap_err();
        match err {
            VqrError::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "w");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn absent_column_is_reported() {
        let csv = "h,w\n1,2\n";
        let err = read_csv(
            csv.as_bytes(),
            &LoadOptions {
                x_cols: sel(&["height"]),
                y_cols: sel(&["w"]),
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, VqrError::MissingColumn(ref c) if c == "height"));
    }

    #[test]
    fn header_only_is_empty() {
        let err = read_csv(
            "h,w\n".as_bytes(),
            &LoadOptions {
                x_cols: sel(&["h"]),
                y_cols: sel(&["w"]),
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, VqrError::EmptyData));
    }

    #[test]
    fn weight_column_is_normalized() {
        let csv = "x,y,w\n0,1,1\n1,2,3\n";
        let ds = read_csv(
            csv.as_bytes(),
            &LoadOptions {
                x_cols: sel(&["x"]),
                y_cols: sel(&["y"]),
                weight_col: Some(ColumnSelector::parse("w")),
                ..Default::default()
            },
        )
        .unwrap();
        assert!((ds.nu()[0] - 0.25).abs() < 1e-15);
        assert!((ds.nu()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn index_selector() {
        let csv = "a,b\n1,2\n3,4\n";
        let ds = read_csv(
            csv.as_bytes(),
            &LoadOptions {
                x_cols: vec![ColumnSelector::Index(0)],
                y_cols: vec![ColumnSelector::Index(1)],
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(ds.y()[[1, 0]], 4.0);
    }

    #[test]
    fn centering_arithmetic_mean() {
        let ds = Dataset::new(array![[1.0], [2.0], [3.0]], array![[0.0], [0.0], [0.0]]).unwrap();
        let c = center_covariates(&ds);
        assert_eq!(c.x().column(0).to_vec(), vec![-1.0, 0.0, 1.0]);
        assert_eq!(c.x_mean()[0], 2.0);
    }

    #[test]
    fn centering_constant_column() {
        let ds = Dataset::new(array![[4.5], [4.5], [4.5]], array![[1.0], [2.0], [3.0]]).unwrap();
        let c = center_covariates(&ds);
        assert!(c.x().iter().all(|&v| v == 0.0));
        assert_eq!(c.x_mean()[0], 4.5);
    }

    #[test]
    fn centering_already_centered() {
        let ds = Dataset::new(array![[-1.0], [0.0], [1.0]], array![[0.0], [1.0], [2.0]]).unwrap();
        let c = center_covariates(&ds);
        for (a, b) in c.x().iter().zip(ds.x().iter()) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn grid_d1_n4() {
        let g = make_rank_grid(1, 4, NodePlacement::RightEndpoint).unwrap();
        assert_eq!(g.u().column(0).to_vec(), vec![0.25, 0.5, 0.75, 1.0]);
        assert!(g.mu().iter().all(|&m| m == 0.25));
        assert_eq!(g.scheme(), GridScheme::Endpoint);
    }

    #[test]
    fn grid_d2_n2() {
        let g = make_rank_grid(2, 2, NodePlacement::RightEndpoint).unwrap();
        assert_eq!(g.u(), array![[0.5, 0.5], [0.5, 1.0], [1.0, 0.5], [1.0, 1.0]]);
        assert!(g.mu().iter().all(|&m| m == 0.25));
        assert_eq!(g.scheme(), GridScheme::TensorProduct);
        for i in 0..4 {
            assert_eq!(g.flat_index(&g.axis_indices(i)), i);
        }
    }

    #[test]
    fn grid_n1_rejected() {
        assert!(matches!(
            make_rank_grid(1, 1, NodePlacement::RightEndpoint),
            Err(VqrError::InvalidGrid(_))
        ));
    }

    #[test]
    fn midpoint_placement() {
        let g = make_rank_grid(1, 4, NodePlacement::Midpoint).unwrap();
        assert_eq!(g.u().column(0).to_vec(), vec![0.125, 0.375, 0.625, 0.875]);
    }

    #[test]
    fn dataset_json_roundtrip() {
        let ds = Dataset::new(array![[1.0, 2.0], [3.0, 5.0]], array![[0.5], [1.5]]).unwrap();
        let ds = center_covariates(&ds).min_max_scale_y();
        let s = serde_json::to_string(&ds).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        // column-major: two covariate columns of two entries each
        assert_eq!(v["x"].as_array().unwrap().len(), 2);
        let back: Dataset = serde_json::from_str(&s).unwrap();
        assert_eq!(back, ds);
    }
}
