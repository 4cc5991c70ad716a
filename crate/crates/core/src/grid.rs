//! Discretized space-time domains, fields on them, and observation operators.
//!
//! A [`SpaceTimeGrid`] holds the n spatial nodes and T time points of a 1-D
//! domain. A [`Field`] stores one real value per (time, space) pair, time-major,
//! together with an observation mask. An [`ObservationOperator`] is a per-time
//! incidence structure selecting the observed entries of a state vector.

use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::Result;

/// A 1-D spatial grid crossed with a set of time points.
///
/// Immutable after construction and safe to share across threads. Spatial and
/// temporal nodes are strictly increasing; the boundary index set is {0, n-1}
/// and the initial-condition time index is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeGrid {
    s_nodes: Vec<f64>,
    t_nodes: Vec<f64>,
    boundary_idx: [usize; 2],
    ic_time_idx: usize,
}

impl SpaceTimeGrid {
    /// Builds a grid from explicit node lists. Nodes must be strictly increasing.
    pub fn from_nodes(s_nodes: Vec<f64>, t_nodes: Vec<f64>) -> Result<Self> {
        if s_nodes.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "need at least 3 spatial nodes, got {}",
                s_nodes.len()
            )));
        }
        if t_nodes.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 time nodes, got {}",
                t_nodes.len()
            )));
        }
        if !strictly_increasing(&s_nodes) {
            return Err(Error::InvalidArgument(
                "spatial nodes must be strictly increasing".into(),
            ));
        }
        if !strictly_increasing(&t_nodes) {
            return Err(Error::InvalidArgument(
                "time nodes must be strictly increasing".into(),
            ));
        }
        let n = s_nodes.len();
        Ok(Self {
            s_nodes,
            t_nodes,
            boundary_idx: [0, n - 1],
            ic_time_idx: 0,
        })
    }

    pub fn n_space(&self) -> usize {
        self.s_nodes.len()
    }

    pub fn n_time(&self) -> usize {
        self.t_nodes.len()
    }

    pub fn s_nodes(&self) -> &[f64] {
        &self.s_nodes
    }

    pub fn t_nodes(&self) -> &[f64] {
        &self.t_nodes
    }

    /// Indices of the two boundary nodes, always {0, n-1} in 1-D.
    pub fn boundary_idx(&self) -> [usize; 2] {
        self.boundary_idx
    }

    /// Index of the initial-condition time, always 0.
    pub fn ic_time_idx(&self) -> usize {
        self.ic_time_idx
    }

    pub fn s_min(&self) -> f64 {
        self.s_nodes[0]
    }

    pub fn s_max(&self) -> f64 {
        *self.s_nodes.last().unwrap()
    }

    pub fn t_max(&self) -> f64 {
        *self.t_nodes.last().unwrap()
    }
}

fn strictly_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] < w[1] && w[0].is_finite() && w[1].is_finite())
}

/// Builds an equally spaced grid with `n` spatial nodes on `[s_min, s_max]`
/// and `n_time` time points on `[0, t_max]`.
pub fn build_grid(n: usize, n_time: usize, s_min: f64, s_max: f64, t_max: f64) -> Result<SpaceTimeGrid> {
    if n < 3 {
        return Err(Error::InvalidArgument(format!("n must be >= 3, got {n}")));
    }
    if n_time < 2 {
        return Err(Error::InvalidArgument(format!(
            "number of time points must be >= 2, got {n_time}"
        )));
    }
    if !(s_min < s_max) {
        return Err(Error::InvalidArgument(format!(
            "require s_min < s_max, got [{s_min}, {s_max}]"
        )));
    }
    if !(t_max > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "require t_max > 0, got {t_max}"
        )));
    }
    let ds = (s_max - s_min) / (n - 1) as f64;
    let mut s_nodes: Vec<f64> = (0..n).map(|j| s_min + ds * j as f64).collect();
    // Pin the endpoints exactly.
    s_nodes[0] = s_min;
    s_nodes[n - 1] = s_max;
    let dt = t_max / (n_time - 1) as f64;
    let mut t_nodes: Vec<f64> = (0..n_time).map(|k| dt * k as f64).collect();
    t_nodes[0] = 0.0;
    t_nodes[n_time - 1] = t_max;
    SpaceTimeGrid::from_nodes(s_nodes, t_nodes)
}

/// Draws a random observation mask with a fixed spatial missingness pattern.
///
/// A subset of `floor(missing_fraction * n)` spatial columns is selected once
/// (Fisher-Yates shuffle under a seeded generator) and marked missing at every
/// time point. Returns a time-major (T, n) boolean array, true = observed.
pub fn make_mask(grid: &SpaceTimeGrid, missing_fraction: f64, seed: u64) -> Result<Vec<Vec<bool>>> {
    if !(0.0..=1.0).contains(&missing_fraction) {
        return Err(Error::InvalidArgument(format!(
            "missing_fraction must lie in [0, 1], got {missing_fraction}"
        )));
    }
    let n = grid.n_space();
    let n_missing = (missing_fraction * n as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let mut col_observed = vec![true; n];
    for &j in idx.iter().take(n_missing) {
        col_observed[j] = false;
    }
    Ok(vec![col_observed; grid.n_time()])
}

/// A real-valued field on a grid with an observation mask.
///
/// Values are stored time-major: `values[t][j]` is the value at time index t
/// and spatial index j. Latent/true fields carry an all-true mask; observation
/// fields may have missing entries (mask false), whose values are unspecified.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: SpaceTimeGrid,
    values: Vec<Vec<f64>>,
    mask: Vec<Vec<bool>>,
}

impl Field {
    /// A fully observed field from time-major values.
    pub fn new(grid: SpaceTimeGrid, values: Vec<Vec<f64>>) -> Result<Self> {
        let mask = vec![vec![true; grid.n_space()]; grid.n_time()];
        Self::with_mask(grid, values, mask)
    }

    /// A field with an explicit mask. Masked-true entries must be finite.
    pub fn with_mask(grid: SpaceTimeGrid, values: Vec<Vec<f64>>, mask: Vec<Vec<bool>>) -> Result<Self> {
        let (nt, ns) = (grid.n_time(), grid.n_space());
        if values.len() != nt || mask.len() != nt {
            return Err(Error::DimensionMismatch {
                context: "Field rows".into(),
                expected: nt,
                actual: values.len().min(mask.len()),
            });
        }
        for t in 0..nt {
            if values[t].len() != ns || mask[t].len() != ns {
                return Err(Error::DimensionMismatch {
                    context: format!("Field row {t}"),
                    expected: ns,
                    actual: values[t].len().min(mask[t].len()),
                });
            }
            for j in 0..ns {
                if mask[t][j] && !values[t][j].is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("Field value at (t={t}, s={j})"),
                        index: None,
                    });
                }
            }
        }
        Ok(Self { grid, values, mask })
    }

    /// A zero field on `grid`, fully observed.
    pub fn zeros(grid: SpaceTimeGrid) -> Self {
        let values = vec![vec![0.0; grid.n_space()]; grid.n_time()];
        let mask = vec![vec![true; grid.n_space()]; grid.n_time()];
        Self { grid, values, mask }
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn mask(&self) -> &[Vec<bool>] {
        &self.mask
    }

    pub fn value(&self, t: usize, j: usize) -> f64 {
        self.values[t][j]
    }

    pub fn observed(&self, t: usize, j: usize) -> bool {
        self.mask[t][j]
    }

    pub fn values_mut(&mut self) -> &mut Vec<Vec<f64>> {
        &mut self.values
    }

    /// Writes the field in the long CSV format `t,s,<value_col>,observed`.
    /// Missing entries are written as an empty value with observed=0.
    pub fn write_csv(&self, path: &Path, value_col: &str) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!("t,s,{value_col},observed\n"));
        for (t, &tv) in self.grid.t_nodes().iter().enumerate() {
            for (j, &sv) in self.grid.s_nodes().iter().enumerate() {
                if self.mask[t][j] {
                    out.push_str(&format!("{tv},{sv},{},1\n", self.values[t][j]));
                } else {
                    out.push_str(&format!("{tv},{sv},,0\n"));
                }
            }
        }
        std::fs::write(path, out).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    /// Reads a field from the long CSV format written by [`Field::write_csv`].
    ///
    /// The grid is reconstructed from the unique t and s coordinates, which
    /// must form a complete (T x n) product in row-major order.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let reader = BufReader::new(file);
        let parse_err = |msg: String| Error::Parse {
            path: path.display().to_string(),
            message: msg,
        };

        let mut rows: Vec<(f64, f64, Option<f64>)> = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            if lineno == 0 {
                let cols: Vec<&str> = line.split(',').collect();
                if cols.len() != 4 || cols[0] != "t" || cols[1] != "s" || cols[3] != "observed" {
                    return Err(parse_err(format!("unexpected header: {line}")));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(parse_err(format!("line {}: expected 4 columns", lineno + 1)));
            }
            let t: f64 = cols[0]
                .parse()
                .map_err(|_| parse_err(format!("line {}: bad t value", lineno + 1)))?;
            let s: f64 = cols[1]
                .parse()
                .map_err(|_| parse_err(format!("line {}: bad s value", lineno + 1)))?;
            let observed = match cols[3] {
                "1" => true,
                "0" => false,
                other => return Err(parse_err(format!("line {}: bad observed flag {other}", lineno + 1))),
            };
            let value = if observed {
                Some(
                    cols[2]
                        .parse()
                        .map_err(|_| parse_err(format!("line {}: bad value", lineno + 1)))?,
                )
            } else {
                None
            };
            rows.push((t, s, value));
        }

        let mut t_nodes: Vec<f64> = Vec::new();
        for &(t, _, _) in &rows {
            if t_nodes.last() != Some(&t) {
                t_nodes.push(t);
            }
        }
        let nt = t_nodes.len();
        if nt == 0 || rows.len() % nt != 0 {
            return Err(parse_err("rows do not form a complete grid".into()));
        }
        let ns = rows.len() / nt;
        let s_nodes: Vec<f64> = rows.iter().take(ns).map(|r| r.1).collect();
        for (k, &(t, s, _)) in rows.iter().enumerate() {
            if t != t_nodes[k / ns] || s != s_nodes[k % ns] {
                return Err(parse_err("rows are not in row-major (t, s) order".into()));
            }
        }
        let grid = SpaceTimeGrid::from_nodes(s_nodes, t_nodes)?;
        let mut values = vec![vec![f64::NAN; ns]; nt];
        let mut mask = vec![vec![false; ns]; nt];
        for (k, &(_, _, v)) in rows.iter().enumerate() {
            if let Some(v) = v {
                values[k / ns][k % ns] = v;
                mask[k / ns][k % ns] = true;
            }
        }
        Field::with_mask(grid, values, mask)
    }
}

/// Per-time incidence structure mapping state entries to observation entries.
///
/// Each per-time index list is sorted, duplicate-free, and bounded by the
/// state dimension; applying the operator then scatter and the operator again
/// reproduces the observation vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationOperator {
    n_state: usize,
    indices: Vec<Vec<usize>>,
}

impl ObservationOperator {
    /// Builds an operator from per-time observed-index lists.
    pub fn new(n_state: usize, indices: Vec<Vec<usize>>) -> Result<Self> {
        for (t, list) in indices.iter().enumerate() {
            let mut seen = vec![false; n_state];
            for &j in list {
                if j >= n_state {
                    return Err(Error::IndexOutOfRange {
                        context: format!("observation operator at time {t}"),
                        index: j,
                        len: n_state,
                    });
                }
                if seen[j] {
                    return Err(Error::InvalidArgument(format!(
                        "duplicate observation index {j} at time {t}"
                    )));
                }
                seen[j] = true;
            }
        }
        Ok(Self { n_state, indices })
    }

    /// The identity operator (all entries observed at every time).
    pub fn identity(n_state: usize, n_time: usize) -> Self {
        Self {
            n_state,
            indices: vec![(0..n_state).collect(); n_time],
        }
    }

    /// Derives the operator from a time-major mask, one index list per time.
    pub fn from_mask(mask: &[Vec<bool>]) -> Result<Self> {
        let n_state = mask.first().map_or(0, |r| r.len());
        let indices = mask
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter_map(|(j, &obs)| obs.then_some(j))
                    .collect()
            })
            .collect();
        Self::new(n_state, indices)
    }

    pub fn n_state(&self) -> usize {
        self.n_state
    }

    pub fn n_time(&self) -> usize {
        self.indices.len()
    }

    /// Observed indices at time `t_index`, in increasing order.
    pub fn indices_at(&self, t_index: usize) -> Result<&[usize]> {
        self.indices.get(t_index).map(|v| v.as_slice()).ok_or(Error::IndexOutOfRange {
            context: "observation operator time index".into(),
            index: t_index,
            len: self.indices.len(),
        })
    }

    /// Gathers the observed entries of `state` at the given time index.
    pub fn apply(&self, state: &Field, t_index: usize) -> Result<Vec<f64>> {
        let idx = self.indices_at(t_index)?;
        if state.grid().n_space() != self.n_state {
            return Err(Error::DimensionMismatch {
                context: "apply_observation state width".into(),
                expected: self.n_state,
                actual: state.grid().n_space(),
            });
        }
        if t_index >= state.grid().n_time() {
            return Err(Error::IndexOutOfRange {
                context: "apply_observation time index".into(),
                index: t_index,
                len: state.grid().n_time(),
            });
        }
        Ok(idx.iter().map(|&j| state.value(t_index, j)).collect())
    }

    /// Gathers the observed entries of a raw state row.
    pub fn apply_row(&self, row: &[f64], t_index: usize) -> Result<Vec<f64>> {
        let idx = self.indices_at(t_index)?;
        if row.len() != self.n_state {
            return Err(Error::DimensionMismatch {
                context: "apply_observation row width".into(),
                expected: self.n_state,
                actual: row.len(),
            });
        }
        Ok(idx.iter().map(|&j| row[j]).collect())
    }

    /// Scatters an observation vector into a zero state row (transpose action).
    pub fn scatter_row(&self, obs: &[f64], t_index: usize) -> Result<Vec<f64>> {
        let idx = self.indices_at(t_index)?;
        if obs.len() != idx.len() {
            return Err(Error::DimensionMismatch {
                context: "scatter observation length".into(),
                expected: idx.len(),
                actual: obs.len(),
            });
        }
        let mut row = vec![0.0; self.n_state];
        for (&j, &v) in idx.iter().zip(obs) {
            row[j] = v;
        }
        Ok(row)
    }

    /// Dense incidence matrix at time `t_index` (m_t x n), for linear algebra.
    pub fn matrix_at(&self, t_index: usize) -> Result<nalgebra::DMatrix<f64>> {
        let idx = self.indices_at(t_index)?;
        let mut h = nalgebra::DMatrix::zeros(idx.len(), self.n_state);
        for (r, &j) in idx.iter().enumerate() {
            h[(r, j)] = 1.0;
        }
        Ok(h)
    }
}

/// Applies the observation operator to a field at one time (gather).
pub fn apply_observation(op: &ObservationOperator, state: &Field, t_index: usize) -> Result<Vec<f64>> {
    op.apply(state, t_index)
}

/// Writes several fields that share a grid as one long CSV with named columns.
/// All fields must be fully observed.
pub fn write_multi_csv(path: &Path, grid: &SpaceTimeGrid, columns: &[(&str, &Field)]) -> Result<()> {
    let mut out = String::new();
    out.push_str("t,s");
    for (name, field) in columns {
        if field.grid() != grid {
            return Err(Error::InvalidArgument(format!(
                "column {name} is on a different grid"
            )));
        }
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (t, &tv) in grid.t_nodes().iter().enumerate() {
        for (j, &sv) in grid.s_nodes().iter().enumerate() {
            out.push_str(&format!("{tv},{sv}"));
            for (_, field) in columns {
                out.push_str(&format!(",{}", field.value(t, j)));
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Reads selected columns of a long CSV written by [`write_multi_csv`] back
/// into fully observed fields, in the order requested.
pub fn read_multi_csv(path: &Path, wanted: &[&str]) -> Result<Vec<Field>> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let reader = BufReader::new(file);
    let parse_err = |msg: String| Error::Parse {
        path: path.display().to_string(),
        message: msg,
    };
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err("empty file".into()))?
        .map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    let cols: Vec<String> = header.split(',').map(str::to_string).collect();
    if cols.len() < 3 || cols[0] != "t" || cols[1] != "s" {
        return Err(parse_err(format!("unexpected header: {header}")));
    }
    let mut col_pos = Vec::with_capacity(wanted.len());
    for name in wanted {
        let pos = cols
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| parse_err(format!("missing column {name}")))?;
        col_pos.push(pos);
    }

    let mut coords: Vec<(f64, f64)> = Vec::new();
    let mut data: Vec<Vec<f64>> = vec![Vec::new(); wanted.len()];
    for line in lines {
        let line = line.map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(parse_err("ragged row".into()));
        }
        let t: f64 = fields[0].parse().map_err(|_| parse_err("bad t value".into()))?;
        let s: f64 = fields[1].parse().map_err(|_| parse_err("bad s value".into()))?;
        coords.push((t, s));
        for (k, &pos) in col_pos.iter().enumerate() {
            let v: f64 = fields[pos]
                .parse()
                .map_err(|_| parse_err(format!("bad value in column {}", wanted[k])))?;
            data[k].push(v);
        }
    }

    let mut t_nodes: Vec<f64> = Vec::new();
    for &(t, _) in &coords {
        if t_nodes.last() != Some(&t) {
            t_nodes.push(t);
        }
    }
    let nt = t_nodes.len();
    if nt == 0 || coords.len() % nt != 0 {
        return Err(parse_err("rows do not form a complete grid".into()));
    }
    let ns = coords.len() / nt;
    let s_nodes: Vec<f64> = coords.iter().take(ns).map(|c| c.1).collect();
    let grid = SpaceTimeGrid::from_nodes(s_nodes, t_nodes)?;
    wanted
        .iter()
        .enumerate()
        .map(|(k, _)| {
            let values = data[k].chunks(ns).map(|c| c.to_vec()).collect();
            Field::new(grid.clone(), values)
        })
        .collect()
}
