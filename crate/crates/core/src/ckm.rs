//! Channel knowledge maps: position- and bandwidth-dependent observation
//! variance.
//!
//! [`AnalyticCkm`] is a closed-form field used as simulator ground truth.
//! [`GridCkm`] is the deployable map, fitted from variance samples in the log
//! domain and queried by bilinear interpolation between cell centers.
//!
//! # Grid file format
//!
//! ```text
//! CKMGRID v1
//! bounds <x_min> <x_max> <y_min> <y_max>
//! resolution <n_x> <n_y>
//! k <k_1> ... <k_M>
//! grid <k> x
//! <n_y rows of n_x log-variances, y ascending>
//! grid <k> y
//! ...
//! ```
//!
//! Floats are written with 17 significant digits so that a save/load round
//! trip is bit-identical.

use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const HEADER: &str = "CKMGRID v1";

/// Anything that predicts a diagonal 2×2 observation covariance from a
/// position and a subcarrier count.
pub trait CkmField: Send + Sync {
    fn variance_at(&self, lx: f64, ly: f64, k: u32) -> Result<DMatrix<f64>>;
}

fn diag2(vx: f64, vy: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[vx, 0.0, 0.0, vy])
}

/// One Gaussian-shaped region of elevated variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarianceBump {
    pub center: [f64; 2],
    /// Peak added variance per axis (m²).
    pub amplitude: [f64; 2],
    /// Spatial standard deviation (m).
    pub width: f64,
}

/// `σ_d²(l, k) = (floor_d + Σ_g amp_{g,d} exp(−‖l−c_g‖²/(2 w_g²))) · (k_ref/k)^γ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticCkm {
    pub floor: [f64; 2],
    #[serde(default)]
    pub bumps: Vec<VarianceBump>,
    pub k_ref: u32,
    pub gamma: f64,
}

impl AnalyticCkm {
    pub fn flat(variance: f64, k_ref: u32, gamma: f64) -> Self {
        Self { floor: [variance, variance], bumps: Vec::new(), k_ref, gamma }
    }

    pub fn validate(&self) -> Result<()> {
        if self.floor.iter().any(|f| !(*f > 0.0) || !f.is_finite()) {
            return Err(Error::contract("field floor must be positive"));
        }
        for b in &self.bumps {
            if b.amplitude.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
                return Err(Error::contract("bump amplitudes must be >= 0"));
            }
            if !(b.width > 0.0) || !b.center.iter().all(|c| c.is_finite()) {
                return Err(Error::contract("bump widths must be > 0"));
            }
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::contract("gamma must be >= 0"));
        }
        if self.k_ref == 0 {
            return Err(Error::contract("k_ref must be positive"));
        }
        Ok(())
    }

    /// Per-axis variance at the reference subcarrier count.
    pub fn base_variance(&self, lx: f64, ly: f64) -> [f64; 2] {
        let mut v = self.floor;
        for b in &self.bumps {
            let r2 = (lx - b.center[0]).powi(2) + (ly - b.center[1]).powi(2);
            let g = (-r2 / (2.0 * b.width * b.width)).exp();
            v[0] += b.amplitude[0] * g;
            v[1] += b.amplitude[1] * g;
        }
        v
    }

    pub fn bandwidth_factor(&self, k: u32) -> f64 {
        (f64::from(self.k_ref) / f64::from(k)).powf(self.gamma)
    }

    /// The same field with every variance multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.floor = [c * self.floor[0], c * self.floor[1]];
        for b in &mut out.bumps {
            b.amplitude = [c * b.amplitude[0], c * b.amplitude[1]];
        }
        out
    }

    /// Upper bound on ‖∇ log σ_d²‖ over the plane, for either axis.
    pub fn log_lipschitz_bound(&self) -> f64 {
        let floor = self.floor[0].min(self.floor[1]);
        self.bumps
            .iter()
            .map(|b| b.amplitude[0].max(b.amplitude[1]) * (-0.5f64).exp() / b.width)
            .sum::<f64>()
            / floor
    }
}

impl CkmField for AnalyticCkm {
    fn variance_at(&self, lx: f64, ly: f64, k: u32) -> Result<DMatrix<f64>> {
        if k == 0 {
            return Err(Error::contract("subcarrier count must be positive"));
        }
        let [vx, vy] = self.base_variance(lx, ly);
        let s = self.bandwidth_factor(k);
        Ok(diag2(vx * s, vy * s))
    }
}

/// One labelled training point for [`fit_grid`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceSample {
    pub l_x: f64,
    pub l_y: f64,
    pub k: u32,
    pub var_x: f64,
    pub var_y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl GridBounds {
    fn validate(&self) -> Result<()> {
        let all_finite = [self.x_min, self.x_max, self.y_min, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite || !(self.x_min < self.x_max) || !(self.y_min < self.y_max) {
            return Err(Error::contract("grid bounds must be finite with min < max"));
        }
        Ok(())
    }
}

/// Log-variance raster per subcarrier count and axis.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCkm {
    bounds: GridBounds,
    nx: usize,
    ny: usize,
    k_values: Vec<u32>,
    /// `grids[k_index][axis][iy * nx + ix]`.
    grids: Vec<[Vec<f64>; 2]>,
}

fn check_k_values(k_values: &[u32]) -> Result<()> {
    if k_values.is_empty() || k_values.windows(2).any(|w| w[0] >= w[1]) || k_values[0] == 0 {
        return Err(Error::contract("k values must be non-empty, positive and strictly increasing"));
    }
    Ok(())
}

impl GridCkm {
    pub fn new(
        bounds: GridBounds,
        resolution: (usize, usize),
        k_values: Vec<u32>,
        grids: Vec<[Vec<f64>; 2]>,
    ) -> Result<Self> {
        bounds.validate()?;
        let (nx, ny) = resolution;
        if nx < 2 || ny < 2 {
            return Err(Error::contract("grid resolution must be at least 2x2"));
        }
        check_k_values(&k_values)?;
        if grids.len() != k_values.len()
            || grids.iter().flatten().any(|g| g.len() != nx * ny)
        {
            return Err(Error::contract("grid arrays do not match resolution and k values"));
        }
        if grids.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::contract("grid contains non-finite values"));
        }
        Ok(Self { bounds, nx, ny, k_values, grids })
    }

    pub fn bounds(&self) -> GridBounds {
        self.bounds
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn k_values(&self) -> &[u32] {
        &self.k_values
    }

    /// Log-variance raster for `k` on `axis` (0 = x, 1 = y).
    pub fn log_grid(&self, k: u32, axis: usize) -> Result<&[f64]> {
        let idx = self.k_index(k)?;
        Ok(&self.grids[idx][axis])
    }

    fn k_index(&self, k: u32) -> Result<usize> {
        self.k_values
            .binary_search(&k)
            .map_err(|_| Error::UnknownConfiguration(k))
    }

    fn cell_width(&self) -> (f64, f64) {
        (
            (self.bounds.x_max - self.bounds.x_min) / self.nx as f64,
            (self.bounds.y_max - self.bounds.y_min) / self.ny as f64,
        )
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        let (wx, wy) = self.cell_width();
        (
            self.bounds.x_min + (ix as f64 + 0.5) * wx,
            self.bounds.y_min + (iy as f64 + 0.5) * wy,
        )
    }

    /// Cell containing a point, clamping to the border.
    fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let (wx, wy) = self.cell_width();
        let clamp = |v: f64, n: usize| (v.floor().max(0.0) as usize).min(n - 1);
        (
            clamp((x - self.bounds.x_min) / wx, self.nx),
            clamp((y - self.bounds.y_min) / wy, self.ny),
        )
    }

    fn interpolate(&self, grid: &[f64], x: f64, y: f64) -> f64 {
        let (wx, wy) = self.cell_width();
        let coord = |v: f64, lo: f64, w: f64, n: usize| {
            let f = ((v - lo) / w - 0.5).clamp(0.0, (n - 1) as f64);
            let i = (f.floor() as usize).min(n - 2);
            (i, f - i as f64)
        };
        let (ix, tx) = coord(x, self.bounds.x_min, wx, self.nx);
        let (iy, ty) = coord(y, self.bounds.y_min, wy, self.ny);
        let at = |i: usize, j: usize| grid[j * self.nx + i];
        let bottom = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
        let top = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
        bottom * (1.0 - ty) + top * ty
    }

    pub fn save<W: Write>(&self, mut sink: W) -> std::io::Result<()> {
        let b = &self.bounds;
        writeln!(sink, "{HEADER}")?;
        writeln!(
            sink,
            "bounds {:.16e} {:.16e} {:.16e} {:.16e}",
            b.x_min, b.x_max, b.y_min, b.y_max
        )?;
        writeln!(sink, "resolution {} {}", self.nx, self.ny)?;
        let ks: Vec<String> = self.k_values.iter().map(|k| k.to_string()).collect();
        writeln!(sink, "k {}", ks.join(" "))?;
        for (k, axes) in self.k_values.iter().zip(&self.grids) {
            for (axis, grid) in ["x", "y"].iter().zip(axes) {
                writeln!(sink, "grid {k} {axis}")?;
                for row in grid.chunks(self.nx) {
                    let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
                    writeln!(sink, "{}", cells.join(" "))?;
                }
            }
        }
        sink.flush()
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.save(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("grid text is ASCII")
    }

    pub fn load<R: BufRead>(source: R) -> Result<Self> {
        let mut lines = LineReader { lines: source.lines(), line_no: 0 };

        let header = lines.next_required("header")?;
        if header.trim() != HEADER {
            return Err(lines.error(format!("expected `{HEADER}`, found `{}`", header.trim())));
        }

        let b = lines.keyword_floats("bounds", Some(4))?;
        let bounds = GridBounds { x_min: b[0], x_max: b[1], y_min: b[2], y_max: b[3] };
        bounds.validate().map_err(|e| lines.error(e.to_string()))?;

        let res = lines.keyword_ints("resolution", Some(2))?;
        let (nx, ny) = (res[0] as usize, res[1] as usize);
        if nx < 2 || ny < 2 {
            return Err(lines.error("resolution must be at least 2x2".into()));
        }

        let k_values: Vec<u32> = lines
            .keyword_ints("k", None)?
            .into_iter()
            .map(|k| u32::try_from(k).map_err(|_| lines.error(format!("k value {k} out of range"))))
            .collect::<Result<_>>()?;
        check_k_values(&k_values).map_err(|e| lines.error(e.to_string()))?;

        let mut grids = Vec::with_capacity(k_values.len());
        for &k in &k_values {
            let mut axes: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
            for (axis, name) in ["x", "y"].iter().enumerate() {
                let line = lines.next_required("grid header")?;
                let expected = format!("grid {k} {name}");
                if line.split_whitespace().collect::<Vec<_>>().join(" ") != expected {
                    return Err(lines.error(format!("expected `{expected}`, found `{}`", line.trim())));
                }
                let mut cells = Vec::with_capacity(nx * ny);
                for _ in 0..ny {
                    let line = lines.next_required("grid row")?;
                    let row = lines.parse_floats(&line)?;
                    if row.len() != nx {
                        return Err(lines.error(format!("expected {nx} values, found {}", row.len())));
                    }
                    cells.extend(row);
                }
                axes[axis] = cells;
            }
            grids.push(axes);
        }
        while let Some(line) = lines.next_line()? {
            if !line.trim().is_empty() {
                return Err(lines.error("unexpected trailing content".into()));
            }
        }
        GridCkm::new(bounds, (nx, ny), k_values, grids)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::load(text.as_bytes())
    }
}

impl CkmField for GridCkm {
    fn variance_at(&self, lx: f64, ly: f64, k: u32) -> Result<DMatrix<f64>> {
        let axes = &self.grids[self.k_index(k)?];
        Ok(diag2(
            self.interpolate(&axes[0], lx, ly).exp(),
            self.interpolate(&axes[1], lx, ly).exp(),
        ))
    }
}

struct LineReader<I> {
    lines: I,
    line_no: usize,
}

impl<I: Iterator<Item = std::io::Result<String>>> LineReader<I> {
    fn error(&self, message: String) -> Error {
        Error::Parse { line: self.line_no, message }
    }

    fn next_line(&mut self) -> Result<Option<String>> {
        match self.lines.next() {
            None => Ok(None),
            Some(Ok(l)) => {
                self.line_no += 1;
                Ok(Some(l))
            }
            Some(Err(e)) => {
                self.line_no += 1;
                Err(self.error(format!("read failure: {e}")))
            }
        }
    }

    fn next_required(&mut self, what: &str) -> Result<String> {
        match self.next_line()? {
            Some(l) => Ok(l),
            None => {
                self.line_no += 1;
                Err(self.error(format!("unexpected end of file, expected {what}")))
            }
        }
    }

    fn keyword_tokens(&mut self, keyword: &str) -> Result<Vec<String>> {
        let line = self.next_required(keyword)?;
        let mut tokens = line.split_whitespace();
        if tokens.next() != Some(keyword) {
            return Err(self.error(format!("expected `{keyword}` line")));
        }
        Ok(tokens.map(str::to_owned).collect())
    }

    fn parse_floats(&self, line: &str) -> Result<Vec<f64>> {
        line.split_whitespace()
            .enumerate()
            .map(|(col, tok)| {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| self.error(format!("column {}: invalid number `{tok}`", col + 1)))?;
                if !v.is_finite() {
                    return Err(self.error(format!("column {}: non-finite value `{tok}`", col + 1)));
                }
                Ok(v)
            })
            .collect()
    }

    fn keyword_floats(&mut self, keyword: &str, count: Option<usize>) -> Result<Vec<f64>> {
        let tokens = self.keyword_tokens(keyword)?;
        let values = self.parse_floats(&tokens.join(" "))?;
        if let Some(n) = count {
            if values.len() != n {
                return Err(self.error(format!("`{keyword}` needs {n} values, found {}", values.len())));
            }
        }
        Ok(values)
    }

    fn keyword_ints(&mut self, keyword: &str, count: Option<usize>) -> Result<Vec<u64>> {
        let tokens = self.keyword_tokens(keyword)?;
        let values = tokens
            .iter()
            .map(|t| t.parse::<u64>().map_err(|_| self.error(format!("invalid integer `{t}`"))))
            .collect::<Result<Vec<_>>>()?;
        match count {
            Some(n) if values.len() != n => {
                Err(self.error(format!("`{keyword}` needs {n} values, found {}", values.len())))
            }
            None if values.is_empty() => Err(self.error(format!("`{keyword}` needs values"))),
            _ => Ok(values),
        }
    }
}

/// Fits a [`GridCkm`] by per-cell averaging of log-variances.
///
/// Samples outside `bounds` land in the nearest border cell. Cells that
/// receive no samples for some `k` take the value of the nearest populated
/// cell (grid steps, ties to the lower `(ix, iy)`).
pub fn fit_grid(
    samples: &[VarianceSample],
    bounds: GridBounds,
    resolution: (usize, usize),
    k_values: &[u32],
) -> Result<GridCkm> {
    if samples.is_empty() {
        return Err(Error::contract("cannot fit a grid from zero samples"));
    }
    bounds.validate()?;
    check_k_values(k_values)?;
    let (nx, ny) = resolution;
    if nx < 2 || ny < 2 {
        return Err(Error::contract("grid resolution must be at least 2x2"));
    }
    // Placeholder used only to compute cell indices.
    let shape = GridCkm {
        bounds,
        nx,
        ny,
        k_values: k_values.to_vec(),
        grids: Vec::new(),
    };

    let cells = nx * ny;
    let mut sums = vec![[vec![0.0; cells], vec![0.0; cells]]; k_values.len()];
    let mut counts = vec![vec![0usize; cells]; k_values.len()];
    for s in samples {
        let ki = shape.k_index(s.k)?;
        if !(s.var_x > 0.0 && s.var_y > 0.0) || !s.var_x.is_finite() || !s.var_y.is_finite() {
            return Err(Error::contract(format!(
                "sample at ({}, {}) has non-positive variance",
                s.l_x, s.l_y
            )));
        }
        if !s.l_x.is_finite() || !s.l_y.is_finite() {
            return Err(Error::contract("sample position must be finite"));
        }
        let (ix, iy) = shape.cell_of(s.l_x, s.l_y);
        let c = iy * nx + ix;
        sums[ki][0][c] += s.var_x.ln();
        sums[ki][1][c] += s.var_y.ln();
        counts[ki][c] += 1;
    }

    let mut grids = Vec::with_capacity(k_values.len());
    for (ki, &k) in k_values.iter().enumerate() {
        let count = &counts[ki];
        if count.iter().all(|c| *c == 0) {
            return Err(Error::contract(format!("no samples for k={k}")));
        }
        let source = nearest_populated(count, nx, ny);
        let mut axes: [Vec<f64>; 2] = [vec![0.0; cells], vec![0.0; cells]];
        for (axis, out) in axes.iter_mut().enumerate() {
            for c in 0..cells {
                let s = source[c];
                out[c] = sums[ki][axis][s] / count[s] as f64;
            }
        }
        grids.push(axes);
    }
    GridCkm::new(bounds, resolution, k_values.to_vec(), grids)
}

/// For each cell, the index of the populated cell it copies from.
///
/// Level-synchronous BFS from all populated cells; a cell reached at
/// distance d inherits the smallest `(ix, iy)` source among its neighbours at
/// distance d−1, which equals the smallest source at minimum grid distance.
fn nearest_populated(count: &[usize], nx: usize, ny: usize) -> Vec<usize> {
    let key = |c: usize| (c % nx, c / nx);
    let mut dist = vec![usize::MAX; count.len()];
    let mut source = vec![usize::MAX; count.len()];
    let mut frontier: Vec<usize> = (0..count.len()).filter(|&c| count[c] > 0).collect();
    for &c in &frontier {
        dist[c] = 0;
        source[c] = c;
    }
    let mut d = 0;
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for &c in &frontier {
            let (ix, iy) = (c % nx, c / nx);
            let neighbours = [
                (ix > 0).then(|| c - 1),
                (ix + 1 < nx).then(|| c + 1),
                (iy > 0).then(|| c - nx),
                (iy + 1 < ny).then(|| c + nx),
            ];
            for n in neighbours.into_iter().flatten() {
                if dist[n] == usize::MAX {
                    dist[n] = d + 1;
                    source[n] = source[c];
                    next.push(n);
                } else if dist[n] == d + 1 && key(source[c]) < key(source[n]) {
                    source[n] = source[c];
                }
            }
        }
        frontier = next;
        d += 1;
    }
    source
}

/// Draws `n` noiseless samples of `field` uniformly over `bounds`, cycling
/// through `k_values`.
pub fn sample_field<R: Rng + ?Sized>(
    field: &AnalyticCkm,
    bounds: GridBounds,
    k_values: &[u32],
    n: usize,
    rng: &mut R,
) -> Result<Vec<VarianceSample>> {
    bounds.validate()?;
    check_k_values(k_values)?;
    (0..n)
        .map(|i| {
            let l_x = rng.random_range(bounds.x_min..bounds.x_max);
            let l_y = rng.random_range(bounds.y_min..bounds.y_max);
            let k = k_values[i % k_values.len()];
            let v = field.variance_at(l_x, l_y, k)?;
            Ok(VarianceSample { l_x, l_y, k, var_x: v[(0, 0)], var_y: v[(1, 1)] })
        })
        .collect()
}

pub fn write_samples<W: Write>(samples: &[VarianceSample], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["l_x", "l_y", "k", "var_x", "var_y"])
        .map_err(csv_error)?;
    for s in samples {
        w.write_record([
            format!("{:.16e}", s.l_x),
            format!("{:.16e}", s.l_y),
            s.k.to_string(),
            format!("{:.16e}", s.var_x),
            format!("{:.16e}", s.var_y),
        ])
        .map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::io("<samples>", e))
}

pub fn read_samples<R: std::io::Read>(source: R) -> Result<Vec<VarianceSample>> {
    let mut r = csv::Reader::from_reader(source);
    r.deserialize()
        .map(|row| row.map_err(csv_error))
        .collect()
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse { line, message: e.to_string() }
}
