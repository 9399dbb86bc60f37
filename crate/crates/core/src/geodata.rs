//! ESRI-style ASCII raster grids, their normalization onto the unit
//! computational domain, and the data problem built from bedrock and
//! ice-thickness rasters.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2};

use crate::energy::{
    total_loss, BoxDomain, FieldSample, LossBreakdown, ProblemSpec, SampleBatch, ScalarField, TrialFunction, VectorField,
};
use crate::error::{Error, Result};

/// Elevations are multiplied by this factor before training.
pub const ELEVATION_SCALE: f64 = 1.0 / 3000.0;

/// Published ranges of the Greenland rasters, in meters.
pub const BEDROCK_RANGE: (f64, f64) = (-963.1, 3239.0);
pub const THICKNESS_RANGE: (f64, f64) = (0.0, 3366.5);

/// Raster with the first stored row at the top (north).
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub ncols: usize,
    pub nrows: usize,
    pub cell_size: f64,
    /// Lower-left corner of the lower-left cell.
    pub origin: (f64, f64),
    pub nodata: f64,
    /// Row-major, `nrows × ncols`; masked cells hold the sentinel.
    pub values: Vec<f64>,
    /// `true` for cells carrying data.
    pub mask: Vec<bool>,
}

impl Grid {
    pub fn new(ncols: usize, nrows: usize, cell_size: f64, origin: (f64, f64), nodata: f64, values: Vec<f64>) -> Result<Self> {
        if ncols == 0 || nrows == 0 {
            return Err(Error::Config("grid dimensions must be positive".into()));
        }
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(Error::Config(format!("cell size {cell_size} must be positive")));
        }
        if values.len() != ncols * nrows {
            return Err(Error::Config(format!("{} values for a {nrows}×{ncols} grid", values.len())));
        }
        let mask = values.iter().map(|&v| v != nodata && v.is_finite()).collect();
        Ok(Grid { ncols, nrows, cell_size, origin, nodata, values, mask })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let i = row * self.ncols + col;
        self.mask[i].then(|| self.values[i])
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Minimum and maximum over unmasked cells.
    pub fn value_range(&self) -> Option<(f64, f64)> {
        self.values
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .fold(None, |acc, (&v, _)| match acc {
                None => Some((v, v)),
                Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
            })
    }

    /// Warnings for unmasked values outside `[lo, hi]`.
    pub fn range_warnings(&self, what: &str, (lo, hi): (f64, f64)) -> Vec<String> {
        match self.value_range() {
            Some((min, max)) if min < lo || max > hi => {
                vec![format!("{what} values span [{min}, {max}], outside the expected [{lo}, {hi}]")]
            }
            Some(_) => Vec::new(),
            None => vec![format!("{what} grid has no valid cells")],
        }
    }

    /// Center of cell `(row, col)` in map coordinates.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin.0 + (col as f64 + 0.5) * self.cell_size,
            self.origin.1 + ((self.nrows - 1 - row) as f64 + 0.5) * self.cell_size,
        )
    }

    pub fn same_georeference(&self, other: &Grid) -> bool {
        self.ncols == other.ncols
            && self.nrows == other.nrows
            && self.cell_size == other.cell_size
            && self.origin == other.origin
    }

    /// ASCII serialization; values use the shortest exact decimal form so
    /// parsing the output reproduces the grid bit for bit.
    pub fn to_ascii(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * 8 + 128);
        let _ = writeln!(out, "ncols {}", self.ncols);
        let _ = writeln!(out, "nrows {}", self.nrows);
        let _ = writeln!(out, "xllcorner {}", self.origin.0);
        let _ = writeln!(out, "yllcorner {}", self.origin.1);
        let _ = writeln!(out, "cellsize {}", self.cell_size);
        let _ = writeln!(out, "NODATA_value {}", self.nodata);
        for row in self.values.chunks(self.ncols) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        parse_grid(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ascii())?;
        Ok(())
    }

    /// Bilinear value at map coordinates `(x, y)` using only unmasked cells;
    /// `None` when none of the surrounding cells has data. Points outside the
    /// cell-center lattice are clamped onto it.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<f64> {
        let fx = ((x - self.origin.0) / self.cell_size - 0.5).clamp(0.0, (self.ncols - 1) as f64);
        // Row coordinate counted from the bottom.
        let fy = ((y - self.origin.1) / self.cell_size - 0.5).clamp(0.0, (self.nrows - 1) as f64);
        let c0 = (fx.floor() as usize).min(self.ncols.saturating_sub(2));
        let r0 = (fy.floor() as usize).min(self.nrows.saturating_sub(2));
        let (tx, ty) = (fx - c0 as f64, fy - r0 as f64);
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for (dc, wx) in [(0, 1.0 - tx), (1, tx)] {
            for (dr, wy) in [(0, 1.0 - ty), (1, ty)] {
                let (c, rb) = (c0 + dc, r0 + dr);
                if c >= self.ncols || rb >= self.nrows {
                    continue;
                }
                let w = wx * wy;
                if w == 0.0 {
                    continue;
                }
                if let Some(v) = self.get(self.nrows - 1 - rb, c) {
                    acc += w * v;
                    wsum += w;
                }
            }
        }
        (wsum > 0.0).then(|| acc / wsum)
    }

    /// Coarser grid with `factor`× larger cells, same upper-left corner, and
    /// `ceil(n / factor)` cells per axis. Each coarse value is the bilinear
    /// interpolant of the fine grid at the coarse cell center.
    pub fn downsample(&self, factor: usize) -> Result<Grid> {
        if factor == 0 {
            return Err(Error::Config("downsample factor must be >= 1".into()));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let ncols = self.ncols.div_ceil(factor);
        let nrows = self.nrows.div_ceil(factor);
        let cell = self.cell_size * factor as f64;
        let top = self.origin.1 + self.nrows as f64 * self.cell_size;
        let origin = (self.origin.0, top - nrows as f64 * cell);
        let mut values = Vec::with_capacity(ncols * nrows);
        for r in 0..nrows {
            for c in 0..ncols {
                let x = origin.0 + (c as f64 + 0.5) * cell;
                let y = origin.1 + ((nrows - 1 - r) as f64 + 0.5) * cell;
                values.push(self.sample_bilinear(x, y).unwrap_or(self.nodata));
            }
        }
        Grid::new(ncols, nrows, cell, origin, self.nodata, values)
    }
}

/// Parses an ASCII raster: six header keys in any order (corner or center
/// origin), then `nrows × ncols` whitespace-separated values.
pub fn parse_grid(text: &str) -> Result<Grid> {
    let mut ncols = None;
    let mut nrows = None;
    let mut xll: Option<(f64, bool)> = None;
    let mut yll: Option<(f64, bool)> = None;
    let mut cell = None;
    let mut nodata = None;
    let mut values = Vec::new();
    let err = |line: usize, column: usize, message: String| Error::Parse { line, column, message };

    let mut in_header = true;
    for (ln, line) in text.lines().enumerate() {
        let line_no = ln + 1;
        let mut tokens = tokenize(line);
        let Some(&(col, first)) = tokens.first() else { continue };
        let key = first.to_ascii_lowercase();
        let is_key = first.chars().next().is_some_and(|c| c.is_ascii_alphabetic());
        if in_header && is_key {
            if tokens.len() != 2 {
                return Err(err(line_no, col, format!("header '{first}' needs exactly one value")));
            }
            let (vcol, raw) = tokens[1];
            let num = raw.parse::<f64>().map_err(|_| err(line_no, vcol, format!("invalid number '{raw}'")))?;
            let count = |v: f64| -> Result<usize> {
                if v >= 1.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(err(line_no, vcol, format!("'{raw}' is not a positive integer")))
                }
            };
            let slot_taken = match key.as_str() {
                "ncols" => ncols.replace(count(num)?).is_some(),
                "nrows" => nrows.replace(count(num)?).is_some(),
                "xllcorner" => xll.replace((num, false)).is_some(),
                "xllcenter" => xll.replace((num, true)).is_some(),
                "yllcorner" => yll.replace((num, false)).is_some(),
                "yllcenter" => yll.replace((num, true)).is_some(),
                "cellsize" => cell.replace(num).is_some(),
                "nodata_value" => nodata.replace(num).is_some(),
                _ => return Err(err(line_no, col, format!("unknown header key '{first}'"))),
            };
            if slot_taken {
                return Err(err(line_no, col, format!("duplicate header key '{first}'")));
            }
            continue;
        }
        in_header = false;
        for (c, tok) in tokens.drain(..) {
            let v = tok.parse::<f64>().map_err(|_| err(line_no, c, format!("invalid value '{tok}'")))?;
            values.push(v);
        }
    }
    let missing = |k: &str| err(1, 1, format!("missing header key '{k}'"));
    let ncols = ncols.ok_or_else(|| missing("ncols"))?;
    let nrows = nrows.ok_or_else(|| missing("nrows"))?;
    let cell = cell.ok_or_else(|| missing("cellsize"))?;
    let (x, xc) = xll.ok_or_else(|| missing("xllcorner"))?;
    let (y, yc) = yll.ok_or_else(|| missing("yllcorner"))?;
    let nodata = nodata.unwrap_or(-9999.0);
    if !(cell.is_finite() && cell > 0.0) {
        return Err(missing("cellsize"));
    }
    let expected = ncols * nrows;
    if values.len() != expected {
        let line = text.lines().count().max(1);
        return Err(err(line, 1, format!("expected {expected} values, found {}", values.len())));
    }
    let origin = (if xc { x - 0.5 * cell } else { x }, if yc { y - 0.5 * cell } else { y });
    Grid::new(ncols, nrows, cell, origin, nodata, values)
}

/// Whitespace-separated tokens with their 1-based starting column.
fn tokenize(line: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in line.char_indices() {
        match (ch.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                out.push((s + 1, &line[s..i]));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s + 1, &line[s..]));
    }
    out
}

/// Affine map from map coordinates to the computational domain: the longer
/// side of the cell-center lattice becomes `[0, 1]`, the other keeps its
/// aspect ratio.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainMap {
    pub x0: f64,
    pub y0: f64,
    pub length: f64,
}

impl DomainMap {
    pub fn for_grid(g: &Grid) -> Self {
        let (x0, y0) = g.cell_center(g.nrows - 1, 0);
        let wx = (g.ncols - 1) as f64 * g.cell_size;
        let wy = (g.nrows - 1) as f64 * g.cell_size;
        DomainMap { x0, y0, length: wx.max(wy).max(g.cell_size) }
    }

    pub fn to_unit(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.x0) / self.length, (y - self.y0) / self.length)
    }

    pub fn from_unit(&self, u: f64, v: f64) -> (f64, f64) {
        (self.x0 + u * self.length, self.y0 + v * self.length)
    }
}

/// Grid values scaled by `scale` and interpolated bilinearly on the
/// computational domain. Masked cells take the value of the nearest valid
/// cell, so interpolation never reads the sentinel.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedField {
    map: DomainMap,
    scale: f64,
    /// Lattice values indexed `[col, row-from-bottom]`, scaled and filled.
    nodes: Array2<f64>,
    /// Lattice spacing in computational units.
    step: f64,
    filled_cells: usize,
}

impl NormalizedField {
    pub fn new(grid: &Grid, scale: f64) -> Result<Self> {
        if grid.valid_count() == 0 {
            return Err(Error::Config("grid has no valid cells".into()));
        }
        let map = DomainMap::for_grid(grid);
        let (nx, ny) = (grid.ncols, grid.nrows);
        let filled = fill_nearest(grid);
        let mut nodes = Array2::zeros((nx, ny));
        for c in 0..nx {
            for rb in 0..ny {
                nodes[[c, rb]] = scale * filled[(ny - 1 - rb) * nx + c];
            }
        }
        let filled_cells = grid.len() - grid.valid_count();
        Ok(NormalizedField { map, scale, nodes, step: grid.cell_size / map.length, filled_cells })
    }

    pub fn map(&self) -> DomainMap {
        self.map
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Number of masked cells that were filled from a neighbor.
    pub fn filled_cells(&self) -> usize {
        self.filled_cells
    }

    /// The computational domain `[0, wx] × [0, wy]` with `max(wx, wy) = 1`
    /// (degenerate single-row or single-column grids get width one cell).
    pub fn domain(&self) -> BoxDomain {
        let (nx, ny) = self.nodes.dim();
        let wx = ((nx - 1) as f64 * self.step).max(self.step);
        let wy = ((ny - 1) as f64 * self.step).max(self.step);
        BoxDomain::new(vec![0.0, 0.0], vec![wx, wy]).expect("positive extents")
    }

    fn locate(&self, t: f64, n: usize) -> (usize, f64) {
        if n == 1 {
            return (0, 0.0);
        }
        let f = (t / self.step).clamp(0.0, (n - 1) as f64);
        let i = (f.floor() as usize).min(n - 2);
        (i, f - i as f64)
    }

    /// Value and gradient (per computational unit) at `(x, y)`; outside the
    /// lattice the nearest boundary value is used and the gradient is that
    /// of the boundary cell.
    pub fn eval(&self, x: f64, y: f64) -> (f64, [f64; 2]) {
        let (nx, ny) = self.nodes.dim();
        let (i, tx) = self.locate(x, nx);
        let (j, ty) = self.locate(y, ny);
        let at = |a: usize, b: usize| self.nodes[[a.min(nx - 1), b.min(ny - 1)]];
        let (v00, v10, v01, v11) = (at(i, j), at(i + 1, j), at(i, j + 1), at(i + 1, j + 1));
        let value = v00 * (1.0 - tx) * (1.0 - ty) + v10 * tx * (1.0 - ty) + v01 * (1.0 - tx) * ty + v11 * tx * ty;
        let gx = if nx > 1 { ((v10 - v00) * (1.0 - ty) + (v11 - v01) * ty) / self.step } else { 0.0 };
        let gy = if ny > 1 { ((v01 - v00) * (1.0 - tx) + (v11 - v10) * tx) / self.step } else { 0.0 };
        (value, [gx, gy])
    }

    pub fn value(&self, x: f64, y: f64) -> f64 {
        self.eval(x, y).0
    }

    pub fn scalar_field(self: &Arc<Self>) -> ScalarField {
        let f = Arc::clone(self);
        Arc::new(move |p: &[f64]| f.value(p[0], p[1]))
    }

    pub fn gradient_field(self: &Arc<Self>) -> VectorField {
        let f = Arc::clone(self);
        Arc::new(move |p: &[f64], out: &mut [f64]| {
            let g = f.eval(p[0], p[1]).1;
            out[0] = g[0];
            out[1] = g[1];
        })
    }
}

impl TrialFunction for NormalizedField {
    fn input_dim(&self) -> usize {
        2
    }

    fn evaluate(&self, points: ArrayView2<'_, f64>, with_gradient: bool) -> Result<FieldSample> {
        if points.ncols() != 2 {
            return Err(Error::Structure("grid fields are two-dimensional".into()));
        }
        let n = points.nrows();
        let mut values = Array1::zeros(n);
        let mut gradients = with_gradient.then(|| Array2::zeros((n, 2)));
        for (i, row) in points.rows().into_iter().enumerate() {
            let (v, g) = self.eval(row[0], row[1]);
            values[i] = v;
            if let Some(gr) = gradients.as_mut() {
                gr[[i, 0]] = g[0];
                gr[[i, 1]] = g[1];
            }
        }
        Ok(FieldSample { values, gradients })
    }
}

/// Values with every masked cell replaced by its nearest valid cell (ties
/// broken by scan order).
fn fill_nearest(grid: &Grid) -> Vec<f64> {
    let (nx, ny) = (grid.ncols, grid.nrows);
    let mut out = grid.values.clone();
    let valid: Vec<(usize, usize)> = (0..ny * nx).filter(|&i| grid.mask[i]).map(|i| (i / nx, i % nx)).collect();
    for i in 0..nx * ny {
        if grid.mask[i] {
            continue;
        }
        let (r, c) = (i / nx, i % nx);
        let nearest = valid
            .iter()
            .min_by_key(|&&(vr, vc)| {
                let dr = vr as i64 - r as i64;
                let dc = vc as i64 - c as i64;
                dr * dr + dc * dc
            })
            .expect("at least one valid cell");
        out[i] = grid.values[nearest.0 * nx + nearest.1];
    }
    out
}

/// A normalized field read through another grid's domain map, so data at one
/// resolution can be compared with a problem built at another.
#[derive(Clone, Debug)]
pub struct MappedField {
    field: Arc<NormalizedField>,
    from: DomainMap,
}

impl MappedField {
    pub fn new(field: Arc<NormalizedField>, from: DomainMap) -> Self {
        MappedField { field, from }
    }

    fn eval(&self, u: f64, v: f64) -> (f64, [f64; 2]) {
        let (x, y) = self.from.from_unit(u, v);
        let (a, b) = self.field.map.to_unit(x, y);
        let (val, g) = self.field.eval(a, b);
        let k = self.from.length / self.field.map.length;
        (val, [g[0] * k, g[1] * k])
    }
}

impl TrialFunction for MappedField {
    fn input_dim(&self) -> usize {
        2
    }

    fn evaluate(&self, points: ArrayView2<'_, f64>, with_gradient: bool) -> Result<FieldSample> {
        if points.ncols() != 2 {
            return Err(Error::Structure("grid fields are two-dimensional".into()));
        }
        let n = points.nrows();
        let mut values = Array1::zeros(n);
        let mut gradients = with_gradient.then(|| Array2::zeros((n, 2)));
        for (i, row) in points.rows().into_iter().enumerate() {
            let (v, g) = self.eval(row[0], row[1]);
            values[i] = v;
            if let Some(gr) = gradients.as_mut() {
                gr[[i, 0]] = g[0];
                gr[[i, 1]] = g[1];
            }
        }
        Ok(FieldSample { values, gradients })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GeoOptions {
    /// Use the bedrock gradient as the drift field Ψ instead of zero.
    pub drift_from_bedrock: bool,
    /// Value scale; [`ELEVATION_SCALE`] by default.
    pub scale: Option<f64>,
}

/// The data problem and the normalized fields it was built from.
#[derive(Clone)]
pub struct GeoProblem {
    pub spec: ProblemSpec,
    pub bedrock: Arc<NormalizedField>,
    /// Bedrock plus thickness: the surface-elevation-like solved variable.
    pub surface: Arc<NormalizedField>,
}

/// Obstacle from the bedrock, boundary data from bedrock + thickness on the
/// rectangle boundary, zero source; coordinates mapped onto the unit square
/// with the aspect ratio preserved.
pub fn build_problem(bedrock: &Grid, thickness: &Grid, p: f64, alpha: f64, beta: f64, opts: &GeoOptions) -> Result<GeoProblem> {
    if !bedrock.same_georeference(thickness) {
        return Err(Error::Config(format!(
            "bedrock {}×{} and thickness {}×{} grids do not share shape and georeference",
            bedrock.nrows, bedrock.ncols, thickness.nrows, thickness.ncols
        )));
    }
    let scale = opts.scale.unwrap_or(ELEVATION_SCALE);
    let surface_values = bedrock
        .values
        .iter()
        .zip(&thickness.values)
        .zip(bedrock.mask.iter().zip(&thickness.mask))
        .map(|((&b, &t), (&mb, &mt))| if mb && mt { b + t } else { bedrock.nodata })
        .collect();
    let surface = Grid::new(bedrock.ncols, bedrock.nrows, bedrock.cell_size, bedrock.origin, bedrock.nodata, surface_values)?;
    let bed = Arc::new(NormalizedField::new(bedrock, scale)?);
    let surf = Arc::new(NormalizedField::new(&surface, scale)?);
    let spec = ProblemSpec {
        name: "grid".into(),
        domain: bed.domain(),
        p,
        obstacle: bed.scalar_field(),
        source: Arc::new(|_: &[f64]| 0.0),
        boundary: surf.scalar_field(),
        drift: opts.drift_from_bedrock.then(|| bed.gradient_field()),
        alpha,
        beta,
        exact: None,
    };
    spec.validate()?;
    Ok(GeoProblem { spec, bedrock: bed, surface: surf })
}

/// The three loss terms with a data field in place of the network.
pub fn data_benchmark_losses(spec: &ProblemSpec, surface: &dyn TrialFunction, batch: &SampleBatch) -> Result<LossBreakdown> {
    total_loss(surface, spec, batch)
}

/// `x,y,value` CSV (or `x,value` in 1D) for plotting a field on points.
pub fn xy_value_csv(points: ArrayView2<'_, f64>, values: &[f64]) -> String {
    let mut out = String::from(if points.ncols() == 1 { "x,value\n" } else { "x,y,value\n" });
    for (row, v) in points.rows().into_iter().zip(values) {
        for c in row {
            let _ = write!(out, "{c},");
        }
        let _ = writeln!(out, "{v}");
    }
    out
}

/// Evaluates `field` (in computational coordinates, scaled units) at the cell
/// centers of `template` and returns it as a raster in map units.
pub fn field_to_grid(template: &Grid, map: DomainMap, scale: f64, field: &dyn TrialFunction) -> Result<Grid> {
    let mut pts = Array2::zeros((template.len(), 2));
    for r in 0..template.nrows {
        for c in 0..template.ncols {
            let (x, y) = template.cell_center(r, c);
            let (u, v) = map.to_unit(x, y);
            pts[[r * template.ncols + c, 0]] = u;
            pts[[r * template.ncols + c, 1]] = v;
        }
    }
    let vals = field.evaluate(pts.view(), false)?.values;
    let values =
        vals.iter().zip(&template.mask).map(|(&v, &m)| if m { v / scale } else { template.nodata }).collect();
    Grid::new(template.ncols, template.nrows, template.cell_size, template.origin, template.nodata, values)
}

/// Greenland-like synthetic rasters for desk-scale runs: an island with
/// ocean margins, rugged ice-free coasts with relief down to a few cells, and
/// an ice dome whose smooth surface buries the interior bedrock. Values stay
/// within the published bedrock and thickness ranges; the top-left cell is
/// `nodata`.
pub fn synthetic_grids(ncols: usize, nrows: usize, cell_size: f64) -> Result<(Grid, Grid)> {
    use std::f64::consts::TAU;
    let mut bed = Vec::with_capacity(ncols * nrows);
    let mut thick = Vec::with_capacity(ncols * nrows);
    let (w, h) = (ncols as f64, nrows as f64);
    for r in 0..nrows {
        for c in 0..ncols {
            // Cell indices from the lower-left corner.
            let (i, j) = (c as f64 + 0.5, (nrows - 1 - r) as f64 + 0.5);
            let (x, y) = (i / w, j / h);
            // Island shape: s < 1 on land.
            let s = ((x - 0.5) / 0.40).powi(2) + ((y - 0.52) / 0.44).powi(2) + 0.08 * (TAU * 3.0 * x).sin() * (TAU * 2.0 * y).cos();
            let relief = 220.0 * (TAU * i / 17.0 + 0.4).sin() * (TAU * j / 23.0 + 1.1).cos()
                + 60.0 * (TAU * i / 7.0 + 0.9).sin() * (TAU * j / 9.0 + 0.3).sin()
                + 350.0 * (TAU * i / 61.0).cos() * (TAU * j / 53.0 + 0.7).sin();
            let b = if s < 1.0 {
                // Coastal mountains, a lower interior basin.
                let coast = (1.0 - (s - 0.8).abs() / 0.5).max(0.0);
                200.0 + 900.0 * coast + relief
            } else {
                (-250.0 - 500.0 * (s - 1.0) + 0.4 * relief).max(-950.0)
            };
            let surface = 3000.0 * (1.0 - s / 0.8).max(0.0).sqrt();
            let t = if s < 0.8 { (surface - b).clamp(0.0, 3300.0) } else { 0.0 };
            bed.push(b);
            thick.push(t);
        }
    }
    let nodata = -9999.0;
    bed[0] = nodata;
    thick[0] = nodata;
    Ok((
        Grid::new(ncols, nrows, cell_size, (0.0, 0.0), nodata, bed)?,
        Grid::new(ncols, nrows, cell_size, (0.0, 0.0), nodata, thick)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 5000\nNODATA_value -9999\n1 2\n3 -9999\n";

    #[test]
    fn parses_fixture() {
        let g = parse_grid(FIXTURE).unwrap();
        assert_eq!((g.ncols, g.nrows, g.len(), g.valid_count()), (2, 2, 4, 3));
        assert_eq!(g.get(1, 1), None);
        assert_eq!(g.get(1, 0), Some(3.0));
        assert_eq!(g.cell_center(0, 0), (2500.0, 7500.0));
    }

    #[test]
    fn header_order_and_center_origin() {
        let text = "cellsize 10\nNODATA_VALUE -1\nyllcenter 5\nNROWS 1\nxllcenter 5\nncols 3\n1 2 3\n";
        let g = parse_grid(text).unwrap();
        assert_eq!(g.origin, (0.0, 0.0));
        assert_eq!(g.values, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn parse_errors_carry_positions() {
        let bad_token = FIXTURE.replace("3 -9999", "3 x9");
        match parse_grid(&bad_token) {
            Err(Error::Parse { line, column, .. }) => assert_eq!((line, column), (8, 3)),
            other => panic!("{other:?}"),
        }
        let short = FIXTURE.replace("3 -9999\n", "3\n");
        assert!(matches!(parse_grid(&short), Err(Error::Parse { .. })));
        let bad_header = FIXTURE.replace("ncols 2", "ncols 2.5");
        assert!(matches!(parse_grid(&bad_header), Err(Error::Parse { line: 1, column: 7, .. })));
        assert!(parse_grid("nrows 1\n1\n").is_err());
        assert!(parse_grid(&FIXTURE.replace("cellsize", "cellsz")).is_err());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut g = parse_grid(FIXTURE).unwrap();
        g.values[0] = 0.1 + 0.2;
        let g = Grid::new(g.ncols, g.nrows, g.cell_size, g.origin, g.nodata, g.values).unwrap();
        let back = parse_grid(&g.to_ascii()).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.values[0].to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn flat_data_gives_zero_fields() {
        let z = Grid::new(4, 3, 1.0, (0.0, 0.0), -9999.0, vec![0.0; 12]).unwrap();
        let prob = build_problem(&z, &z, 3.0, 1.0, 1.0, &GeoOptions::default()).unwrap();
        for pt in [[0.0, 0.0], [0.5, 0.3], [1.0, 2.0 / 3.0]] {
            assert_eq!((prob.spec.obstacle)(&pt), 0.0);
            assert_eq!((prob.spec.boundary)(&pt), 0.0);
        }
    }

    #[test]
    fn aspect_ratio_and_map_inverse() {
        let g = Grid::new(301, 561, 5000.0, (-800_000.0, -3_400_000.0), -9999.0, vec![1.0; 301 * 561]).unwrap();
        let f = NormalizedField::new(&g, ELEVATION_SCALE).unwrap();
        let d = f.domain();
        assert!((d.upper()[1] - 1.0).abs() < 1e-15);
        assert!((d.upper()[0] - 300.0 / 560.0).abs() < 1e-15);
        let m = f.map();
        for (x, y) in [(-790_000.0, -3_000_000.0), (123.5, 4.25e6)] {
            let (u, v) = m.to_unit(x, y);
            let (bx, by) = m.from_unit(u, v);
            assert!((bx - x).abs() <= 1e-12 * x.abs().max(1.0));
            assert!((by - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn interpolation_reproduces_nodes() {
        let vals: Vec<f64> = (0..20).map(|i| (i * i) as f64 - 3.0).collect();
        let g = Grid::new(5, 4, 2.0, (10.0, 20.0), -9999.0, vals).unwrap();
        let f = NormalizedField::new(&g, 0.5).unwrap();
        for r in 0..4 {
            for c in 0..5 {
                let (x, y) = g.cell_center(r, c);
                let (u, v) = f.map().to_unit(x, y);
                assert!((f.value(u, v) - 0.5 * g.get(r, c).unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_cells_use_nearest_valid_value() {
        let g = parse_grid(FIXTURE).unwrap();
        let f = NormalizedField::new(&g, 1.0).unwrap();
        assert_eq!(f.filled_cells(), 1);
        // The masked lower-right cell copies its nearest valid neighbor.
        let (u, v) = f.map().to_unit(7500.0, 2500.0);
        let val = f.value(u, v);
        assert!(val == 2.0 || val == 3.0);
    }

    #[test]
    fn downsampling_shape_and_accuracy() {
        let nx = 301;
        let ny = 561;
        let cs = 5000.0;
        let fun = |x: f64, y: f64| 1000.0 * (x / 4.0e5).sin() + 500.0 * (y / 6.0e5).cos();
        let mut vals = Vec::with_capacity(nx * ny);
        let proto = Grid::new(nx, ny, cs, (0.0, 0.0), -9999.0, vec![0.0; nx * ny]).unwrap();
        for r in 0..ny {
            for c in 0..nx {
                let (x, y) = proto.cell_center(r, c);
                vals.push(fun(x, y));
            }
        }
        let fine = Grid::new(nx, ny, cs, (0.0, 0.0), -9999.0, vals).unwrap();
        let coarse = fine.downsample(8).unwrap();
        assert_eq!((coarse.ncols, coarse.nrows), (38, 71));
        // Linear interpolation error bound h²/8 · (|f_xx| + |f_yy|) on the
        // coarse lattice, plus the fine-lattice error of the coarse samples.
        let hc = coarse.cell_size;
        let bound = hc * hc / 8.0 * (1000.0 / 4.0e5f64.powi(2) + 500.0 / 6.0e5f64.powi(2)) * 1.5;
        let mut worst = 0.0f64;
        for r in 0..ny {
            for c in 0..nx {
                let (x, y) = fine.cell_center(r, c);
                // Stay inside the coarse lattice hull, where no clamping occurs.
                let lo = coarse.cell_center(coarse.nrows - 1, 0);
                let hi = coarse.cell_center(0, coarse.ncols - 1);
                if x < lo.0 || x > hi.0 || y < lo.1 || y > hi.1 {
                    continue;
                }
                let v = coarse.sample_bilinear(x, y).unwrap();
                worst = worst.max((v - fine.get(r, c).unwrap()).abs());
            }
        }
        assert!(worst <= bound, "worst {worst} bound {bound}");
    }

    #[test]
    fn benchmark_losses_of_obstacle_have_no_violation() {
        let (b, t) = synthetic_grids(16, 12, 1000.0).unwrap();
        let prob = build_problem(&b, &t, 3.0, 4000.0, 4000.0, &GeoOptions::default()).unwrap();
        let batch = SampleBatch::draw(&prob.spec.domain, 256, 64, 3, 0).unwrap();
        let on_bed = data_benchmark_losses(&prob.spec, prob.bedrock.as_ref(), &batch).unwrap();
        assert_eq!(on_bed.loss2, 0.0);
        let on_surface = data_benchmark_losses(&prob.spec, prob.surface.as_ref(), &batch).unwrap();
        assert_eq!(on_surface.loss2, 0.0);
        assert!(on_surface.loss3 < 1e-20);
        assert!(on_surface.is_finite());
    }

    #[test]
    fn mapped_field_matches_direct_evaluation() {
        let (b, _) = synthetic_grids(40, 24, 1000.0).unwrap();
        let coarse = b.downsample(4).unwrap();
        let fine = Arc::new(NormalizedField::new(&b, 1.0).unwrap());
        let cmap = DomainMap::for_grid(&coarse);
        let mapped = MappedField::new(fine.clone(), cmap);
        let pts = ndarray::array![[0.2, 0.3], [0.7, 0.1]];
        let s = mapped.evaluate(pts.view(), true).unwrap();
        for (i, row) in pts.rows().into_iter().enumerate() {
            let (x, y) = cmap.from_unit(row[0], row[1]);
            let (a, c) = fine.map().to_unit(x, y);
            assert!((s.values[i] - fine.value(a, c)).abs() < 1e-12);
        }
        // Chain rule through the two maps, checked by central differences.
        let h = 1e-7;
        let g = s.gradients.unwrap();
        let at = |u: f64, v: f64| mapped.evaluate(ndarray::array![[u, v]].view(), false).unwrap().values[0];
        let fd = (at(0.2 + h, 0.3) - at(0.2 - h, 0.3)) / (2.0 * h);
        assert!((fd - g[[0, 0]]).abs() < 1e-5 * fd.abs().max(1.0));
    }

    #[test]
    fn synthetic_rasters_stay_in_published_ranges() {
        let (b, t) = synthetic_grids(301, 561, 5000.0).unwrap();
        assert!(b.range_warnings("bedrock", BEDROCK_RANGE).is_empty());
        assert!(t.range_warnings("thickness", THICKNESS_RANGE).is_empty());
        assert_eq!(b.valid_count(), b.len() - 1);
        let ice = t.values.iter().filter(|&&v| v > 0.0).count();
        assert!(ice > b.len() / 5 && ice < b.len() * 4 / 5);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Grid::new(2, 2, 1.0, (0.0, 0.0), -9999.0, vec![0.0; 4]).unwrap();
        let b = Grid::new(2, 1, 1.0, (0.0, 0.0), -9999.0, vec![0.0; 2]).unwrap();
        assert!(build_problem(&a, &b, 3.0, 1.0, 1.0, &GeoOptions::default()).is_err());
    }

    #[test]
    fn range_warnings() {
        let g = parse_grid(FIXTURE).unwrap();
        assert!(g.range_warnings("thickness", THICKNESS_RANGE).is_empty());
        assert_eq!(g.range_warnings("bedrock", (0.0, 2.5)).len(), 1);
    }
}
