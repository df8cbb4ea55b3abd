//! Problem data: the linear mean-field state/observation model, its quadratic
//! cost weights, the simulation grid and the standing-assumption checks.
//!
//! Coefficients are piecewise constant on a uniform grid. A path holds either a
//! single matrix or one block per equal-width sub-interval of `[0, T]`; a grid
//! may refine the blocks as long as its step count is a multiple of the block
//! count.
//!
//! Scenario documents are TOML or JSON with the sections `dims {n, k}`,
//! `horizon {T, n_steps}`, `init {x0}`, `coefficients {A1, ..., M2, h}` and
//! `assumptions {delta}`. A coefficient is a row-major nested array, a list of
//! such arrays (piecewise), or a scalar. A nonzero scalar is only accepted for
//! a 1×1 shape; `0` is accepted for any shape and means the zero matrix.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::linalg;

/// Shipped scalar smoke scenario.
pub const SMOKE_SCENARIO_TOML: &str = include_str!("../scenarios/smoke.toml");

const SYMMETRY_RTOL: f64 = 1e-10;
const PSD_RTOL: f64 = 1e-12;

/// Uniform time grid on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidConfig(format!("horizon must be > 0, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(Error::InvalidConfig("n_steps must be >= 1".into()));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Grid point `t_j = j·dt`.
    pub fn t(&self, j: usize) -> f64 {
        j as f64 * self.dt()
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n_steps).map(move |j| self.t(j))
    }
}

/// Piecewise-constant matrix-valued function of time.
#[derive(Debug, Clone, PartialEq)]
pub enum CoefficientPath {
    Constant(DMatrix<f64>),
    Piecewise(Vec<DMatrix<f64>>),
}

impl CoefficientPath {
    pub fn constant(m: DMatrix<f64>) -> Self {
        CoefficientPath::Constant(m)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        CoefficientPath::Constant(DMatrix::zeros(rows, cols))
    }

    pub fn scalar(v: f64) -> Self {
        CoefficientPath::Constant(DMatrix::from_element(1, 1, v))
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        match self {
            CoefficientPath::Constant(m) => std::slice::from_ref(m),
            CoefficientPath::Piecewise(v) => v,
        }
    }

    pub fn len(&self) -> usize {
        self.blocks().len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks().is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        let b = &self.blocks()[0];
        (b.nrows(), b.ncols())
    }

    /// Block active on the grid interval that starts at `t_index`; the
    /// terminal index maps to the last block.
    pub fn at(&self, grid: &TimeGrid, t_index: usize) -> Result<&DMatrix<f64>> {
        let n_steps = grid.n_steps();
        if t_index > n_steps {
            return Err(Error::IndexOutOfRange { index: t_index, n_steps });
        }
        match self {
            CoefficientPath::Constant(m) => Ok(m),
            CoefficientPath::Piecewise(blocks) => {
                let len = blocks.len();
                if len == 0 || !n_steps.is_multiple_of(len) {
                    return Err(Error::DimensionMismatch {
                        name: "coefficient path".into(),
                        expected: format!("1 block or a divisor of n_steps = {n_steps}"),
                        found: format!("{len} blocks"),
                    });
                }
                let interval = t_index.min(n_steps - 1);
                Ok(&blocks[interval * len / n_steps])
            }
        }
    }

    fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn max_abs(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|b| b.iter())
            .fold(0.0f64, |a, v| a.max(v.abs()))
    }
}

/// Looks up the matrix of `path` at `t_index` on `grid`.
pub fn coeff_at<'a>(path: &'a CoefficientPath, grid: &TimeGrid, t_index: usize) -> Result<&'a DMatrix<f64>> {
    path.at(grid, t_index)
}

/// Coefficients of the linear mean-field model and quadratic cost.
///
/// Drift `A1 x + A2 E[x] + B1 u + B2 E[u]`, `dW` loading `C1 x + C2 E[x] +
/// D1 u + D2 E[u]`, observation-noise loading `F1 x + F2 E[x] + G1 u + G2
/// E[u]`, observation drift `h(t)`. Running cost weights `Q1, Q2` (state and
/// its mean) and `N1, N2` (control and its mean), terminal weights `M1, M2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub a1: CoefficientPath,
    pub a2: CoefficientPath,
    pub b1: CoefficientPath,
    pub b2: CoefficientPath,
    pub c1: CoefficientPath,
    pub c2: CoefficientPath,
    pub d1: CoefficientPath,
    pub d2: CoefficientPath,
    pub f1: CoefficientPath,
    pub f2: CoefficientPath,
    pub g1: CoefficientPath,
    pub g2: CoefficientPath,
    pub q1: CoefficientPath,
    pub q2: CoefficientPath,
    pub n1: CoefficientPath,
    pub n2: CoefficientPath,
    pub m1: DMatrix<f64>,
    pub m2: DMatrix<f64>,
    /// 1×1 blocks.
    pub h: CoefficientPath,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Shape {
    NN,
    NK,
    KK,
}

const PATH_NAMES: [(&str, Shape); 16] = [
    ("A1", Shape::NN),
    ("A2", Shape::NN),
    ("B1", Shape::NK),
    ("B2", Shape::NK),
    ("C1", Shape::NN),
    ("C2", Shape::NN),
    ("D1", Shape::NK),
    ("D2", Shape::NK),
    ("F1", Shape::NN),
    ("F2", Shape::NN),
    ("G1", Shape::NK),
    ("G2", Shape::NK),
    ("Q1", Shape::NN),
    ("Q2", Shape::NN),
    ("N1", Shape::KK),
    ("N2", Shape::KK),
];

impl Coefficients {
    /// All-zero coefficients of the given dimensions.
    pub fn zeros(n: usize, k: usize) -> Self {
        let nn = || CoefficientPath::zeros(n, n);
        let nk = || CoefficientPath::zeros(n, k);
        let kk = || CoefficientPath::zeros(k, k);
        Self {
            a1: nn(),
            a2: nn(),
            b1: nk(),
            b2: nk(),
            c1: nn(),
            c2: nn(),
            d1: nk(),
            d2: nk(),
            f1: nn(),
            f2: nn(),
            g1: nk(),
            g2: nk(),
            q1: nn(),
            q2: nn(),
            n1: kk(),
            n2: kk(),
            m1: DMatrix::zeros(n, n),
            m2: DMatrix::zeros(n, n),
            h: CoefficientPath::scalar(0.0),
        }
    }

    pub fn path(&self, name: &str) -> Option<&CoefficientPath> {
        Some(match name {
            "A1" => &self.a1,
            "A2" => &self.a2,
            "B1" => &self.b1,
            "B2" => &self.b2,
            "C1" => &self.c1,
            "C2" => &self.c2,
            "D1" => &self.d1,
            "D2" => &self.d2,
            "F1" => &self.f1,
            "F2" => &self.f2,
            "G1" => &self.g1,
            "G2" => &self.g2,
            "Q1" => &self.q1,
            "Q2" => &self.q2,
            "N1" => &self.n1,
            "N2" => &self.n2,
            "h" => &self.h,
            _ => return None,
        })
    }

    fn path_mut(&mut self, name: &str) -> Option<&mut CoefficientPath> {
        Some(match name {
            "A1" => &mut self.a1,
            "A2" => &mut self.a2,
            "B1" => &mut self.b1,
            "B2" => &mut self.b2,
            "C1" => &mut self.c1,
            "C2" => &mut self.c2,
            "D1" => &mut self.d1,
            "D2" => &mut self.d2,
            "F1" => &mut self.f1,
            "F2" => &mut self.f2,
            "G1" => &mut self.g1,
            "G2" => &mut self.g2,
            "Q1" => &mut self.q1,
            "Q2" => &mut self.q2,
            "N1" => &mut self.n1,
            "N2" => &mut self.n2,
            "h" => &mut self.h,
            _ => return None,
        })
    }

    fn all_paths(&self) -> impl Iterator<Item = (&'static str, &CoefficientPath)> {
        PATH_NAMES
            .iter()
            .map(|(name, _)| (*name, self.path(name).expect("known name")))
    }
}

/// Coefficients in force on one grid interval.
#[derive(Debug, Clone, Copy)]
pub struct StepCoeffs<'a> {
    pub a1: &'a DMatrix<f64>,
    pub a2: &'a DMatrix<f64>,
    pub b1: &'a DMatrix<f64>,
    pub b2: &'a DMatrix<f64>,
    pub c1: &'a DMatrix<f64>,
    pub c2: &'a DMatrix<f64>,
    pub d1: &'a DMatrix<f64>,
    pub d2: &'a DMatrix<f64>,
    pub f1: &'a DMatrix<f64>,
    pub f2: &'a DMatrix<f64>,
    pub g1: &'a DMatrix<f64>,
    pub g2: &'a DMatrix<f64>,
    pub q1: &'a DMatrix<f64>,
    pub q2: &'a DMatrix<f64>,
    pub n1: &'a DMatrix<f64>,
    pub n2: &'a DMatrix<f64>,
    pub h: f64,
}

/// A fully specified partially observed mean-field LQ problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub n: usize,
    pub k: usize,
    pub horizon: f64,
    /// Default resolution from the document.
    pub n_steps: usize,
    pub x0: DVector<f64>,
    pub coeffs: Coefficients,
    /// Uniform positivity margin for `N1` and `N1 + N2`.
    pub delta: f64,
}

impl Scenario {
    /// The shipped scalar smoke scenario.
    pub fn smoke() -> Self {
        load_scenario_str(SMOKE_SCENARIO_TOML, ConfigFormat::Toml).expect("shipped smoke scenario parses")
    }

    /// Grid at the document's own resolution.
    pub fn grid(&self) -> TimeGrid {
        TimeGrid::new(self.horizon, self.n_steps).expect("validated at load")
    }

    pub fn grid_with_steps(&self, n_steps: usize) -> Result<TimeGrid> {
        TimeGrid::new(self.horizon, n_steps)
    }

    pub fn step<'a>(&'a self, grid: &TimeGrid, j: usize) -> Result<StepCoeffs<'a>> {
        let c = &self.coeffs;
        Ok(StepCoeffs {
            a1: c.a1.at(grid, j)?,
            a2: c.a2.at(grid, j)?,
            b1: c.b1.at(grid, j)?,
            b2: c.b2.at(grid, j)?,
            c1: c.c1.at(grid, j)?,
            c2: c.c2.at(grid, j)?,
            d1: c.d1.at(grid, j)?,
            d2: c.d2.at(grid, j)?,
            f1: c.f1.at(grid, j)?,
            f2: c.f2.at(grid, j)?,
            g1: c.g1.at(grid, j)?,
            g2: c.g2.at(grid, j)?,
            q1: c.q1.at(grid, j)?,
            q2: c.q2.at(grid, j)?,
            n1: c.n1.at(grid, j)?,
            n2: c.n2.at(grid, j)?,
            h: c.h.at(grid, j)?[(0, 0)],
        })
    }

    /// Coefficients in force at time `t ∈ [0, T]`, independent of any grid.
    pub fn step_at_time(&self, t: f64) -> StepCoeffs<'_> {
        let pick = |p: &'_ CoefficientPath| -> usize {
            let len = p.len();
            let idx = (t / self.horizon * len as f64).floor();
            (idx.max(0.0) as usize).min(len - 1)
        };
        let c = &self.coeffs;
        StepCoeffs {
            a1: &c.a1.blocks()[pick(&c.a1)],
            a2: &c.a2.blocks()[pick(&c.a2)],
            b1: &c.b1.blocks()[pick(&c.b1)],
            b2: &c.b2.blocks()[pick(&c.b2)],
            c1: &c.c1.blocks()[pick(&c.c1)],
            c2: &c.c2.blocks()[pick(&c.c2)],
            d1: &c.d1.blocks()[pick(&c.d1)],
            d2: &c.d2.blocks()[pick(&c.d2)],
            f1: &c.f1.blocks()[pick(&c.f1)],
            f2: &c.f2.blocks()[pick(&c.f2)],
            g1: &c.g1.blocks()[pick(&c.g1)],
            g2: &c.g2.blocks()[pick(&c.g2)],
            q1: &c.q1.blocks()[pick(&c.q1)],
            q2: &c.q2.blocks()[pick(&c.q2)],
            n1: &c.n1.blocks()[pick(&c.n1)],
            n2: &c.n2.blocks()[pick(&c.n2)],
            h: c.h.blocks()[pick(&c.h)][(0, 0)],
        }
    }

    pub fn h_at(&self, grid: &TimeGrid, j: usize) -> Result<f64> {
        Ok(self.coeffs.h.at(grid, j)?[(0, 0)])
    }

    /// Checks that every path resolves on `grid` and has the declared shape.
    pub fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if (grid.horizon() - self.horizon).abs() > 1e-12 * self.horizon.max(1.0) {
            return Err(Error::InvalidConfig(format!(
                "grid horizon {} differs from scenario horizon {}",
                grid.horizon(),
                self.horizon
            )));
        }
        for (name, path) in self.coeffs.all_paths().chain(std::iter::once(("h", &self.coeffs.h))) {
            path.at(grid, 0).map_err(|_| Error::DimensionMismatch {
                name: name.into(),
                expected: format!("1 block or a divisor of n_steps = {}", grid.n_steps()),
                found: format!("{} blocks", path.len()),
            })?;
        }
        Ok(())
    }

    /// Checks that every coefficient has the shape implied by `(n, k)`.
    fn check_shapes(&self) -> Result<()> {
        let (n, k) = (self.n, self.k);
        if self.x0.len() != n {
            return Err(mismatch("x0", (n, 1), (self.x0.len(), 1)));
        }
        for (name, shape) in PATH_NAMES {
            let want = dims_of(shape, n, k);
            for b in self.coeffs.path(name).expect("known").blocks() {
                if (b.nrows(), b.ncols()) != want {
                    return Err(mismatch(name, want, (b.nrows(), b.ncols())));
                }
            }
        }
        for (name, m) in [("M1", &self.coeffs.m1), ("M2", &self.coeffs.m2)] {
            if (m.nrows(), m.ncols()) != (n, n) {
                return Err(mismatch(name, (n, n), (m.nrows(), m.ncols())));
            }
        }
        for b in self.coeffs.h.blocks() {
            if (b.nrows(), b.ncols()) != (1, 1) {
                return Err(mismatch("h", (1, 1), (b.nrows(), b.ncols())));
            }
        }
        Ok(())
    }
}

fn matrix_value(m: &DMatrix<f64>) -> Value {
    Value::Array(
        (0..m.nrows())
            .map(|r| Value::Array((0..m.ncols()).map(|c| Value::from(m[(r, c)])).collect()))
            .collect(),
    )
}

fn path_value(p: &CoefficientPath) -> Value {
    match p {
        CoefficientPath::Constant(m) => matrix_value(m),
        CoefficientPath::Piecewise(v) => Value::Array(v.iter().map(matrix_value).collect()),
    }
}

impl Scenario {
    /// Canonical document form; loading it back yields an equal scenario.
    pub fn to_document(&self) -> Value {
        let mut coeffs = serde_json::Map::new();
        for (name, _) in PATH_NAMES {
            coeffs.insert(name.into(), path_value(self.coeffs.path(name).expect("known")));
        }
        coeffs.insert("M1".into(), matrix_value(&self.coeffs.m1));
        coeffs.insert("M2".into(), matrix_value(&self.coeffs.m2));
        coeffs.insert(
            "h".into(),
            match &self.coeffs.h {
                CoefficientPath::Constant(m) => Value::from(m[(0, 0)]),
                CoefficientPath::Piecewise(v) => Value::Array(v.iter().map(|m| Value::from(m[(0, 0)])).collect()),
            },
        );
        serde_json::json!({
            "dims": { "n": self.n, "k": self.k },
            "horizon": { "T": self.horizon, "n_steps": self.n_steps },
            "init": { "x0": self.x0.iter().copied().collect::<Vec<f64>>() },
            "coefficients": Value::Object(coeffs),
            "assumptions": { "delta": self.delta },
        })
    }
}

/// SHA-256 of the canonical (sorted-key, compact JSON) form of a document.
pub fn document_hash(doc: &Value) -> String {
    use sha2::{Digest, Sha256};
    // serde_json maps are ordered by key, so serialization is canonical.
    let bytes = serde_json::to_vec(doc).expect("JSON values serialize");
    hex::encode(Sha256::digest(&bytes))
}

/// Content digest of a scenario, independent of how its document was written.
pub fn scenario_hash(s: &Scenario) -> String {
    document_hash(&s.to_document())
}

fn dims_of(shape: Shape, n: usize, k: usize) -> (usize, usize) {
    match shape {
        Shape::NN => (n, n),
        Shape::NK => (n, k),
        Shape::KK => (k, k),
    }
}

fn mismatch(name: &str, want: (usize, usize), found: (usize, usize)) -> Error {
    Error::DimensionMismatch {
        name: name.into(),
        expected: format!("{}x{}", want.0, want.1),
        found: format!("{}x{}", found.0, found.1),
    }
}

// ---------------------------------------------------------------------------
// Loading

/// Input document syntax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfigFormat {
    Toml,
    Json,
}

impl ConfigFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => ConfigFormat::Json,
            _ => ConfigFormat::Toml,
        }
    }
}

/// Parses a document into a generic JSON tree.
pub fn parse_document(text: &str, format: ConfigFormat) -> Result<Value> {
    match format {
        ConfigFormat::Toml => toml::from_str::<Value>(text).map_err(|e| Error::Parse(e.to_string())),
        ConfigFormat::Json => serde_json::from_str::<Value>(text).map_err(|e| Error::Parse(e.to_string())),
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    load_scenario_str(&text, ConfigFormat::from_path(path))
}

pub fn load_scenario_str(text: &str, format: ConfigFormat) -> Result<Scenario> {
    scenario_from_value(&parse_document(text, format)?)
}

fn field<'a>(v: &'a Value, section: &str, key: &str) -> Result<&'a Value> {
    v.get(section)
        .ok_or_else(|| Error::MissingField(section.into()))?
        .get(key)
        .ok_or_else(|| Error::MissingField(format!("{section}.{key}")))
}

fn as_usize(v: &Value, name: &str) -> Result<usize> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| Error::Parse(format!("`{name}` must be a non-negative integer")))
}

fn as_f64(v: &Value, name: &str) -> Result<f64> {
    v.as_f64().ok_or_else(|| Error::Parse(format!("`{name}` must be a number")))
}

/// Builds a scenario from an already parsed document tree.
pub fn scenario_from_value(doc: &Value) -> Result<Scenario> {
    let n = as_usize(field(doc, "dims", "n")?, "dims.n")?;
    let k = as_usize(field(doc, "dims", "k")?, "dims.k")?;
    if n == 0 || k == 0 {
        return Err(Error::InvalidConfig("dims.n and dims.k must be positive".into()));
    }
    let horizon = as_f64(field(doc, "horizon", "T")?, "horizon.T")?;
    let n_steps = as_usize(field(doc, "horizon", "n_steps")?, "horizon.n_steps")?;
    TimeGrid::new(horizon, n_steps)?;

    let x0_v = field(doc, "init", "x0")?;
    let x0 = match x0_v {
        Value::Number(_) if n == 1 => vec![as_f64(x0_v, "init.x0")?],
        Value::Array(items) => items
            .iter()
            .map(|e| as_f64(e, "init.x0"))
            .collect::<Result<Vec<_>>>()?,
        _ => return Err(Error::Parse("`init.x0` must be an array of numbers".into())),
    };
    if x0.len() != n {
        return Err(mismatch("x0", (n, 1), (x0.len(), 1)));
    }

    let delta = as_f64(field(doc, "assumptions", "delta")?, "assumptions.delta")?;

    let coeff_doc = doc
        .get("coefficients")
        .ok_or_else(|| Error::MissingField("coefficients".into()))?;
    let table = coeff_doc
        .as_object()
        .ok_or_else(|| Error::Parse("`coefficients` must be a table".into()))?;
    for key in table.keys() {
        let known = PATH_NAMES.iter().any(|(name, _)| name == key) || matches!(key.as_str(), "M1" | "M2" | "h");
        if !known {
            return Err(Error::Parse(format!("unknown coefficient `{key}`")));
        }
    }

    let mut coeffs = Coefficients::zeros(n, k);
    for (name, shape) in PATH_NAMES {
        let raw = table
            .get(name)
            .ok_or_else(|| Error::MissingField(format!("coefficients.{name}")))?;
        let (rows, cols) = dims_of(shape, n, k);
        *coeffs.path_mut(name).expect("known") = parse_path(raw, name, rows, cols)?;
    }
    for name in ["M1", "M2"] {
        let raw = table
            .get(name)
            .ok_or_else(|| Error::MissingField(format!("coefficients.{name}")))?;
        let m = match parse_path(raw, name, n, n)? {
            CoefficientPath::Constant(m) => m,
            CoefficientPath::Piecewise(_) => {
                return Err(Error::Parse(format!("`{name}` is a terminal weight and cannot be piecewise")))
            }
        };
        if name == "M1" {
            coeffs.m1 = m;
        } else {
            coeffs.m2 = m;
        }
    }
    let h_raw = table
        .get("h")
        .ok_or_else(|| Error::MissingField("coefficients.h".into()))?;
    coeffs.h = parse_scalar_path(h_raw)?;

    let s = Scenario {
        n,
        k,
        horizon,
        n_steps,
        x0: DVector::from_vec(x0),
        coeffs,
        delta,
    };
    s.check_shapes()?;
    s.check_grid(&s.grid())?;
    Ok(s)
}

fn parse_matrix(v: &Value, name: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    match v {
        Value::Number(_) => {
            let x = as_f64(v, name)?;
            if x == 0.0 {
                Ok(DMatrix::zeros(rows, cols))
            } else if rows == 1 && cols == 1 {
                Ok(DMatrix::from_element(1, 1, x))
            } else {
                Err(mismatch(name, (rows, cols), (1, 1)))
            }
        }
        Value::Array(row_vals) => {
            let mut data = Vec::with_capacity(rows * cols);
            let mut found_cols = None;
            for r in row_vals {
                let row = r
                    .as_array()
                    .ok_or_else(|| Error::Parse(format!("`{name}` rows must be arrays")))?;
                if *found_cols.get_or_insert(row.len()) != row.len() {
                    return Err(Error::Parse(format!("`{name}` has ragged rows")));
                }
                for e in row {
                    data.push(as_f64(e, name)?);
                }
            }
            let found = (row_vals.len(), found_cols.unwrap_or(0));
            if found != (rows, cols) {
                return Err(mismatch(name, (rows, cols), found));
            }
            Ok(DMatrix::from_row_slice(rows, cols, &data))
        }
        _ => Err(Error::Parse(format!("`{name}` must be a number or a nested array"))),
    }
}

/// Depth of nesting of the first element chain: 0 scalar, 2 matrix, 3 piecewise.
fn nesting(v: &Value) -> usize {
    match v {
        Value::Array(items) => 1 + items.first().map(nesting).unwrap_or(0),
        _ => 0,
    }
}

fn parse_path(v: &Value, name: &str, rows: usize, cols: usize) -> Result<CoefficientPath> {
    match nesting(v) {
        0 | 2 => Ok(CoefficientPath::Constant(parse_matrix(v, name, rows, cols)?)),
        3 => {
            let blocks = v
                .as_array()
                .expect("nesting 3 is an array")
                .iter()
                .map(|b| parse_matrix(b, name, rows, cols))
                .collect::<Result<Vec<_>>>()?;
            Ok(CoefficientPath::Piecewise(blocks))
        }
        d => Err(Error::Parse(format!("`{name}` has unsupported nesting depth {d}"))),
    }
}

fn parse_scalar_path(v: &Value) -> Result<CoefficientPath> {
    match v {
        Value::Number(_) => Ok(CoefficientPath::scalar(as_f64(v, "h")?)),
        Value::Array(items) if !items.is_empty() => Ok(CoefficientPath::Piecewise(
            items
                .iter()
                .map(|e| as_f64(e, "h").map(|x| DMatrix::from_element(1, 1, x)))
                .collect::<Result<Vec<_>>>()?,
        )),
        _ => Err(Error::Parse("`h` must be a number or a non-empty list of numbers".into())),
    }
}

// ---------------------------------------------------------------------------
// Assumption checks

/// One assumption clause and its verdict.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionCheck {
    pub name: String,
    pub clause: String,
    pub passed: bool,
    /// Worst value over the grid (minimum eigenvalue, or sup-norm for bounds).
    pub worst: f64,
    /// Threshold the worst value is compared against.
    pub bound: f64,
    pub t_index: Option<usize>,
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub checks: Vec<AssumptionCheck>,
}

impl AssumptionReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &AssumptionCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Symmetric-checks `m` and returns its minimum eigenvalue, or an error
/// message when it is not symmetric within tolerance.
fn sym_min_eig(m: &DMatrix<f64>) -> std::result::Result<f64, String> {
    let scale = 1.0 + m.amax();
    let asym = linalg::asymmetry(m);
    if asym > SYMMETRY_RTOL * scale {
        return Err(format!("not symmetric (max |M - Mᵀ| = {asym:e})"));
    }
    Ok(linalg::min_eigenvalue(m))
}

struct EigenTracker {
    name: &'static str,
    clause: &'static str,
    bound: f64,
    relative: bool,
    worst: f64,
    worst_scale: f64,
    at: Option<usize>,
    detail: Option<String>,
}

impl EigenTracker {
    fn new(name: &'static str, clause: &'static str, bound: f64, relative: bool) -> Self {
        Self {
            name,
            clause,
            bound,
            relative,
            worst: f64::INFINITY,
            worst_scale: 1.0,
            at: None,
            detail: None,
        }
    }

    fn observe(&mut self, m: &DMatrix<f64>, j: Option<usize>) {
        match sym_min_eig(m) {
            Ok(e) => {
                if e < self.worst {
                    self.worst = e;
                    self.worst_scale = 1.0 + m.amax();
                    self.at = j;
                }
            }
            Err(msg) => {
                if self.detail.is_none() {
                    self.detail = Some(msg);
                    self.at = j;
                }
            }
        }
    }

    fn finish(self) -> AssumptionCheck {
        let tol = if self.relative { PSD_RTOL * self.worst_scale } else { 0.0 };
        let passed = self.detail.is_none() && self.worst >= self.bound - tol;
        AssumptionCheck {
            name: self.name.into(),
            clause: self.clause.into(),
            passed,
            worst: self.worst,
            bound: self.bound,
            t_index: if passed { None } else { self.at },
            detail: self.detail,
        }
    }
}

/// Checks boundedness of the coefficients, positive semidefiniteness of the
/// state and terminal weights, and uniform positivity of the control weights
/// on every grid time.
pub fn validate_assumptions(s: &Scenario, g: &TimeGrid) -> AssumptionReport {
    let mut checks = Vec::with_capacity(9);

    let finite = s.coeffs.all_paths().all(|(_, p)| p.is_finite())
        && s.coeffs.m1.iter().chain(s.coeffs.m2.iter()).all(|v| v.is_finite());
    let sup = s
        .coeffs
        .all_paths()
        .map(|(_, p)| p.max_abs())
        .fold(s.coeffs.m1.amax().max(s.coeffs.m2.amax()), f64::max);
    checks.push(AssumptionCheck {
        name: "bounded_coefficients".into(),
        clause: "coefficients are bounded on [0,T]".into(),
        passed: finite,
        worst: sup,
        bound: f64::INFINITY,
        t_index: None,
        detail: (!finite).then(|| "non-finite coefficient entry".to_string()),
    });

    let h_sup = s.coeffs.h.max_abs();
    let h_ok = s.coeffs.h.is_finite();
    checks.push(AssumptionCheck {
        name: "h_bounded".into(),
        clause: "observation drift h is bounded".into(),
        passed: h_ok,
        worst: h_sup,
        bound: f64::INFINITY,
        t_index: None,
        detail: (!h_ok).then(|| "non-finite h".to_string()),
    });

    let delta_ok = s.delta.is_finite() && s.delta > 0.0;
    checks.push(AssumptionCheck {
        name: "delta_positive".into(),
        clause: "declared margin delta > 0".into(),
        passed: delta_ok,
        worst: s.delta,
        bound: 0.0,
        t_index: None,
        detail: None,
    });

    let mut q1 = EigenTracker::new("q1_psd", "Q1 >= 0", 0.0, true);
    let mut q12 = EigenTracker::new("q1_plus_q2_psd", "Q1 + Q2 >= 0", 0.0, true);
    let mut n1 = EigenTracker::new("n1_uniformly_positive", "N1 >= delta I", s.delta, false);
    let mut n12 = EigenTracker::new("n1_plus_n2_uniformly_positive", "N1 + N2 >= delta I", s.delta, false);
    let mut m1 = EigenTracker::new("m1_psd", "M1 >= 0", 0.0, true);
    let mut m12 = EigenTracker::new("m1_plus_m2_psd", "M1 + M2 >= 0", 0.0, true);

    for j in 0..=g.n_steps() {
        let Ok(c) = s.step(g, j) else {
            // Grid/path incompatibility shows up as a bounded-coefficient failure.
            checks[0].passed = false;
            checks[0].detail = Some(format!("coefficients do not resolve on a {}-step grid", g.n_steps()));
            break;
        };
        q1.observe(c.q1, Some(j));
        q12.observe(&(c.q1 + c.q2), Some(j));
        n1.observe(c.n1, Some(j));
        n12.observe(&(c.n1 + c.n2), Some(j));
    }
    m1.observe(&s.coeffs.m1, None);
    m12.observe(&(&s.coeffs.m1 + &s.coeffs.m2), None);

    checks.extend([q1, q12, m1, m12, n1, n12].into_iter().map(EigenTracker::finish));
    AssumptionReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_doc(b1: &str) -> String {
        format!(
            r#"
[dims]
n = 1
k = 1
[horizon]
T = 1.0
n_steps = 3
[init]
x0 = [2.0]
[coefficients]
A1 = [[[-1.0]], [[0.5]], [[2.0]]]
A2 = 0.0
B1 = {b1}
B2 = 0
C1 = 0
C2 = 0
D1 = 0
D2 = 0
F1 = 0
F2 = 0
G1 = 0
G2 = 0
Q1 = 1.0
Q2 = 0
N1 = 1.0
N2 = 0
M1 = 1.0
M2 = 0
h = 0.5
[assumptions]
delta = 0.5
"#
        )
    }

    fn two_dim(q1: [[f64; 2]; 2], m1: [[f64; 2]; 2], n1: f64, delta: f64) -> Scenario {
        let mut s = Scenario {
            n: 2,
            k: 1,
            horizon: 1.0,
            n_steps: 4,
            x0: DVector::from_vec(vec![1.0, 0.0]),
            coeffs: Coefficients::zeros(2, 1),
            delta,
        };
        s.coeffs.q1 = CoefficientPath::constant(DMatrix::from_fn(2, 2, |r, c| q1[r][c]));
        s.coeffs.m1 = DMatrix::from_fn(2, 2, |r, c| m1[r][c]);
        s.coeffs.n1 = CoefficientPath::scalar(n1);
        s.coeffs.n2 = CoefficientPath::scalar(0.0);
        s
    }

    #[test]
    fn loads_smallest_scalar_instance() {
        let s = load_scenario_str(&scalar_doc("0.25"), ConfigFormat::Toml).unwrap();
        assert_eq!((s.n, s.k), (1, 1));
        assert_eq!(s.coeffs.b1.shape(), (1, 1));
        assert_eq!(s.coeffs.b1.blocks()[0][(0, 0)], 0.25);
        assert_eq!(s.x0[0], 2.0);
    }

    #[test]
    fn piecewise_blocks_map_to_intervals() {
        let s = load_scenario_str(&scalar_doc("0"), ConfigFormat::Toml).unwrap();
        let g = s.grid();
        assert_eq!(s.coeffs.a1.len(), 3);
        assert_eq!(coeff_at(&s.coeffs.a1, &g, 0).unwrap()[(0, 0)], -1.0);
        assert_eq!(coeff_at(&s.coeffs.a1, &g, 1).unwrap()[(0, 0)], 0.5);
        assert_eq!(coeff_at(&s.coeffs.a1, &g, 2).unwrap()[(0, 0)], 2.0);
        // terminal index maps to the last block
        assert_eq!(coeff_at(&s.coeffs.a1, &g, 3).unwrap()[(0, 0)], 2.0);
        assert!(matches!(
            coeff_at(&s.coeffs.a1, &g, 4),
            Err(Error::IndexOutOfRange { index: 4, n_steps: 3 })
        ));
        // a refined grid reuses each block on consecutive intervals
        let fine = TimeGrid::new(1.0, 6).unwrap();
        let picks: Vec<f64> = (0..=6).map(|j| coeff_at(&s.coeffs.a1, &fine, j).unwrap()[(0, 0)]).collect();
        assert_eq!(picks, vec![-1.0, -1.0, 0.5, 0.5, 2.0, 2.0, 2.0]);
        assert!(coeff_at(&s.coeffs.a1, &TimeGrid::new(1.0, 4).unwrap(), 0).is_err());
    }

    #[test]
    fn constant_path_any_index() {
        let p = CoefficientPath::scalar(3.0);
        let g = TimeGrid::new(2.0, 10).unwrap();
        for j in 0..=10 {
            assert_eq!(p.at(&g, j).unwrap()[(0, 0)], 3.0);
        }
    }

    #[test]
    fn shape_contradiction_is_reported() {
        let err = load_scenario_str(&scalar_doc("[[1.0, 0.0], [0.0, 1.0]]"), ConfigFormat::Toml).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { ref name, .. } if name == "B1"), "{err}");
    }

    #[test]
    fn missing_field_is_reported() {
        let doc = scalar_doc("0").replace("M1 = 1.0\n", "");
        let err = load_scenario_str(&doc, ConfigFormat::Toml).unwrap_err();
        assert!(matches!(err, Error::MissingField(ref f) if f == "coefficients.M1"), "{err}");
    }

    #[test]
    fn malformed_document_is_a_parse_error() {
        assert!(matches!(
            load_scenario_str("[dims\nn = ", ConfigFormat::Toml),
            Err(Error::Parse(_))
        ));
        assert!(matches!(
            load_scenario_str("{\"dims\": ", ConfigFormat::Json),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn json_and_toml_agree() {
        let s = Scenario::smoke();
        let doc = parse_document(SMOKE_SCENARIO_TOML, ConfigFormat::Toml).unwrap();
        let json = serde_json::to_string(&doc).unwrap();
        assert_eq!(load_scenario_str(&json, ConfigFormat::Json).unwrap(), s);
    }

    #[test]
    fn smoke_scenario_passes_validation() {
        let s = Scenario::smoke();
        let r = validate_assumptions(&s, &s.grid());
        assert!(r.all_passed(), "{r:?}");
        assert_eq!(r.checks.len(), 9);
    }

    #[test]
    fn psd_boundary_passes() {
        let s = two_dim([[1.0, 0.0], [0.0, 0.0]], [[0.0; 2]; 2], 1.0, 1.0);
        let r = validate_assumptions(&s, &s.grid());
        assert!(r.get("q1_psd").unwrap().passed);
        assert!(r.all_passed(), "{r:?}");
    }

    #[test]
    fn control_margin_violation() {
        let s = two_dim([[0.0; 2]; 2], [[0.0; 2]; 2], 0.5, 1.0);
        let r = validate_assumptions(&s, &s.grid());
        let c = r.get("n1_uniformly_positive").unwrap();
        assert!(!c.passed);
        assert_eq!(c.worst, 0.5);
        assert_eq!(c.bound, 1.0);
        assert_eq!(c.t_index, Some(0));
    }

    #[test]
    fn indefinite_terminal_weight() {
        // trace/det oracle for a symmetric 2x2: λ = tr/2 ± sqrt(tr²/4 - det)
        let (a, b, d) = (1.0f64, 2.0f64, 1.0f64);
        let (tr, det) = (a + d, a * d - b * b);
        let disc = (tr * tr / 4.0 - det).sqrt();
        let (lo, hi) = (tr / 2.0 - disc, tr / 2.0 + disc);
        assert_eq!((lo, hi), (-1.0, 3.0));

        let s = two_dim([[0.0; 2]; 2], [[a, b], [b, d]], 1.0, 1.0);
        let r = validate_assumptions(&s, &s.grid());
        let c = r.get("m1_psd").unwrap();
        assert!(!c.passed);
        assert!((c.worst - lo).abs() < 1e-12);
    }

    #[test]
    fn asymmetric_weight_fails_with_detail() {
        let s = two_dim([[1.0, 0.5], [0.0, 1.0]], [[0.0; 2]; 2], 1.0, 1.0);
        let r = validate_assumptions(&s, &s.grid());
        let c = r.get("q1_psd").unwrap();
        assert!(!c.passed);
        assert!(c.detail.as_deref().unwrap().contains("not symmetric"));
    }

    #[test]
    fn validation_is_pure() {
        let s = Scenario::smoke();
        let g = s.grid();
        assert_eq!(validate_assumptions(&s, &g), validate_assumptions(&s, &g));
    }

    #[test]
    fn document_round_trip_and_hash() {
        let s = load_scenario_str(&scalar_doc("0.25"), ConfigFormat::Toml).unwrap();
        let back = scenario_from_value(&s.to_document()).unwrap();
        assert_eq!(back, s);
        assert_eq!(scenario_hash(&back), scenario_hash(&s));
        assert_ne!(scenario_hash(&s), scenario_hash(&Scenario::smoke()));
        assert_eq!(scenario_hash(&s).len(), 64);
    }

    #[test]
    fn grid_endpoint() {
        let g = TimeGrid::new(0.7, 7).unwrap();
        assert!((g.t(7) - 0.7).abs() <= f64::EPSILON);
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert!(TimeGrid::new(-1.0, 3).is_err());
    }
}
