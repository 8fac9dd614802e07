//! Synthetic dataset generators, the train/validation split, and CSV I/O.
//!
//! Generators are registered by name and selected at runtime (`temperature`,
//! `risk_scores`, `eq:<id>`). All generation is a pure function of
//! (n, seed, params).

use crate::closedform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("unknown equation '{0}'")]
    UnknownEquation(String),
    #[error("unknown dataset '{0}'")]
    UnknownDataset(String),
    #[error("parse error at line {line}, column {col}: {msg}")]
    Parse { line: usize, col: usize, msg: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Column-named numeric table with a train/validation split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub column_names: Vec<String>,
    /// Row-major, `rows x n_vars`.
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

impl Dataset {
    pub fn n_rows(&self) -> usize {
        self.x.len()
    }

    pub fn n_vars(&self) -> usize {
        self.column_names.len()
    }

    /// First half train, second half validation (generation order is random).
    pub fn half_split(rows: usize) -> (Vec<usize>, Vec<usize>) {
        let half = rows / 2;
        ((0..half).collect(), (half..rows).collect())
    }

    pub fn subset(&self, idx: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let xs = idx.iter().map(|&i| self.x[i].clone()).collect();
        let ys = idx.iter().map(|&i| self.y[i]).collect();
        (xs, ys)
    }
}

/// Ground-truth physical constants of water, cal/(g C) and cal/g.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaterConstants {
    pub c_ice: f64,
    pub c_water: f64,
    pub c_steam: f64,
    pub l_fusion: f64,
    pub l_vapor: f64,
}

impl Default for WaterConstants {
    fn default() -> Self {
        WaterConstants {
            c_ice: 0.50,
            c_water: 1.00,
            c_steam: 0.48,
            l_fusion: 79.72,
            l_vapor: 540.00,
        }
    }
}

/// Final temperature of `m` grams of ice at `t0` after adding `energy`
/// calories, spending the budget stage by stage: warm ice, melt, warm water,
/// vaporize, warm steam.
pub fn water_temperature(m: f64, t0: f64, energy: f64, k: &WaterConstants) -> Result<f64, DataError> {
    if !(m > 0.0) {
        return Err(DataError::Domain(format!("mass must be positive, got {m}")));
    }
    if !(-100.0..=0.0).contains(&t0) {
        return Err(DataError::Domain(format!("t0 must be in [-100, 0], got {t0}")));
    }
    if !(energy >= 0.0) {
        return Err(DataError::Domain(format!("energy must be non-negative, got {energy}")));
    }
    let mut e = energy;
    let warm_ice = m * k.c_ice * (0.0 - t0);
    if e <= warm_ice {
        return Ok(t0 + e / (m * k.c_ice));
    }
    e -= warm_ice;
    let melt = m * k.l_fusion;
    if e <= melt {
        return Ok(0.0);
    }
    e -= melt;
    let warm_water = m * k.c_water * 100.0;
    if e <= warm_water {
        return Ok(e / (m * k.c_water));
    }
    e -= warm_water;
    let vapor = m * k.l_vapor;
    if e <= vapor {
        return Ok(100.0);
    }
    e -= vapor;
    Ok(100.0 + e / (m * k.c_steam))
}

/// Temperature dataset with columns (E, m, t0): m ~ U(1,4), t0 ~ U(-100,0),
/// E = m * U(1,800), label simulated from the water constants.
pub fn gen_temperature(n: usize, seed: u64, noise_std: f64) -> Result<Dataset, DataError> {
    if n % 2 != 0 {
        return Err(DataError::Domain("row count must be even".into()));
    }
    let k = WaterConstants::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std.max(0.0)).unwrap();
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let m = rng.gen_range(1.0..4.0);
        let t0 = rng.gen_range(-100.0..0.0);
        let epm = rng.gen_range(1.0..800.0);
        let e = m * epm;
        let mut label = water_temperature(m, t0, e, &k)?;
        if noise_std > 0.0 {
            label += noise.sample(&mut rng);
        }
        x.push(vec![e, m, t0]);
        y.push(label);
    }
    let (train, validation) = Dataset::half_split(n);
    Ok(Dataset {
        column_names: vec!["E".into(), "m".into(), "t0".into()],
        x,
        y,
        train,
        validation,
    })
}

/// Control points of the bundled risk-score ground-truth curves. Each curve is
/// a monotone piecewise-cubic (Fritsch-Carlson) interpolant of its points.
pub const RISK_NODES_POINTS: [(f64, f64); 5] =
    [(0.0, 0.0), (10.0, 1.2), (20.0, 1.8), (35.0, 2.1), (50.0, 2.2)];
pub const RISK_AGE_POINTS: [(f64, f64); 5] =
    [(45.0, 1.0), (50.0, 0.3), (55.0, 0.0), (62.0, 0.4), (70.0, 1.3)];
pub const RISK_BMI_POINTS: [(f64, f64); 5] =
    [(17.0, -0.5), (24.0, -0.2), (31.0, 0.4), (38.0, 1.0), (45.0, 1.4)];

/// Shape-preserving piecewise-cubic interpolation (PCHIP).
#[derive(Debug, Clone)]
pub struct PiecewiseCubic {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
}

impl PiecewiseCubic {
    pub fn fritsch_carlson(points: &[(f64, f64)]) -> PiecewiseCubic {
        let n = points.len();
        assert!(n >= 2);
        let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
        let h: Vec<f64> = (0..n - 1).map(|i| xs[i + 1] - xs[i]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / h[i]).collect();
        let mut slopes = vec![0.0; n];
        slopes[0] = delta[0];
        slopes[n - 1] = delta[n - 2];
        for i in 1..n - 1 {
            if delta[i - 1] * delta[i] <= 0.0 {
                slopes[i] = 0.0;
            } else {
                // weighted harmonic mean keeps the interpolant monotone
                let w1 = 2.0 * h[i] + h[i - 1];
                let w2 = h[i] + 2.0 * h[i - 1];
                slopes[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
            }
        }
        PiecewiseCubic { xs, ys, slopes }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        let i = match self.xs.iter().rposition(|&xk| xk <= x) {
            None => 0,
            Some(i) if i >= n - 1 => n - 2,
            Some(i) => i,
        };
        let h = self.xs[i + 1] - self.xs[i];
        let t = (x - self.xs[i]) / h;
        let (t2, t3) = (t * t, t * t * t);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * self.ys[i] + h10 * h * self.slopes[i] + h01 * self.ys[i + 1] + h11 * h * self.slopes[i + 1]
    }
}

pub fn risk_curves() -> [PiecewiseCubic; 3] {
    [
        PiecewiseCubic::fritsch_carlson(&RISK_NODES_POINTS),
        PiecewiseCubic::fritsch_carlson(&RISK_AGE_POINTS),
        PiecewiseCubic::fritsch_carlson(&RISK_BMI_POINTS),
    ]
}

/// Risk-score dataset with columns (nodes, age, bmi); the label is the sum of
/// the three bundled curves.
pub fn gen_risk_scores(n: usize, seed: u64) -> Result<Dataset, DataError> {
    if n % 2 != 0 {
        return Err(DataError::Domain("row count must be even".into()));
    }
    let curves = risk_curves();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let nodes = rng.gen_range(0.0..50.0);
        let age = rng.gen_range(45.0..70.0);
        let bmi = rng.gen_range(17.0..45.0);
        let label = curves[0].eval(nodes) + curves[1].eval(age) + curves[2].eval(bmi);
        x.push(vec![nodes, age, bmi]);
        y.push(label);
    }
    let (train, validation) = Dataset::half_split(n);
    Ok(Dataset {
        column_names: vec!["nodes".into(), "age".into(), "bmi".into()],
        x,
        y,
        train,
        validation,
    })
}

/// One registry entry: a named closed-form equation and per-variable ranges.
#[derive(Debug, Clone)]
pub struct EquationSpec {
    pub id: String,
    pub formula: String,
    pub ranges: BTreeMap<String, (f64, f64)>,
}

pub const DEFAULT_RANGE: (f64, f64) = (1.0, 5.0);

const EQUATIONS_REG: &str = include_str!("../data/equations.reg");

/// The bundled equation registry (Feynman-style identifiers).
pub fn equation_registry() -> Vec<EquationSpec> {
    let mut out = Vec::new();
    for line in EQUATIONS_REG.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split("::").collect();
        let id = parts[0].trim().to_string();
        let formula = parts[1].trim().to_string();
        let mut ranges = BTreeMap::new();
        if parts.len() > 2 {
            for item in parts[2].split(';') {
                let item = item.trim();
                if item.is_empty() {
                    continue;
                }
                let (var, range) = item.split_once('=').expect("registry range");
                let (lo, hi) = range.split_once("..").expect("registry range bounds");
                ranges.insert(
                    var.trim().to_string(),
                    (lo.trim().parse().unwrap(), hi.trim().parse().unwrap()),
                );
            }
        }
        out.push(EquationSpec { id, formula, ranges });
    }
    out
}

/// Census corpus derived from the registry: (name, expression) lines.
pub fn bundled_corpus() -> Vec<(String, String)> {
    equation_registry()
        .into_iter()
        .map(|e| (e.id, e.formula))
        .collect()
}

/// Sample a dataset from a registry equation. `range_overrides` replaces the
/// registry ranges per variable.
pub fn gen_equation(
    eq_id: &str,
    n: usize,
    seed: u64,
    range_overrides: &BTreeMap<String, (f64, f64)>,
) -> Result<Dataset, DataError> {
    if n % 2 != 0 {
        return Err(DataError::Domain("row count must be even".into()));
    }
    let spec = equation_registry()
        .into_iter()
        .find(|e| e.id == eq_id)
        .ok_or_else(|| DataError::UnknownEquation(eq_id.to_string()))?;
    let eq = closedform::parse(&spec.formula)
        .map_err(|e| DataError::Domain(format!("registry formula: {e}")))?;
    let vars = eq.free_vars.clone();
    let ranges: Vec<(f64, f64)> = vars
        .iter()
        .map(|v| {
            range_overrides
                .get(v)
                .or_else(|| spec.ranges.get(v))
                .copied()
                .unwrap_or(DEFAULT_RANGE)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for row in 0..n {
        let mut env = BTreeMap::new();
        let mut vals = Vec::with_capacity(vars.len());
        for (v, &(lo, hi)) in vars.iter().zip(&ranges) {
            let val = rng.gen_range(lo..hi);
            env.insert(v.clone(), val);
            vals.push(val);
        }
        let label = eq.node.eval(&env);
        if !label.is_finite() {
            return Err(DataError::Domain(format!(
                "equation {eq_id} produced a non-finite label at row {row}; adjust ranges"
            )));
        }
        x.push(vals);
        y.push(label);
    }
    let (train, validation) = Dataset::half_split(n);
    Ok(Dataset { column_names: vars, x, y, train, validation })
}

/// Format a value with 17 significant digits so the round trip is value-exact.
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn csv_write(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    for name in &ds.column_names {
        out.push_str(name);
        out.push(',');
    }
    out.push_str("target\n");
    for (row, label) in ds.x.iter().zip(&ds.y) {
        for v in row {
            out.push_str(&format_value(*v));
            out.push(',');
        }
        out.push_str(&format_value(*label));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn csv_read(path: &Path) -> Result<Dataset, DataError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| DataError::Schema("empty file".into()))?;
    let cols: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    if cols.last().map(String::as_str) != Some("target") {
        return Err(DataError::Schema("last column must be 'target'".into()));
    }
    let n_vars = cols.len() - 1;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n_vars + 1 {
            return Err(DataError::Parse {
                line: i + 1,
                col: 1,
                msg: format!("expected {} fields, got {}", n_vars + 1, fields.len()),
            });
        }
        let mut row = Vec::with_capacity(n_vars);
        for (j, f) in fields.iter().enumerate() {
            let v: f64 = f.trim().parse().map_err(|_| DataError::Parse {
                line: i + 1,
                col: j + 1,
                msg: format!("non-numeric value '{}'", f.trim()),
            })?;
            if !v.is_finite() {
                return Err(DataError::Parse {
                    line: i + 1,
                    col: j + 1,
                    msg: "non-finite value".into(),
                });
            }
            row.push(v);
        }
        y.push(row.pop().unwrap());
        x.push(row);
    }
    let (train, validation) = Dataset::half_split(x.len());
    Ok(Dataset {
        column_names: cols[..n_vars].to_vec(),
        x,
        y,
        train,
        validation,
    })
}

/// A named dataset generator, selected at runtime by the CLI.
pub trait DatasetGenerator: Sync {
    fn name(&self) -> String;
    fn generate(&self, n: usize, seed: u64, noise_std: f64) -> Result<Dataset, DataError>;
}

struct TemperatureGen;
impl DatasetGenerator for TemperatureGen {
    fn name(&self) -> String {
        "temperature".into()
    }
    fn generate(&self, n: usize, seed: u64, noise_std: f64) -> Result<Dataset, DataError> {
        gen_temperature(n, seed, noise_std)
    }
}

struct RiskScoresGen;
impl DatasetGenerator for RiskScoresGen {
    fn name(&self) -> String {
        "risk_scores".into()
    }
    fn generate(&self, n: usize, seed: u64, _noise_std: f64) -> Result<Dataset, DataError> {
        gen_risk_scores(n, seed)
    }
}

struct EquationGen {
    id: String,
}
impl DatasetGenerator for EquationGen {
    fn name(&self) -> String {
        format!("eq:{}", self.id)
    }
    fn generate(&self, n: usize, seed: u64, _noise_std: f64) -> Result<Dataset, DataError> {
        gen_equation(&self.id, n, seed, &BTreeMap::new())
    }
}

/// Resolve a generator by name: `temperature`, `risk_scores`, or `eq:<id>`.
pub fn find_generator(name: &str) -> Result<Box<dyn DatasetGenerator>, DataError> {
    match name {
        "temperature" => Ok(Box::new(TemperatureGen)),
        "risk_scores" => Ok(Box::new(RiskScoresGen)),
        _ => {
            if let Some(id) = name.strip_prefix("eq:") {
                if equation_registry().iter().any(|e| e.id == id) {
                    return Ok(Box::new(EquationGen { id: id.to_string() }));
                }
                return Err(DataError::UnknownEquation(id.to_string()));
            }
            Err(DataError::UnknownDataset(name.to_string()))
        }
    }
}
