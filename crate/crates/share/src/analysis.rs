//! From fitted shape functions to quantitative insight: dense curve
//! sampling, decomposition into rising segments and plateaus, extraction of
//! physical constants from the water-temperature curve, least-squares line
//! fits, and SVG plots.

use crate::eval::{CompiledModel, EvalError};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("unknown shape id {0}")]
    UnknownShape(usize),
    #[error("trace too short for segmentation")]
    NoSegments,
    #[error("segment pattern {found} does not match {expected}")]
    PatternMismatch { expected: String, found: String },
    #[error("no traces to plot")]
    EmptyTraces,
    #[error(transparent)]
    Eval(EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A shape function sampled on a uniform grid over the input range it saw on
/// training data.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeTrace {
    pub shape_id: usize,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub input_range: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Rising,
    Plateau,
}

/// One run of the decomposed curve. `slope` and `intercept` describe the
/// fitted line of a Rising segment; `level` is the height of a Plateau.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub x_start: f64,
    pub x_end: f64,
    pub slope: f64,
    pub intercept: f64,
    pub level: f64,
}

impl Segment {
    pub fn width(&self) -> f64 {
        self.x_end - self.x_start
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentDecomposition {
    pub segments: Vec<Segment>,
}

impl SegmentDecomposition {
    pub fn pattern(&self) -> String {
        self.segments
            .iter()
            .map(|s| match s.kind {
                SegmentKind::Rising => 'R',
                SegmentKind::Plateau => 'P',
            })
            .collect()
    }
}

/// Physical constants read off a water-temperature shape curve, in
/// cal/(g C) and cal/g.
#[derive(Debug, Clone, PartialEq)]
pub struct WaterPropertyEstimate {
    pub c_ice: f64,
    pub c_water: f64,
    pub c_steam: f64,
    pub l_fusion: f64,
    pub l_vapor: f64,
}

pub const PLATEAU_SLOPE_THRESHOLD: f64 = 0.1;
pub const MIN_SEGMENT_WIDTH: usize = 5;

/// Sample a fitted shape on a uniform grid. The grid covers the range of
/// raw argument values observed on `x_train`.
pub fn sample_shape(
    model: &CompiledModel,
    shape_id: usize,
    n_points: usize,
    x_train: &[Vec<f64>],
) -> Result<ShapeTrace, AnalysisError> {
    assert!(n_points >= 2);
    if shape_id >= model.n_shapes() {
        return Err(AnalysisError::UnknownShape(shape_id));
    }
    let args = model.shape_arguments(x_train).map_err(AnalysisError::Eval)?;
    let vals = &args[shape_id];
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let xs: Vec<f64> = (0..n_points)
        .map(|i| lo + (hi - lo) * i as f64 / (n_points - 1) as f64)
        .collect();
    let ys = model.eval_shape(shape_id, &xs).map_err(AnalysisError::Eval)?;
    Ok(ShapeTrace { shape_id, xs, ys, input_range: (lo, hi) })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub max_abs_residual: f64,
}

fn ols(xs: &[f64], ys: &[f64]) -> LineFit {
    assert!(xs.len() >= 2 && xs.len() == ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(&x, &y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|&x| (x - mx) * (x - mx)).sum();
    let slope = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    let intercept = my - slope * mx;
    let max_abs_residual = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| (y - (slope * x + intercept)).abs())
        .fold(0.0f64, f64::max);
    LineFit { slope, intercept, max_abs_residual }
}

/// Ordinary least squares over the whole trace.
pub fn fit_line(trace: &ShapeTrace) -> LineFit {
    ols(&trace.xs, &trace.ys)
}

/// Classify finite-difference slopes as plateau or rising, merge short runs
/// into their neighbors, then fit each run and refine run boundaries by
/// intersecting the fitted lines of adjacent runs.
pub fn detect_segments(
    trace: &ShapeTrace,
    plateau_slope_threshold: f64,
    min_segment_width: usize,
) -> Result<SegmentDecomposition, AnalysisError> {
    let n = trace.xs.len();
    if n < min_segment_width.max(2) {
        return Err(AnalysisError::NoSegments);
    }
    // per-interval classification; interval i spans points i..i+1
    let rising: Vec<bool> = (0..n - 1)
        .map(|i| {
            let dx = trace.xs[i + 1] - trace.xs[i];
            let dy = trace.ys[i + 1] - trace.ys[i];
            (dy / dx).abs() > plateau_slope_threshold
        })
        .collect();

    // runs of intervals: (kind_is_rising, first_interval, last_interval)
    let mut runs: Vec<(bool, usize, usize)> = Vec::new();
    for (i, &r) in rising.iter().enumerate() {
        match runs.last_mut() {
            Some((kind, _, last)) if *kind == r && *last + 1 == i => *last = i,
            _ => runs.push((r, i, i)),
        }
    }
    // absorb runs shorter than the minimum width; intervals, not points
    let min_intervals = min_segment_width.saturating_sub(1).max(1);
    loop {
        let short = runs
            .iter()
            .position(|&(_, a, b)| b - a + 1 < min_intervals && runs.len() > 1);
        let Some(i) = short else { break };
        // merge into the longer neighbor
        let into_prev = match (i.checked_sub(1), runs.get(i + 1)) {
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (Some(p), Some(&(_, na, nb))) => {
                let (_, pa, pb) = runs[p];
                pb - pa >= nb - na
            }
            (None, None) => break,
        };
        let (_, a, b) = runs.remove(i);
        if into_prev {
            runs[i - 1].2 = b;
        } else {
            runs[i].1 = a;
        }
        // re-join neighbors that ended up with the same kind
        let mut j = 0;
        while j + 1 < runs.len() {
            if runs[j].0 == runs[j + 1].0 {
                runs[j].2 = runs[j + 1].2;
                runs.remove(j + 1);
            } else {
                j += 1;
            }
        }
    }

    // fit each run on its central points; points near a run boundary sit on
    // the rounded transition (or straddling interval) and would bias the fit,
    // and trimming changes nothing when the underlying piece is a true line
    let mut fitted: Vec<(bool, LineFit, usize, usize)> = Vec::new();
    for (ri, &(kind, a, b)) in runs.iter().enumerate() {
        // points a..=b+1
        let mut lo = a;
        let mut hi = b + 1;
        let trim = ((hi - lo + 1) / 4).max(1);
        if hi - lo + 1 >= 2 * trim + 2 {
            lo += trim;
            hi -= trim;
        } else if hi - lo >= 3 {
            if ri > 0 {
                lo += 1;
            }
            if ri + 1 < runs.len() {
                hi -= 1;
            }
        }
        let fit = ols(&trace.xs[lo..=hi], &trace.ys[lo..=hi]);
        fitted.push((kind, fit, a, b));
    }

    // boundaries between consecutive runs: intersection of the fitted lines
    let mut bounds = Vec::with_capacity(fitted.len() + 1);
    bounds.push(trace.xs[0]);
    for w in fitted.windows(2) {
        let (_, f1, _, b1) = w[0];
        let (_, f2, a2, _) = w[1];
        let ds = f1.slope - f2.slope;
        let x = if ds.abs() > 1e-12 {
            (f2.intercept - f1.intercept) / ds
        } else {
            // parallel fits: fall back to the grid boundary
            0.5 * (trace.xs[b1 + 1] + trace.xs[a2])
        };
        bounds.push(x);
    }
    bounds.push(trace.xs[n - 1]);

    let segments = fitted
        .iter()
        .enumerate()
        .map(|(i, &(kind, fit, _, _))| Segment {
            kind: if kind { SegmentKind::Rising } else { SegmentKind::Plateau },
            x_start: bounds[i],
            x_end: bounds[i + 1],
            slope: fit.slope,
            intercept: fit.intercept,
            level: fit.intercept + fit.slope * 0.5 * (bounds[i] + bounds[i + 1]),
        })
        .collect();
    Ok(SegmentDecomposition { segments })
}

/// Read the water constants off a rising/plateau decomposition: specific
/// heats from the reciprocal slopes, latent heats from the plateau widths.
/// The trace x axis must be in cal/g.
pub fn extract_water_properties(
    dec: &SegmentDecomposition,
) -> Result<WaterPropertyEstimate, AnalysisError> {
    let found = dec.pattern();
    if found != "RPRPR" {
        return Err(AnalysisError::PatternMismatch { expected: "RPRPR".into(), found });
    }
    let s = &dec.segments;
    Ok(WaterPropertyEstimate {
        c_ice: 1.0 / s[0].slope,
        c_water: 1.0 / s[2].slope,
        c_steam: 1.0 / s[4].slope,
        l_fusion: s[1].width(),
        l_vapor: s[3].width(),
    })
}

/// Two-column CSV of a trace.
pub fn trace_csv(trace: &ShapeTrace) -> String {
    let mut out = String::from("x,y\n");
    for (x, y) in trace.xs.iter().zip(&trace.ys) {
        out.push_str(&crate::data::format_value(*x));
        out.push(',');
        out.push_str(&crate::data::format_value(*y));
        out.push('\n');
    }
    out
}

const SVG_W: f64 = 800.0;
const SVG_H: f64 = 500.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn svg_num(v: f64) -> String {
    format!("{v:.3}")
}

/// Render traces to a single SVG file with axes, ticks, and a legend.
/// Output bytes are a pure function of the input.
pub fn plot_svg(
    traces: &[ShapeTrace],
    labels: &[String],
    path: &Path,
) -> Result<(), AnalysisError> {
    let text = plot_svg_string(traces, labels)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn plot_svg_string(traces: &[ShapeTrace], labels: &[String]) -> Result<String, AnalysisError> {
    if traces.is_empty() {
        return Err(AnalysisError::EmptyTraces);
    }
    let mut x_lo = f64::INFINITY;
    let mut x_hi = f64::NEG_INFINITY;
    let mut y_lo = f64::INFINITY;
    let mut y_hi = f64::NEG_INFINITY;
    for t in traces {
        for &x in &t.xs {
            x_lo = x_lo.min(x);
            x_hi = x_hi.max(x);
        }
        for &y in &t.ys {
            y_lo = y_lo.min(y);
            y_hi = y_hi.max(y);
        }
    }
    if x_hi == x_lo {
        x_hi = x_lo + 1.0;
    }
    if y_hi == y_lo {
        y_hi = y_lo + 1.0;
    }
    let px = |x: f64| MARGIN + (x - x_lo) / (x_hi - x_lo) * (SVG_W - 2.0 * MARGIN);
    let py = |y: f64| SVG_H - MARGIN - (y - y_lo) / (y_hi - y_lo) * (SVG_H - 2.0 * MARGIN);

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" viewBox=\"0 0 {SVG_W} {SVG_H}\">\n"
    ));
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    // axes
    s.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = SVG_H - MARGIN,
        r = SVG_W - MARGIN
    ));
    s.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        t = MARGIN,
        b = SVG_H - MARGIN
    ));
    // ticks
    for i in 0..=4 {
        let fx = x_lo + (x_hi - x_lo) * i as f64 / 4.0;
        let cx = px(fx);
        s.push_str(&format!(
            "<line x1=\"{cx:.2}\" y1=\"{b:.2}\" x2=\"{cx:.2}\" y2=\"{b2:.2}\" stroke=\"black\"/>\n<text x=\"{cx:.2}\" y=\"{ty:.2}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
            svg_num(fx),
            b = SVG_H - MARGIN,
            b2 = SVG_H - MARGIN + 6.0,
            ty = SVG_H - MARGIN + 20.0,
        ));
        let fy = y_lo + (y_hi - y_lo) * i as f64 / 4.0;
        let cy = py(fy);
        s.push_str(&format!(
            "<line x1=\"{m2:.2}\" y1=\"{cy:.2}\" x2=\"{m:.2}\" y2=\"{cy:.2}\" stroke=\"black\"/>\n<text x=\"{tx:.2}\" y=\"{cy2:.2}\" font-size=\"12\" text-anchor=\"end\">{}</text>\n",
            svg_num(fy),
            m = MARGIN,
            m2 = MARGIN - 6.0,
            tx = MARGIN - 10.0,
            cy2 = cy + 4.0,
        ));
    }
    // polylines
    for (ti, t) in traces.iter().enumerate() {
        let color = PALETTE[ti % PALETTE.len()];
        let pts: Vec<String> = t
            .xs
            .iter()
            .zip(&t.ys)
            .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
    }
    // legend
    for (ti, label) in labels.iter().enumerate().take(traces.len()) {
        let color = PALETTE[ti % PALETTE.len()];
        let ly = MARGIN + 18.0 * ti as f64;
        s.push_str(&format!(
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"12\" height=\"12\" fill=\"{color}\"/>\n<text x=\"{tx:.2}\" y=\"{ty:.2}\" font-size=\"12\">{label}</text>\n",
            x = SVG_W - MARGIN - 150.0,
            y = ly - 10.0,
            tx = SVG_W - MARGIN - 132.0,
            ty = ly,
        ));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::WaterConstants;

    /// The exact temperature-vs-(energy per gram) curve implied by the
    /// ground-truth constants, starting from t0 = -100.
    fn analytic_curve(k: &WaterConstants, n: usize, x_max: f64) -> ShapeTrace {
        let xs: Vec<f64> = (0..n).map(|i| x_max * i as f64 / (n - 1) as f64).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|&q| crate::data::water_temperature(1.0, -100.0, q, k).unwrap())
            .collect();
        ShapeTrace { shape_id: 0, input_range: (0.0, x_max), xs, ys }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn oracle_curve_recovers_constants() {
        let k = WaterConstants::default();
        let trace = analytic_curve(&k, 4000, 1000.0);
        let dec = detect_segments(&trace, PLATEAU_SLOPE_THRESHOLD, MIN_SEGMENT_WIDTH).unwrap();
        assert_eq!(dec.pattern(), "RPRPR");
        let est = extract_water_properties(&dec).unwrap();
        assert!(rel_err(est.c_ice, k.c_ice) <= 1e-6, "c_ice {}", est.c_ice);
        assert!(rel_err(est.c_water, k.c_water) <= 1e-6, "c_water {}", est.c_water);
        assert!(rel_err(est.c_steam, k.c_steam) <= 1e-6, "c_steam {}", est.c_steam);
        assert!(rel_err(est.l_fusion, k.l_fusion) <= 1e-6, "l_fusion {}", est.l_fusion);
        assert!(rel_err(est.l_vapor, k.l_vapor) <= 1e-6, "l_vapor {}", est.l_vapor);
    }

    #[test]
    fn detection_ignores_vertical_translation() {
        let k = WaterConstants::default();
        let base = analytic_curve(&k, 2000, 1000.0);
        let mut shifted = base.clone();
        for y in &mut shifted.ys {
            *y += 37.5;
        }
        let a = detect_segments(&base, PLATEAU_SLOPE_THRESHOLD, MIN_SEGMENT_WIDTH).unwrap();
        let b = detect_segments(&shifted, PLATEAU_SLOPE_THRESHOLD, MIN_SEGMENT_WIDTH).unwrap();
        assert_eq!(a.pattern(), b.pattern());
        for (sa, sb) in a.segments.iter().zip(&b.segments) {
            assert!((sa.x_start - sb.x_start).abs() <= 1e-9);
            assert!((sa.x_end - sb.x_end).abs() <= 1e-9);
            assert!((sa.slope - sb.slope).abs() <= 1e-9);
        }
    }

    #[test]
    fn pure_line_is_single_rising() {
        let xs: Vec<f64> = (0..300).map(|i| i as f64 / 10.0).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| 2.0 * x).collect();
        let trace = ShapeTrace { shape_id: 0, input_range: (0.0, 29.9), xs, ys };
        let dec = detect_segments(&trace, 0.1, 5).unwrap();
        assert_eq!(dec.pattern(), "R");
        assert!((dec.segments[0].slope - 2.0).abs() <= 1e-9);
    }

    #[test]
    fn constant_trace_is_single_plateau() {
        let xs: Vec<f64> = (0..300).map(|i| i as f64).collect();
        let ys = vec![7.0; 300];
        let trace = ShapeTrace { shape_id: 0, input_range: (0.0, 299.0), xs, ys };
        let dec = detect_segments(&trace, 0.1, 5).unwrap();
        assert_eq!(dec.pattern(), "P");
    }

    #[test]
    fn wrong_pattern_is_rejected() {
        let k = WaterConstants::default();
        // stop inside the water phase: R,P,R only
        let trace = analytic_curve(&k, 1500, 150.0);
        let dec = detect_segments(&trace, PLATEAU_SLOPE_THRESHOLD, MIN_SEGMENT_WIDTH).unwrap();
        assert_eq!(dec.pattern(), "RPR");
        assert!(matches!(
            extract_water_properties(&dec),
            Err(AnalysisError::PatternMismatch { .. })
        ));
    }

    #[test]
    fn short_trace_is_rejected() {
        let trace = ShapeTrace {
            shape_id: 0,
            input_range: (0.0, 1.0),
            xs: vec![0.0, 1.0],
            ys: vec![0.0, 1.0],
        };
        assert!(matches!(detect_segments(&trace, 0.1, 5), Err(AnalysisError::NoSegments)));
    }

    #[test]
    fn fit_line_examples() {
        let xs: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| 2.0 * x + 1.0).collect();
        let t = ShapeTrace { shape_id: 0, input_range: (0.0, 49.0), xs, ys };
        let f = fit_line(&t);
        assert!((f.slope - 2.0).abs() <= 1e-12);
        assert!((f.intercept - 1.0).abs() <= 1e-12);
        assert!(f.max_abs_residual <= 1e-9);

        let xs: Vec<f64> = (0..101).map(|i| -1.0 + i as f64 / 50.0).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| x * x).collect();
        let t = ShapeTrace { shape_id: 0, input_range: (-1.0, 1.0), xs, ys };
        assert!(fit_line(&t).slope.abs() <= 1e-12);
    }

    #[test]
    fn fit_line_matches_oracle_rising_slope() {
        let k = WaterConstants::default();
        let trace = analytic_curve(&k, 4000, 1000.0);
        let dec = detect_segments(&trace, PLATEAU_SLOPE_THRESHOLD, MIN_SEGMENT_WIDTH).unwrap();
        assert!((dec.segments[0].slope - 1.0 / k.c_ice).abs() <= 1e-9);
        assert!((dec.segments[2].slope - 1.0 / k.c_water).abs() <= 1e-9);
    }

    #[test]
    fn sampled_shape_grid_is_uniform() {
        use crate::expr::{ExprNode, ExprTree};
        let tree = ExprTree::new(ExprNode::shape(0, ExprNode::var(0)), vec!["x".into()]);
        let model = crate::eval::compile(&tree, 0).unwrap();
        let x_train: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let t = sample_shape(&model, 0, 11, &x_train).unwrap();
        assert_eq!(t.input_range, (0.0, 19.0));
        assert_eq!(t.xs.len(), 11);
        let step = 19.0 / 10.0;
        for (i, &x) in t.xs.iter().enumerate() {
            assert!((x - i as f64 * step).abs() <= 1e-12);
        }
        let two = sample_shape(&model, 0, 2, &x_train).unwrap();
        assert_eq!(two.xs, vec![0.0, 19.0]);
        assert!(matches!(
            sample_shape(&model, 3, 10, &x_train),
            Err(AnalysisError::UnknownShape(3))
        ));
    }

    #[test]
    fn svg_is_deterministic_and_wellformed() {
        let xs: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| x.sin()).collect();
        let t = ShapeTrace { shape_id: 0, input_range: (0.0, 49.0), xs, ys };
        let a = plot_svg_string(&[t.clone()], &["s1".to_string()]).unwrap();
        let b = plot_svg_string(&[t], &["s1".to_string()]).unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.trim_end().ends_with("</svg>"));
        assert_eq!(a.matches("<polyline").count(), 1);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("none.svg");
        assert!(plot_svg(&[], &[], &path).is_err());
        assert!(!path.exists());
    }
}
