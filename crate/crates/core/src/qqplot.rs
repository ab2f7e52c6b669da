//! Q-Q point sets built from spatial ranks and quantiles, plus CSV and SVG
//! serialization.
//!
//! For `d`-dimensional data there are `d` two-dimensional plots, one per
//! coordinate. Points cluster around the slope-1 line through the origin
//! exactly when the compared distributions agree; a slope-`σ`, intercept-`μ`
//! line instead signals a location/homogeneous-scale relation.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use nalgebra::DVector;
use thiserror::Error;

use crate::distributions::{DistributionError, ModelQuantileFunction};
use crate::numerics::DataMatrix;
use crate::spatial::{
    quantile_field, spatial_rank, QuantileIndex, SolverConfig, SpatialError,
    DEFAULT_GRID_RADIUS,
};

#[derive(Debug, Error)]
pub enum QqError {
    #[error(transparent)]
    Spatial(#[from] SpatialError),
    #[error(transparent)]
    Model(#[from] DistributionError),
    #[error("samples have different dimensions: {x} vs {y}")]
    DimensionMismatch { x: usize, y: usize },
    #[error("own-ranks pairing requires equal sample sizes, got {n} and {m}")]
    UnequalSizes { n: usize, m: usize },
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

/// The points of one coordinate's two-dimensional plot.
#[derive(Debug, Clone)]
pub struct QQPointSet {
    /// 1-based coordinate this panel refers to.
    pub coordinate_index: usize,
    pub points: Vec<(f64, f64)>,
    /// `(slope, intercept)` of the reference line, `(1, 0)` by default.
    pub reference_line: (f64, f64),
}

/// Quantile differences laid out as `d` vertical strips, for dimensions too
/// large to show `d` separate panels.
#[derive(Debug, Clone)]
pub struct DifferencePlot {
    pub dim: usize,
    /// `(coordinate l in 1..=d, Q_x,l(u_k) - Q_y,l(u_k))` for every rank.
    pub entries: Vec<(usize, f64)>,
}

/// A full Q-Q construction: one point set per coordinate plus bookkeeping.
#[derive(Debug, Clone)]
pub struct QQPlot {
    pub sets: Vec<QQPointSet>,
    /// Ranks whose norm exceeded the index ball radius and were pulled back.
    pub clamped_ranks: usize,
    /// Fraction of solved quantiles that converged (1.0 when no solving was
    /// needed).
    pub converged_fraction: f64,
}

/// Which ranks drive the two-sample pairing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairingConvention {
    /// All `n + m` ranks from both samples.
    #[default]
    AllRanks,
    /// Only the first sample's `n` ranks; reproduces the univariate
    /// convention of `n` points when `n = m`.
    OwnRanks,
}

fn clamped_ranks_of(x: &DataMatrix) -> (Vec<QuantileIndex>, usize) {
    let mut clamped = 0;
    let ranks = x
        .points()
        .map(|p| {
            let u = spatial_rank(p, x).clamp_to_radius(DEFAULT_GRID_RADIUS);
            if u.was_clamped() {
                clamped += 1;
            }
            u
        })
        .collect();
    (ranks, clamped)
}

/// One-sample construction: pair each observation with the model quantile
/// at that observation's own spatial rank.
pub fn one_sample_points(
    x: &DataMatrix,
    model: &ModelQuantileFunction,
) -> Result<QQPlot, QqError> {
    let d = x.dim();
    let (ranks, clamped) = clamped_ranks_of(x);
    let mut sets: Vec<QQPointSet> = (1..=d)
        .map(|i| QQPointSet {
            coordinate_index: i,
            points: Vec::with_capacity(x.n_points()),
            reference_line: (1.0, 0.0),
        })
        .collect();
    for (k, u) in ranks.iter().enumerate() {
        let q = model.quantile(u)?;
        for (i, set) in sets.iter_mut().enumerate() {
            set.points.push((x.point(k)[i], q[i]));
        }
    }
    Ok(QQPlot {
        sets,
        clamped_ranks: clamped,
        converged_fraction: 1.0,
    })
}

struct MatchedQuantiles {
    qx: Vec<DVector<f64>>,
    qy: Vec<DVector<f64>>,
    clamped: usize,
    converged_fraction: f64,
}

/// Compute `Q_x(u_k)` and `Q_y(u_k)` for every rank index: the native side
/// is the data point itself, the other side is solved.
fn matched_quantiles(
    x: &DataMatrix,
    y: &DataMatrix,
    cfg: &SolverConfig,
    pairing: PairingConvention,
) -> Result<MatchedQuantiles, QqError> {
    if x.dim() != y.dim() {
        return Err(QqError::DimensionMismatch {
            x: x.dim(),
            y: y.dim(),
        });
    }
    let (n, m) = (x.n_points(), y.n_points());
    if pairing == PairingConvention::OwnRanks && n != m {
        return Err(QqError::UnequalSizes { n, m });
    }
    let (ranks_x, cx) = clamped_ranks_of(x);
    let (ranks_y, cy) = match pairing {
        PairingConvention::AllRanks => clamped_ranks_of(y),
        PairingConvention::OwnRanks => (Vec::new(), 0),
    };

    // solve the non-native sides as parallel fields
    let y_field = quantile_field(y, &ranks_x, cfg)?;
    let x_field = if ranks_y.is_empty() {
        None
    } else {
        Some(quantile_field(x, &ranks_y, cfg)?)
    };

    let mut qx: Vec<DVector<f64>> = x.points().map(|p| p.clone_owned()).collect();
    let mut qy: Vec<DVector<f64>> = (0..n).map(|k| y_field.quantile(k).clone()).collect();
    let mut converged = y_field.converged_fraction() * n as f64;
    let mut solved = n as f64;
    if let Some(field) = &x_field {
        for k in 0..m {
            qx.push(field.quantile(k).clone());
            qy.push(y.point(k).clone_owned());
        }
        converged += field.converged_fraction() * m as f64;
        solved += m as f64;
    }
    Ok(MatchedQuantiles {
        qx,
        qy,
        clamped: cx + cy,
        converged_fraction: if solved > 0.0 { converged / solved } else { 1.0 },
    })
}

/// Two-sample construction: match the two empirical quantile functions at
/// the pooled rank indices.
pub fn two_sample_points(
    x: &DataMatrix,
    y: &DataMatrix,
    cfg: &SolverConfig,
    pairing: PairingConvention,
) -> Result<QQPlot, QqError> {
    let mq = matched_quantiles(x, y, cfg, pairing)?;
    let d = x.dim();
    let sets = (1..=d)
        .map(|i| QQPointSet {
            coordinate_index: i,
            points: mq
                .qx
                .iter()
                .zip(&mq.qy)
                .map(|(a, b)| (a[i - 1], b[i - 1]))
                .collect(),
            reference_line: (1.0, 0.0),
        })
        .collect();
    Ok(QQPlot {
        sets,
        clamped_ranks: mq.clamped,
        converged_fraction: mq.converged_fraction,
    })
}

/// Quantile-difference construction for large dimensions.
pub fn difference_plot(
    x: &DataMatrix,
    y: &DataMatrix,
    cfg: &SolverConfig,
) -> Result<DifferencePlot, QqError> {
    let mq = matched_quantiles(x, y, cfg, PairingConvention::AllRanks)?;
    let d = x.dim();
    let mut entries = Vec::with_capacity(d * mq.qx.len());
    for l in 1..=d {
        for (a, b) in mq.qx.iter().zip(&mq.qy) {
            entries.push((l, a[l - 1] - b[l - 1]));
        }
    }
    Ok(DifferencePlot { dim: d, entries })
}

/// What to serialize.
#[derive(Debug, Clone, Copy)]
pub enum PlotData<'a> {
    Points(&'a [QQPointSet]),
    Differences(&'a DifferencePlot),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmitFormat {
    Csv,
    Svg,
}

pub fn emit_csv<W: Write>(data: PlotData<'_>, mut w: W) -> io::Result<()> {
    match data {
        PlotData::Points(sets) => {
            writeln!(w, "coordinate,abscissa,ordinate")?;
            for set in sets {
                for (a, o) in &set.points {
                    writeln!(w, "{},{},{}", set.coordinate_index, a, o)?;
                }
            }
        }
        PlotData::Differences(diff) => {
            writeln!(w, "coordinate,difference")?;
            for (l, v) in &diff.entries {
                writeln!(w, "{},{}", l, v)?;
            }
        }
    }
    Ok(())
}

const PANEL: f64 = 480.0;
const MARGIN_L: f64 = 56.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 20.0;
const MARGIN_B: f64 = 48.0;

struct Axis {
    lo: f64,
    hi: f64,
    pix_lo: f64,
    pix_hi: f64,
}

impl Axis {
    fn new(values: impl Iterator<Item = f64>, pix_lo: f64, pix_hi: f64) -> Self {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() || !hi.is_finite() {
            lo = 0.0;
            hi = 1.0;
        }
        if hi - lo < 1e-12 {
            lo -= 1.0;
            hi += 1.0;
        }
        let pad = 0.05 * (hi - lo);
        Self {
            lo: lo - pad,
            hi: hi + pad,
            pix_lo,
            pix_hi,
        }
    }

    fn map(&self, v: f64) -> f64 {
        self.pix_lo + (v - self.lo) / (self.hi - self.lo) * (self.pix_hi - self.pix_lo)
    }

    fn ticks(&self) -> Vec<f64> {
        (0..5)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / 4.0)
            .collect()
    }
}

#[allow(clippy::too_many_arguments)]
fn svg_panel<W: Write>(
    w: &mut W,
    offset_x: f64,
    xaxis: &Axis,
    yaxis: &Axis,
    points: &[(f64, f64)],
    reference: Option<(f64, f64)>,
    x_label: &str,
    y_label: &str,
) -> io::Result<()> {
    let left = offset_x + MARGIN_L;
    let right = offset_x + PANEL - MARGIN_R;
    let top = MARGIN_T;
    let bottom = PANEL - MARGIN_B;
    writeln!(w, "<g>")?;
    writeln!(
        w,
        "<rect x=\"{left}\" y=\"{top}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444444\"/>",
        right - left,
        bottom - top
    )?;
    for t in xaxis.ticks() {
        let px = xaxis.map(t);
        writeln!(
            w,
            "<line x1=\"{px}\" y1=\"{bottom}\" x2=\"{px}\" y2=\"{}\" stroke=\"#444444\"/>",
            bottom + 4.0
        )?;
        writeln!(
            w,
            "<text x=\"{px}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{:.3}</text>",
            bottom + 16.0,
            t
        )?;
    }
    for t in yaxis.ticks() {
        let py = yaxis.map(t);
        writeln!(
            w,
            "<line x1=\"{}\" y1=\"{py}\" x2=\"{left}\" y2=\"{py}\" stroke=\"#444444\"/>",
            left - 4.0
        )?;
        writeln!(
            w,
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\">{:.3}</text>",
            left - 6.0,
            py + 4.0,
            t
        )?;
    }
    writeln!(
        w,
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{}</text>",
        (left + right) / 2.0,
        PANEL - 12.0,
        x_label
    )?;
    writeln!(
        w,
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 {} {})\">{}</text>",
        offset_x + 14.0,
        (top + bottom) / 2.0,
        offset_x + 14.0,
        (top + bottom) / 2.0,
        y_label
    )?;
    if let Some((slope, intercept)) = reference {
        let (x0, x1) = (xaxis.lo, xaxis.hi);
        let (y0, y1) = (slope * x0 + intercept, slope * x1 + intercept);
        writeln!(
            w,
            "<line class=\"refline\" x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#cc3333\" stroke-width=\"1\"/>",
            xaxis.map(x0),
            yaxis.map(y0),
            xaxis.map(x1),
            yaxis.map(y1)
        )?;
    }
    for (a, o) in points {
        writeln!(
            w,
            "<circle cx=\"{}\" cy=\"{}\" r=\"2\" fill=\"#336699\" fill-opacity=\"0.7\"/>",
            xaxis.map(*a),
            yaxis.map(*o)
        )?;
    }
    writeln!(w, "</g>")
}

pub fn emit_svg<W: Write>(data: PlotData<'_>, mut w: W) -> io::Result<()> {
    match data {
        PlotData::Points(sets) => {
            let width = PANEL * sets.len() as f64;
            writeln!(
                w,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{PANEL}\" viewBox=\"0 0 {width} {PANEL}\">"
            )?;
            writeln!(w, "<rect width=\"{width}\" height=\"{PANEL}\" fill=\"white\"/>")?;
            for (p, set) in sets.iter().enumerate() {
                let offset = PANEL * p as f64;
                let xaxis = Axis::new(
                    set.points.iter().map(|(a, _)| *a),
                    offset + MARGIN_L,
                    offset + PANEL - MARGIN_R,
                );
                let yaxis = Axis::new(
                    set.points.iter().map(|(_, o)| *o),
                    PANEL - MARGIN_B,
                    MARGIN_T,
                );
                svg_panel(
                    &mut w,
                    offset,
                    &xaxis,
                    &yaxis,
                    &set.points,
                    Some(set.reference_line),
                    &format!("coordinate {}", set.coordinate_index),
                    &format!("coordinate {}", set.coordinate_index),
                )?;
            }
            writeln!(w, "</svg>")
        }
        PlotData::Differences(diff) => {
            writeln!(
                w,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PANEL}\" height=\"{PANEL}\" viewBox=\"0 0 {PANEL} {PANEL}\">"
            )?;
            writeln!(w, "<rect width=\"{PANEL}\" height=\"{PANEL}\" fill=\"white\"/>")?;
            let xaxis = Axis {
                lo: 0.5,
                hi: diff.dim as f64 + 0.5,
                pix_lo: MARGIN_L,
                pix_hi: PANEL - MARGIN_R,
            };
            let yaxis = Axis::new(
                diff.entries.iter().map(|(_, v)| *v).chain([0.0]),
                PANEL - MARGIN_B,
                MARGIN_T,
            );
            let points: Vec<(f64, f64)> = diff
                .entries
                .iter()
                .map(|(l, v)| (*l as f64, *v))
                .collect();
            svg_panel(
                &mut w,
                0.0,
                &xaxis,
                &yaxis,
                &points,
                Some((0.0, 0.0)),
                "coordinate",
                "quantile difference",
            )?;
            writeln!(w, "</svg>")
        }
    }
}

/// Serialize to a file; the format is chosen by the caller (the CLI infers
/// it from the extension).
pub fn emit(data: PlotData<'_>, format: EmitFormat, path: &Path) -> Result<(), QqError> {
    emit_with_comments(data, format, path, &[])
}

/// Like [`emit`], prepending `#`-prefixed comment lines to CSV output; used
/// by the CLI to echo its configuration into emitted files.
pub fn emit_with_comments(
    data: PlotData<'_>,
    format: EmitFormat,
    path: &Path,
    comments: &[String],
) -> Result<(), QqError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    if format == EmitFormat::Csv {
        for c in comments {
            writeln!(w, "# {c}")?;
        }
        emit_csv(data, &mut w)?;
    } else {
        emit_svg(data, &mut w)?;
    }
    w.flush()?;
    Ok(())
}

/// A simple polyline chart used for power-curve output.
pub fn emit_line_chart_svg<W: Write>(
    series: &[(String, Vec<(f64, f64)>)],
    x_label: &str,
    y_label: &str,
    mut w: W,
) -> io::Result<()> {
    writeln!(
        w,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PANEL}\" height=\"{PANEL}\" viewBox=\"0 0 {PANEL} {PANEL}\">"
    )?;
    writeln!(w, "<rect width=\"{PANEL}\" height=\"{PANEL}\" fill=\"white\"/>")?;
    let xs = series.iter().flat_map(|(_, pts)| pts.iter().map(|(x, _)| *x));
    let ys = series.iter().flat_map(|(_, pts)| pts.iter().map(|(_, y)| *y));
    let xaxis = Axis::new(xs, MARGIN_L, PANEL - MARGIN_R);
    let yaxis = Axis::new(ys, PANEL - MARGIN_B, MARGIN_T);
    svg_panel(&mut w, 0.0, &xaxis, &yaxis, &[], None, x_label, y_label)?;
    let palette = ["#336699", "#cc3333", "#339955", "#996633", "#663399"];
    for (s, (name, pts)) in series.iter().enumerate() {
        let color = palette[s % palette.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|(x, y)| format!("{},{}", xaxis.map(*x), yaxis.map(*y)))
            .collect();
        writeln!(
            w,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            path.join(" ")
        )?;
        writeln!(
            w,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{}</text>",
            PANEL - MARGIN_R - 120.0,
            MARGIN_T + 16.0 * (s as f64 + 1.0),
            name
        )?;
    }
    writeln!(w, "</svg>")
}
