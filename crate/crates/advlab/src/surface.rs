//! Loss-surface sampling on the plane spanned by an adversarial direction
//! and a random direction.
//!
//! A grid cell at coordinates `(a, b)` evaluates the model at
//! `clamp(x + a * v1 + b * v2)`: its loss, predicted label and whether the
//! prediction is correct. With the default ranges `a, b in [0, 1]`, the
//! `b = 0` row walks the adversarial segment itself, so a distorted
//! interval (an interior misclassification between two correct endpoints)
//! shows up as a wrong cell strictly between `a = 0` and `a = 1`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;

use crate::array::{sgn, DenseArray};
use crate::attack::project_linf;
use crate::error::{Error, Result};
use crate::nn::{per_example_losses, predictions, Classifier, LabeledBatch};

/// How to obtain the primary direction `v1`.
#[derive(Debug, Clone)]
pub enum V1Source {
    /// `epsilon * sgn(grad)` at the anchor.
    Fgsm { epsilon: f64 },
    /// The random-init single-step perturbation (noise + signed step,
    /// clipped back to the ball).
    Fast { epsilon: f64, alpha: f64 },
    /// Any externally produced perturbation, e.g. an attack's delta.
    Supplied(DenseArray),
}

/// One evaluated grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceCell {
    pub loss: f64,
    pub pred: usize,
    pub correct: bool,
}

/// Sampled loss surface around one anchor example.
///
/// Cells are row-major with `a` outer and `b` inner: cell `(i, j)` is at
/// `cells[i * resolution + j]`, `a_i = a_lo + i * (a_hi - a_lo) /
/// (resolution - 1)` and likewise for `b`.
#[derive(Debug, Clone)]
pub struct SurfaceGrid {
    pub anchor_index: usize,
    pub label: usize,
    pub v1: DenseArray,
    pub v2: DenseArray,
    pub a_range: (f64, f64),
    pub b_range: (f64, f64),
    pub resolution: usize,
    pub cells: Vec<SurfaceCell>,
}

impl SurfaceGrid {
    /// Axis coordinate for grid index `i`.
    fn coord(range: (f64, f64), resolution: usize, i: usize) -> f64 {
        range.0 + (i as f64 / (resolution - 1) as f64) * (range.1 - range.0)
    }

    pub fn a_at(&self, i: usize) -> f64 {
        Self::coord(self.a_range, self.resolution, i)
    }

    pub fn b_at(&self, j: usize) -> f64 {
        Self::coord(self.b_range, self.resolution, j)
    }

    pub fn cell(&self, i: usize, j: usize) -> &SurfaceCell {
        &self.cells[i * self.resolution + j]
    }
}

/// Per-pixel uniform draw in `[-epsilon, epsilon]`, used for `v2`.
pub fn random_direction(
    shape: &[usize],
    epsilon: f64,
    rng: &mut impl Rng,
) -> Result<DenseArray> {
    if epsilon < 0.0 || !epsilon.is_finite() {
        return Err(Error::config(format!("epsilon {epsilon} must be >= 0")));
    }
    let n: usize = shape.iter().product();
    let data = if epsilon == 0.0 {
        vec![0.0; n]
    } else {
        (0..n).map(|_| rng.gen_range(-epsilon..=epsilon)).collect()
    };
    DenseArray::new(shape.to_vec(), data)
}

/// Samples the loss surface around a one-example anchor batch.
///
/// `v2` is drawn from the same infinity-ball radius as `v1` (the source's
/// epsilon, or the max-abs of a supplied delta). Each cell clamps its
/// probe point to pixel range before evaluation. Deterministic given the
/// rng stream.
#[allow(clippy::too_many_arguments)]
pub fn sample_surface<C: Classifier + ?Sized>(
    model: &C,
    anchor: &LabeledBatch,
    anchor_index: usize,
    v1_source: &V1Source,
    rng: &mut impl Rng,
    a_range: (f64, f64),
    b_range: (f64, f64),
    resolution: usize,
) -> Result<SurfaceGrid> {
    if resolution < 2 {
        return Err(Error::config(format!("resolution {resolution} must be >= 2")));
    }
    for (lo, hi) in [a_range, b_range] {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::config(format!("bad axis range [{lo}, {hi}]")));
        }
    }
    if anchor.len() != 1 {
        return Err(Error::input(format!(
            "surface anchor must be a single example, got {}",
            anchor.len()
        )));
    }
    let x = anchor.images();
    let label = anchor.labels()[0];

    let (v1, v2_epsilon) = match v1_source {
        V1Source::Fgsm { epsilon } => {
            if *epsilon < 0.0 {
                return Err(Error::config(format!("epsilon {epsilon} must be >= 0")));
            }
            let lg = model.loss_and_input_grad(x, anchor.labels())?;
            (lg.input_grad.map(|g| epsilon * sgn(g))?, *epsilon)
        }
        V1Source::Fast { epsilon, alpha } => {
            if *epsilon < 0.0 || *alpha < 0.0 {
                return Err(Error::config("epsilon and alpha must be >= 0".into()));
            }
            let eta = random_direction(x.shape(), *epsilon, rng)?;
            let init = x.zip_with(&eta, |p, e| p + e)?;
            let lg = model.loss_and_input_grad(&init, anchor.labels())?;
            let raw = eta.zip_with(&lg.input_grad, |e, g| e + alpha * sgn(g))?;
            (project_linf(&raw, *epsilon)?, *epsilon)
        }
        V1Source::Supplied(delta) => {
            if delta.shape() != x.shape() {
                return Err(Error::config(format!(
                    "supplied v1 shape {:?} does not match anchor shape {:?}",
                    delta.shape(),
                    x.shape()
                )));
            }
            (delta.clone(), delta.max_abs())
        }
    };
    if v1.max_abs() == 0.0 {
        return Err(Error::config("degenerate zero v1 direction".into()));
    }
    let v2 = random_direction(x.shape(), v2_epsilon, rng)?;

    // Evaluate cells in chunks of whole grid rows to bound memory.
    let mut cells = Vec::with_capacity(resolution * resolution);
    let width = x.row_len();
    let rows_per_chunk = (4096 / resolution).max(1);
    let mut i = 0;
    while i < resolution {
        let hi = (i + rows_per_chunk).min(resolution);
        let n_points = (hi - i) * resolution;
        let mut data = Vec::with_capacity(n_points * width);
        for gi in i..hi {
            let a = SurfaceGrid::coord(a_range, resolution, gi);
            for gj in 0..resolution {
                let b = SurfaceGrid::coord(b_range, resolution, gj);
                for k in 0..width {
                    let p = x.data()[k] + a * v1.data()[k] + b * v2.data()[k];
                    data.push(p.clamp(0.0, 1.0));
                }
            }
        }
        let mut shape = vec![n_points];
        shape.extend_from_slice(&x.shape()[1..]);
        let points = DenseArray::new(shape, data)?;
        let logits = model.forward(&points)?;
        let labels = vec![label; n_points];
        let losses = per_example_losses(&logits, &labels)?;
        let preds = predictions(&logits);
        for (loss, pred) in losses.into_iter().zip(preds) {
            cells.push(SurfaceCell { loss, pred, correct: pred == label });
        }
        i = hi;
    }

    Ok(SurfaceGrid { anchor_index, label, v1, v2, a_range, b_range, resolution, cells })
}

/// Decimal float with 17 significant digits; parses back bit-exactly.
pub(crate) fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes the grid as CSV: header `a,b,loss,pred,correct`, rows in
/// row-major order (`a` outer, `b` inner), floats with 17 significant
/// digits, `correct` as 0/1. The grid is validated before the file is
/// created.
pub fn export_grid(grid: &SurfaceGrid, path: &Path) -> Result<()> {
    if grid.resolution < 2 {
        return Err(Error::config(format!("resolution {} must be >= 2", grid.resolution)));
    }
    if grid.cells.len() != grid.resolution * grid.resolution {
        return Err(Error::config(format!(
            "{} cells for resolution {}",
            grid.cells.len(),
            grid.resolution
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "a,b,loss,pred,correct")?;
    for i in 0..grid.resolution {
        for j in 0..grid.resolution {
            let cell = grid.cell(i, j);
            writeln!(
                w,
                "{},{},{},{},{}",
                format_f64(grid.a_at(i)),
                format_f64(grid.b_at(j)),
                format_f64(cell.loss),
                cell.pred,
                u8::from(cell.correct),
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One parsed CSV row of an exported grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub a: f64,
    pub b: f64,
    pub loss: f64,
    pub pred: usize,
    pub correct: bool,
}

/// Reads back a grid CSV written by [`export_grid`].
pub fn read_grid_csv(path: &Path) -> Result<Vec<GridRow>> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if idx == 0 {
            if line != "a,b,loss,pred,correct" {
                return Err(Error::FormatAtLine {
                    line: 1,
                    msg: format!("expected grid header, got {line:?}"),
                });
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::FormatAtLine {
                line: lineno,
                msg: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let f = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::FormatAtLine {
                line: lineno,
                msg: format!("bad float {s:?}"),
            })
        };
        let correct = match fields[4] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::FormatAtLine {
                    line: lineno,
                    msg: format!("bad correct flag {other:?}"),
                })
            }
        };
        rows.push(GridRow {
            a: f(fields[0])?,
            b: f(fields[1])?,
            loss: f(fields[2])?,
            pred: fields[3].parse().map_err(|_| Error::FormatAtLine {
                line: lineno,
                msg: format!("bad label {:?}", fields[3]),
            })?,
            correct,
        });
    }
    Ok(rows)
}
