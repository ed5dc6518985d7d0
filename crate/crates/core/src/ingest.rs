//! Data ingestion and synthetic data generation.
//!
//! Two plain-text formats, both UTF-8 with LF or CRLF line endings and all
//! numerics as decimal floating point:
//!
//! Curve CSV. Header `grid,<t_1>,...,<t_G>`, one row per curve:
//! `label,<v_1>,...,<v_G>`. When design metadata is present the header gains
//! `row`, `col`, and/or `block` tokens (in that order) directly after
//! `grid`, and each data row carries the matching columns between the label
//! and the values. A file with a single grid point is read as scalar data.
//!
//! Operator file. Per operator: a header `operator,<label>,dim=<d>` followed
//! by d rows of d comma-separated reals. Symmetry is validated on load.
//!
//! Curves are accepted pre-smoothed; smoothing is upstream of this tool.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand_distr::Distribution;

use crate::bounds::Observation;
use crate::error::{Error, Result};
use crate::linalg::{empirical_covariance, matrix_sqrt, GridCurve, SymOperator};
use crate::mc_oracle::{derive_seed, substream};

/// Per-observation design indices parsed from the optional curve-CSV
/// columns.
#[derive(Debug, Clone, Default)]
pub struct DesignColumns {
    pub row: Option<Vec<usize>>,
    pub col: Option<Vec<usize>>,
    pub block: Option<Vec<String>>,
}

/// Observations with group labels; the universal test input.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub items: Vec<Observation>,
    pub labels: Vec<String>,
    pub design: DesignColumns,
}

impl LabeledSample {
    pub fn new(items: Vec<Observation>, labels: Vec<String>) -> Result<Self> {
        if items.len() != labels.len() {
            return Err(Error::domain("labels must match items one to one"));
        }
        Ok(LabeledSample {
            items,
            labels,
            design: DesignColumns::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Distinct labels in order of first appearance.
    pub fn label_order(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for l in &self.labels {
            if !seen.contains(l) {
                seen.push(l.clone());
            }
        }
        seen
    }

    /// Groups items by label, in order of first appearance.
    pub fn groups(&self) -> Vec<(String, Vec<Observation>)> {
        let order = self.label_order();
        order
            .into_iter()
            .map(|l| {
                let items = self
                    .items
                    .iter()
                    .zip(&self.labels)
                    .filter(|(_, lab)| **lab == l)
                    .map(|(it, _)| it.clone())
                    .collect();
                (l, items)
            })
            .collect()
    }
}

fn parse_f64(tok: &str, line: usize, what: &str) -> Result<f64> {
    let v: f64 = tok.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("could not parse {what} from {tok:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            msg: format!("non-finite {what}: {tok:?}"),
        });
    }
    Ok(v)
}

fn parse_usize(tok: &str, line: usize, what: &str) -> Result<usize> {
    tok.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("could not parse {what} from {tok:?}"),
    })
}

/// Loads the curve CSV format. Single-point grids come back as scalars.
pub fn load_curves(path: impl AsRef<Path>) -> Result<LabeledSample> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text
        .lines()
        .map(|l| l.trim_end_matches('\r'))
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());

    let (hline, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let toks: Vec<&str> = header.split(',').map(|t| t.trim()).collect();
    if toks.first().map(|t| t.to_ascii_lowercase()) != Some("grid".into()) {
        return Err(Error::Parse {
            line: hline + 1,
            msg: "curve files start with a `grid` header".into(),
        });
    }
    let mut i = 1;
    let has_row = toks.get(i).is_some_and(|t| t.eq_ignore_ascii_case("row"));
    i += has_row as usize;
    let has_col = toks.get(i).is_some_and(|t| t.eq_ignore_ascii_case("col"));
    i += has_col as usize;
    let has_block = toks.get(i).is_some_and(|t| t.eq_ignore_ascii_case("block"));
    i += has_block as usize;
    let grid: Vec<f64> = toks[i..]
        .iter()
        .map(|t| parse_f64(t, hline + 1, "grid point"))
        .collect::<Result<_>>()?;
    if grid.is_empty() {
        return Err(Error::Parse {
            line: hline + 1,
            msg: "header declares no grid points".into(),
        });
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Parse {
            line: hline + 1,
            msg: "grid must be strictly increasing".into(),
        });
    }
    let g = grid.len();
    let width = 1 + has_row as usize + has_col as usize + has_block as usize + g;

    let mut items = Vec::new();
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    let mut blocks = Vec::new();
    for (lineno, line) in lines {
        let toks: Vec<&str> = line.split(',').map(|t| t.trim()).collect();
        if toks.len() != width {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: format!("expected {width} cells, found {}", toks.len()),
            });
        }
        labels.push(toks[0].to_string());
        let mut i = 1;
        if has_row {
            rows.push(parse_usize(toks[i], lineno + 1, "row index")?);
            i += 1;
        }
        if has_col {
            cols.push(parse_usize(toks[i], lineno + 1, "column index")?);
            i += 1;
        }
        if has_block {
            blocks.push(toks[i].to_string());
            i += 1;
        }
        let values: Vec<f64> = toks[i..]
            .iter()
            .map(|t| parse_f64(t, lineno + 1, "value"))
            .collect::<Result<_>>()?;
        if g == 1 {
            items.push(Observation::Scalar(values[0]));
        } else {
            items.push(Observation::Curve(GridCurve::new(grid.clone(), values)?));
        }
    }
    if items.is_empty() {
        return Err(Error::Parse {
            line: hline + 1,
            msg: "file contains a header but no curves".into(),
        });
    }
    let mut sample = LabeledSample::new(items, labels)?;
    sample.design = DesignColumns {
        row: has_row.then_some(rows),
        col: has_col.then_some(cols),
        block: has_block.then_some(blocks),
    };
    Ok(sample)
}

/// Writes curves (or scalars) in the curve CSV format.
pub fn save_curves(path: impl AsRef<Path>, sample: &LabeledSample) -> Result<()> {
    let mut out = String::new();
    let grid: Vec<f64> = match sample.items.first() {
        Some(Observation::Curve(c)) => c.grid().to_vec(),
        Some(Observation::Scalar(_)) => vec![0.0],
        _ => return Err(Error::domain("save_curves writes curve or scalar samples")),
    };
    out.push_str("grid");
    let has_row = sample.design.row.is_some();
    let has_col = sample.design.col.is_some();
    let has_block = sample.design.block.is_some();
    if has_row {
        out.push_str(",row");
    }
    if has_col {
        out.push_str(",col");
    }
    if has_block {
        out.push_str(",block");
    }
    for t in &grid {
        let _ = write!(out, ",{t}");
    }
    out.push('\n');
    for (i, (item, label)) in sample.items.iter().zip(&sample.labels).enumerate() {
        out.push_str(label);
        if let Some(rows) = &sample.design.row {
            let _ = write!(out, ",{}", rows[i]);
        }
        if let Some(cols) = &sample.design.col {
            let _ = write!(out, ",{}", cols[i]);
        }
        if let Some(blocks) = &sample.design.block {
            let _ = write!(out, ",{}", blocks[i]);
        }
        match item {
            Observation::Curve(c) => {
                for v in c.values() {
                    let _ = write!(out, ",{v}");
                }
            }
            Observation::Scalar(v) => {
                let _ = write!(out, ",{v}");
            }
            _ => return Err(Error::domain("save_curves writes curve or scalar samples")),
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Loads stacked d x d operator blocks with label headers.
pub fn load_operators(path: impl AsRef<Path>) -> Result<LabeledSample> {
    let text = std::fs::read_to_string(path)?;
    let lines: Vec<(usize, &str)> = text
        .lines()
        .map(|l| l.trim_end_matches('\r'))
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .collect();
    let mut items = Vec::new();
    let mut labels = Vec::new();
    let mut pos = 0;
    while pos < lines.len() {
        let (lineno, header) = lines[pos];
        let toks: Vec<&str> = header.split(',').map(|t| t.trim()).collect();
        if toks.len() != 3 || !toks[0].eq_ignore_ascii_case("operator") {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: "expected an `operator,<label>,dim=<d>` header".into(),
            });
        }
        let label = toks[1].to_string();
        let dim_str = toks[2].strip_prefix("dim=").ok_or(Error::Parse {
            line: lineno + 1,
            msg: "third header field must be dim=<d>".into(),
        })?;
        let d = parse_usize(dim_str, lineno + 1, "dimension")?;
        if d == 0 {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: "operator dimension must be positive".into(),
            });
        }
        if pos + d > lines.len() && pos + d > lines.len() {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: format!("operator block truncated: expected {d} rows"),
            });
        }
        let mut mat = nalgebra::DMatrix::zeros(d, d);
        for r in 0..d {
            let (rl, row) = *lines.get(pos + 1 + r).ok_or(Error::Parse {
                line: lineno + 1,
                msg: format!("operator block truncated: expected {d} rows"),
            })?;
            let toks: Vec<&str> = row.split(',').map(|t| t.trim()).collect();
            if toks.len() != d {
                return Err(Error::Parse {
                    line: rl + 1,
                    msg: format!("expected {d} cells, found {}", toks.len()),
                });
            }
            for (c, t) in toks.iter().enumerate() {
                mat[(r, c)] = parse_f64(t, rl + 1, "operator entry")?;
            }
        }
        let op = SymOperator::new(mat).map_err(|e| Error::Parse {
            line: lineno + 1,
            msg: format!("operator {label:?}: {e}"),
        })?;
        items.push(Observation::Operator(op));
        labels.push(label);
        pos += 1 + d;
    }
    if items.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "file contains no operator blocks".into(),
        });
    }
    LabeledSample::new(items, labels)
}

pub fn save_operators(path: impl AsRef<Path>, sample: &LabeledSample) -> Result<()> {
    let mut out = String::new();
    for (item, label) in sample.items.iter().zip(&sample.labels) {
        let Observation::Operator(op) = item else {
            return Err(Error::domain("save_operators writes operator samples"));
        };
        let d = op.dim();
        let _ = writeln!(out, "operator,{label},dim={d}");
        for r in 0..d {
            for c in 0..d {
                if c > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{}", op.matrix()[(r, c)]);
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Regroups curves into covariance operators: within each label, curves are
/// shuffled (seeded) and partitioned into consecutive groups of
/// `group_size`, each yielding one centred empirical covariance. Labels are
/// inherited.
pub fn curves_to_operators(
    sample: &LabeledSample,
    group_size: usize,
    seed: u64,
) -> Result<LabeledSample> {
    if group_size < 2 {
        return Err(Error::domain("group_size must be at least 2"));
    }
    let mut items = Vec::new();
    let mut labels = Vec::new();
    for (label_idx, label) in sample.label_order().iter().enumerate() {
        let idx: Vec<usize> = (0..sample.len())
            .filter(|&i| sample.labels[i] == *label)
            .collect();
        if !idx.len().is_multiple_of(group_size) {
            return Err(Error::domain(format!(
                "label {label:?} has {} curves, not divisible by group_size {group_size}",
                idx.len()
            )));
        }
        let mut shuffled = idx.clone();
        let mut rng = substream(derive_seed(seed, label_idx as u64), 0);
        shuffled.shuffle(&mut rng);
        for chunk in shuffled.chunks(group_size) {
            let rows: Vec<DVector<f64>> = chunk
                .iter()
                .map(|&i| match &sample.items[i] {
                    Observation::Curve(c) => Ok(DVector::from_row_slice(c.values())),
                    Observation::Vector(v) => Ok(v.clone()),
                    _ => Err(Error::domain(
                        "curves_to_operators expects curve or vector items",
                    )),
                })
                .collect::<Result<_>>()?;
            let cov = empirical_covariance(&rows, true)?;
            items.push(Observation::Operator(cov));
            labels.push(label.clone());
        }
    }
    LabeledSample::new(items, labels)
}

/// Draws n Gaussian curves `mean + cov^{1/2} z` with independent standard
/// normal coordinates; draw i uses substream i of the seed.
pub fn simulate_gaussian_curves(
    mean: &GridCurve,
    covariance: &SymOperator,
    n: usize,
    seed: u64,
) -> Result<Vec<GridCurve>> {
    let d = mean.len();
    if covariance.dim() != d {
        return Err(Error::domain(format!(
            "covariance dimension {} does not match grid length {d}",
            covariance.dim()
        )));
    }
    let root = matrix_sqrt(covariance)?.into_matrix();
    let mean_vec = DVector::from_row_slice(mean.values());
    let normal = rand_distr::StandardNormal;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = substream(seed, i as u64);
        let z = DVector::from_fn(d, |_, _| normal.sample(&mut rng));
        let values = &mean_vec + &root * z;
        out.push(GridCurve::new(
            mean.grid().to_vec(),
            values.iter().copied().collect(),
        )?);
    }
    Ok(out)
}
