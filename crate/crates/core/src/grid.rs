//! Uniform rectilinear grids, gridded fields and the EPDE-GRID v1 text format.
//!
//! Values are stored row-major with the first axis (time, by convention)
//! varying slowest.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};

pub const MAGIC: &str = "EPDE-GRID v1";

/// Number of values written per line by [`save_dataset`].
const VALUES_PER_LINE: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dim_names: Vec<String>,
    shape: Vec<usize>,
    origins: Vec<f64>,
    steps: Vec<f64>,
}

impl Grid {
    pub fn new(
        dim_names: Vec<String>,
        shape: Vec<usize>,
        origins: Vec<f64>,
        steps: Vec<f64>,
    ) -> Result<Self> {
        let m = dim_names.len();
        if m == 0 {
            return Err(Error::Shape("grid needs at least one axis".into()));
        }
        if shape.len() != m || origins.len() != m || steps.len() != m {
            return Err(Error::Shape(format!(
                "axis metadata lengths differ: {} names, {} shape, {} origins, {} steps",
                m,
                shape.len(),
                origins.len(),
                steps.len()
            )));
        }
        for (name, &n) in dim_names.iter().zip(&shape) {
            if n < 3 {
                return Err(Error::Shape(format!(
                    "axis `{name}` has {n} points; at least 3 are required"
                )));
            }
        }
        for (name, (&o, &h)) in dim_names.iter().zip(origins.iter().zip(&steps)) {
            if !o.is_finite() || !h.is_finite() || h <= 0.0 {
                return Err(Error::Shape(format!(
                    "axis `{name}` has invalid origin/step ({o}, {h})"
                )));
            }
        }
        for (i, a) in dim_names.iter().enumerate() {
            if a.is_empty() || a.contains(char::is_whitespace) || a.contains(',') {
                return Err(Error::Shape(format!("invalid axis name `{a}`")));
            }
            if dim_names[..i].contains(a) {
                return Err(Error::Shape(format!("duplicate axis name `{a}`")));
            }
        }
        Ok(Self {
            dim_names,
            shape,
            origins,
            steps,
        })
    }

    pub fn dim_names(&self) -> &[String] {
        &self.dim_names
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn origins(&self) -> &[f64] {
        &self.origins
    }

    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Total number of grid points.
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn axis_index(&self, name: &str) -> Option<usize> {
        self.dim_names.iter().position(|d| d == name)
    }

    /// Row-major strides; the last axis is contiguous.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.ndim()];
        for a in (0..self.ndim().saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * self.shape[a + 1];
        }
        strides
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.ndim());
        idx.iter().zip(self.strides()).map(|(i, s)| i * s).sum()
    }

    pub fn unravel(&self, mut flat: usize) -> Vec<usize> {
        let mut out = vec![0; self.ndim()];
        for (a, s) in self.strides().into_iter().enumerate() {
            out[a] = flat / s;
            flat %= s;
        }
        out
    }

    /// Physical coordinates of the points along one axis.
    pub fn axis_coords(&self, axis: usize) -> Vec<f64> {
        (0..self.shape[axis])
            .map(|i| self.origins[axis] + i as f64 * self.steps[axis])
            .collect()
    }

    /// The coordinate of `axis` broadcast over the whole grid.
    pub fn coordinate_field(&self, axis: usize) -> Vec<f64> {
        let coords = self.axis_coords(axis);
        let stride = self.strides()[axis];
        let n = self.shape[axis];
        (0..self.len()).map(|f| coords[(f / stride) % n]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataField {
    pub name: String,
    pub grid: Arc<Grid>,
    pub values: Vec<f64>,
}

impl DataField {
    pub fn new(name: impl Into<String>, grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if values.len() != grid.len() {
            return Err(Error::Shape(format!(
                "field `{name}` has {} values, grid has {} points",
                values.len(),
                grid.len()
            )));
        }
        check_finite(&values)?;
        Ok(Self { name, grid, values })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub grid: Arc<Grid>,
    pub fields: Vec<DataField>,
}

impl Dataset {
    pub fn new(grid: Arc<Grid>, fields: Vec<DataField>) -> Result<Self> {
        if fields.is_empty() {
            return Err(Error::Shape("dataset needs at least one field".into()));
        }
        for (i, f) in fields.iter().enumerate() {
            if *f.grid != *grid {
                return Err(Error::Shape(format!(
                    "field `{}` is defined on a different grid",
                    f.name
                )));
            }
            if fields[..i].iter().any(|g| g.name == f.name) {
                return Err(Error::Shape(format!("duplicate field name `{}`", f.name)));
            }
            if f.name.is_empty() || f.name.contains(char::is_whitespace) || f.name.contains(',') {
                return Err(Error::Shape(format!("invalid field name `{}`", f.name)));
            }
        }
        Ok(Self { grid, fields })
    }

    pub fn field(&self, name: &str) -> Option<&DataField> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn variable_names(&self) -> Vec<String> {
        self.fields.iter().map(|f| f.name.clone()).collect()
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::Data {
            index,
            message: format!("non-finite value {}", values[index]),
        }),
        None => Ok(()),
    }
}

/// Euclidean norm of a value array.
pub fn field_l2_norm(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Argument("norm of an empty array".into()));
    }
    Ok(values.iter().map(|v| v * v).sum::<f64>().sqrt())
}

fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// Renders a dataset in EPDE-GRID v1. `comments` are emitted as `#` lines
/// right after the magic line.
pub fn dataset_to_string(dataset: &Dataset, comments: &[String]) -> Result<String> {
    for f in &dataset.fields {
        check_finite(&f.values)?;
    }
    let g = &dataset.grid;
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    for c in comments {
        for line in c.lines() {
            let _ = writeln!(out, "# {line}");
        }
    }
    let _ = writeln!(out, "vars: {}", dataset.variable_names().join(","));
    let _ = writeln!(out, "dims: {}", g.dim_names().join(","));
    let shape: Vec<String> = g.shape().iter().map(|n| n.to_string()).collect();
    let _ = writeln!(out, "shape: {}", shape.join(" "));
    for a in 0..g.ndim() {
        let _ = writeln!(
            out,
            "axis {}: {} {}",
            g.dim_names()[a],
            fmt_real(g.origins()[a]),
            fmt_real(g.steps()[a])
        );
    }
    for f in &dataset.fields {
        let _ = writeln!(out, "field: {}", f.name);
        for chunk in f.values.chunks(VALUES_PER_LINE) {
            let line: Vec<String> = chunk.iter().map(|&v| fmt_real(v)).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn save_dataset_with_comments(
    dataset: &Dataset,
    path: impl AsRef<Path>,
    comments: &[String],
) -> Result<()> {
    let path = path.as_ref();
    let text = dataset_to_string(dataset, comments)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    save_dataset_with_comments(dataset, path, &[])
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

fn fmt_err(line: usize, message: impl Into<String>) -> Error {
    Error::Format {
        line,
        message: message.into(),
    }
}

fn header_value<'a>(line: Option<(usize, &'a str)>, key: &str) -> Result<(usize, &'a str)> {
    let (no, text) = line.ok_or_else(|| fmt_err(0, format!("missing `{key}` line")))?;
    let rest = text
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix(':'))
        .ok_or_else(|| fmt_err(no, format!("expected `{key}: ...`")))?;
    Ok((no, rest.trim()))
}

fn parse_real(no: usize, tok: &str) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| fmt_err(no, format!("cannot parse `{tok}` as a real")))
}

fn parse_name_list(no: usize, list: &str) -> Result<Vec<String>> {
    let names: Vec<String> = list.split(',').map(|s| s.trim().to_string()).collect();
    if names.iter().any(|n| n.is_empty()) {
        return Err(fmt_err(no, "empty name in list"));
    }
    Ok(names)
}

/// Parses EPDE-GRID v1 text.
pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    match lines.next() {
        Some((_, l)) if l == MAGIC => {}
        Some((no, l)) => return Err(fmt_err(no, format!("expected `{MAGIC}`, found `{l}`"))),
        None => return Err(fmt_err(1, "empty file")),
    }
    let (no, vars) = header_value(lines.next(), "vars")?;
    let vars = parse_name_list(no, vars)?;
    let (no, dims) = header_value(lines.next(), "dims")?;
    let dims = parse_name_list(no, dims)?;
    let (no, shape_text) = header_value(lines.next(), "shape")?;
    let shape = shape_text
        .split_whitespace()
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| fmt_err(no, format!("bad shape entry `{t}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    if shape.len() != dims.len() {
        return Err(fmt_err(
            no,
            format!("{} shape entries for {} dims", shape.len(), dims.len()),
        ));
    }

    let mut origins = Vec::with_capacity(dims.len());
    let mut steps = Vec::with_capacity(dims.len());
    for d in &dims {
        let (no, text) = lines
            .next()
            .ok_or_else(|| fmt_err(0, format!("missing axis line for `{d}`")))?;
        let rest = text
            .strip_prefix("axis ")
            .and_then(|r| r.strip_prefix(d.as_str()))
            .and_then(|r| r.strip_prefix(':'))
            .ok_or_else(|| fmt_err(no, format!("expected `axis {d}: <origin> <step>`")))?;
        let toks: Vec<&str> = rest.split_whitespace().collect();
        if toks.len() != 2 {
            return Err(fmt_err(no, "axis line needs exactly origin and step"));
        }
        origins.push(parse_real(no, toks[0])?);
        steps.push(parse_real(no, toks[1])?);
    }
    let grid = Arc::new(Grid::new(dims, shape, origins, steps)?);
    let m = grid.len();

    let mut fields: Vec<(String, Vec<f64>)> = Vec::with_capacity(vars.len());
    for (no, line) in lines {
        if let Some(name) = line.strip_prefix("field:") {
            let name = name.trim();
            if let Some((prev, vals)) = fields.last() {
                if vals.len() != m {
                    return Err(Error::Shape(format!(
                        "field `{prev}` has {} values, expected {m}",
                        vals.len()
                    )));
                }
            }
            let expected = vars
                .get(fields.len())
                .ok_or_else(|| fmt_err(no, format!("unexpected extra field `{name}`")))?;
            if name != expected {
                return Err(fmt_err(
                    no,
                    format!("expected field `{expected}`, found `{name}`"),
                ));
            }
            fields.push((name.to_string(), Vec::with_capacity(m)));
            continue;
        }
        let (name, vals) = fields
            .last_mut()
            .ok_or_else(|| fmt_err(no, "values before any `field:` line"))?;
        for tok in line.split_whitespace() {
            let v = parse_real(no, tok)?;
            if vals.len() == m {
                return Err(Error::Shape(format!(
                    "field `{name}` has more than {m} values"
                )));
            }
            if !v.is_finite() {
                return Err(Error::Data {
                    index: vals.len(),
                    message: format!("non-finite value in field `{name}`"),
                });
            }
            vals.push(v);
        }
    }
    if fields.len() != vars.len() {
        return Err(Error::Shape(format!(
            "{} fields declared, {} present",
            vars.len(),
            fields.len()
        )));
    }
    if let Some((name, vals)) = fields.iter().find(|(_, v)| v.len() != m) {
        return Err(Error::Shape(format!(
            "field `{name}` has {} values, expected {m}",
            vals.len()
        )));
    }
    let fields = fields
        .into_iter()
        .map(|(name, values)| DataField::new(name, grid.clone(), values))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(grid, fields)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid2(nt: usize, nx: usize) -> Arc<Grid> {
        Arc::new(
            Grid::new(
                vec!["t".into(), "x".into()],
                vec![nt, nx],
                vec![0.0, 0.0],
                vec![0.1, 0.5],
            )
            .unwrap(),
        )
    }

    #[test]
    fn zero_field_file_loads() {
        let mut text = String::from("EPDE-GRID v1\nvars: u\ndims: t,x\nshape: 4 4\n");
        text.push_str("axis t: 0 1\naxis x: 0 1\nfield: u\n");
        text.push_str(&vec!["0.0"; 16].join(" "));
        let ds = parse_dataset(&text).unwrap();
        assert_eq!(ds.fields.len(), 1);
        assert!(ds.fields[0].values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn comments_and_wrapping_are_ignored() {
        let text = "# hello\nEPDE-GRID v1\n# c\nvars: a,b\ndims: t,x\nshape: 3 3\n\
                    axis t: 0 1\naxis x: 0 0.5\nfield: a\n1 2\n3 4 5\n# mid\n6 7 8 9\n\
                    field: b\n1 1 1 1 1 1 1 1 1\n";
        let ds = parse_dataset(text).unwrap();
        assert_eq!(ds.fields[0].values, (1..=9).map(f64::from).collect::<Vec<_>>());
        assert_eq!(ds.grid.steps(), &[1.0, 0.5]);
    }

    #[test]
    fn row_major_layout_on_save() {
        let g = grid2(3, 3);
        let vals: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let ds = Dataset::new(g.clone(), vec![DataField::new("u", g, vals).unwrap()]).unwrap();
        let text = dataset_to_string(&ds, &[]).unwrap();
        let body: Vec<f64> = text
            .lines()
            .skip_while(|l| !l.starts_with("field:"))
            .skip(1)
            .flat_map(|l| l.split_whitespace().map(|t| t.parse::<f64>().unwrap()))
            .collect();
        assert_eq!(body, (0..9).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn malformed_header_names_line() {
        let text = "EPDE-GRID v1\nvars: u\ndimz: t\n";
        match parse_dataset(text) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        match parse_dataset("EPDE-GRID v2\n") {
            Err(Error::Format { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn value_count_mismatch_is_shape_error() {
        let text = "EPDE-GRID v1\nvars: u\ndims: t\nshape: 3\naxis t: 0 1\nfield: u\n1 2\n";
        assert!(matches!(parse_dataset(text), Err(Error::Shape(_))));
        let text = "EPDE-GRID v1\nvars: u\ndims: t\nshape: 3\naxis t: 0 1\nfield: u\n1 2 3 4\n";
        assert!(matches!(parse_dataset(text), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_value_reports_index() {
        let text = "EPDE-GRID v1\nvars: u\ndims: t\nshape: 3\naxis t: 0 1\nfield: u\n1 NaN 3\n";
        match parse_dataset(text) {
            Err(Error::Data { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nan_refused_on_save() {
        let g = grid2(3, 3);
        let mut field = DataField::new("u", g.clone(), vec![0.0; 9]).unwrap();
        field.values[4] = f64::NAN;
        let ds = Dataset {
            grid: g,
            fields: vec![field],
        };
        assert!(matches!(
            dataset_to_string(&ds, &[]),
            Err(Error::Data { index: 4, .. })
        ));
    }

    #[test]
    fn grid_rejects_short_axes() {
        assert!(Grid::new(vec!["t".into()], vec![2], vec![0.0], vec![1.0]).is_err());
        assert!(Grid::new(vec!["t".into()], vec![3], vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn flat_index_round_trip() {
        let g = Grid::new(
            vec!["t".into(), "x".into(), "y".into()],
            vec![3, 4, 5],
            vec![0.0; 3],
            vec![1.0; 3],
        )
        .unwrap();
        assert_eq!(g.strides(), vec![20, 5, 1]);
        for f in 0..g.len() {
            assert_eq!(g.flat_index(&g.unravel(f)), f);
        }
        assert_eq!(g.flat_index(&[2, 3, 4]), 59);
    }

    #[test]
    fn l2_norm_examples() {
        assert_eq!(field_l2_norm(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(field_l2_norm(&[3.0, 4.0]).unwrap(), 5.0);
        assert!(field_l2_norm(&[]).is_err());
    }
}
