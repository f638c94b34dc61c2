//! File formats: long-format curve CSVs with a shared time grid, the small
//! per-dimension tables (responses, conditions, groups), the JSON fit
//! artifact, and the comparison table.
//!
//! All numbers are written with Rust's shortest round-trip float formatting,
//! so identical runs produce byte-identical files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use repfun::basis::BasisSystem;
use repfun::dataset::FunctionalDataset;
use repfun::estimators::{CvRow, FitResult, Method};
use repfun::geometry::{ConditionGrouping, ConditionSet};
use repfun::simulate::ComparisonTable;

use crate::CliError;

pub type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

pub fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", parent.display())))?;
    }
    fs::write(path, content)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

/// Splits a CSV line; the formats here never quote fields.
fn fields(line: &str) -> Vec<&str> {
    line.split(',').map(str::trim).collect()
}

fn parse_num<T: std::str::FromStr>(
    path: &Path,
    lineno: usize,
    column: &str,
    raw: &str,
) -> Result<T> {
    raw.parse().map_err(|_| {
        usage(format!(
            "{} line {lineno}: invalid {column} value '{raw}'",
            path.display()
        ))
    })
}

/// Non-empty data lines with their 1-based line numbers, after validating the
/// header.
fn data_lines<'a>(path: &Path, content: &'a str, header: &str) -> Result<Vec<(usize, &'a str)>> {
    let mut lines = content.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first.trim() == header => {}
        Some((_, first)) => {
            return Err(usage(format!(
                "{}: expected header '{header}', found '{}'",
                path.display(),
                first.trim()
            )))
        }
        None => return Err(usage(format!("{}: file is empty", path.display()))),
    }
    Ok(lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l))
        .collect())
}

/// Curves in long format plus the ids that give rows/columns their meaning.
pub struct CurveData {
    pub subjects: Vec<u64>,
    pub dims: Vec<u64>,
    pub grid: Vec<f64>,
    /// One matrix per subject, time on rows and dimensions on columns,
    /// ordered like `subjects` / `dims`.
    pub samples: Vec<DMatrix<f64>>,
}

impl CurveData {
    /// Projects every subject's curves onto `basis`.
    pub fn to_coefficients(&self, basis: &BasisSystem<f64>) -> Result<Vec<DMatrix<f64>>> {
        self.samples
            .iter()
            .map(|s| Ok(basis.project(&self.grid, s)?.transpose()))
            .collect()
    }
}

/// Reads `subject_id,dim_id,t,value` rows. Every (subject, dimension) series
/// must run over the same time grid, and every subject must carry every
/// dimension.
pub fn read_curves(path: &Path) -> Result<CurveData> {
    let content = read_to_string(path)?;
    let lines = data_lines(path, &content, "subject_id,dim_id,t,value")?;
    let mut series: BTreeMap<u64, BTreeMap<u64, Vec<(f64, f64)>>> = BTreeMap::new();
    for (lineno, line) in lines {
        let f = fields(line);
        if f.len() != 4 {
            return Err(usage(format!(
                "{} line {lineno}: expected 4 fields, found {}",
                path.display(),
                f.len()
            )));
        }
        let subject: u64 = parse_num(path, lineno, "subject_id", f[0])?;
        let dim: u64 = parse_num(path, lineno, "dim_id", f[1])?;
        let t: f64 = parse_num(path, lineno, "t", f[2])?;
        let value: f64 = parse_num(path, lineno, "value", f[3])?;
        if !t.is_finite() || !value.is_finite() {
            return Err(usage(format!(
                "{} line {lineno}: non-finite sample",
                path.display()
            )));
        }
        series.entry(subject).or_default().entry(dim).or_default().push((t, value));
    }
    if series.is_empty() {
        return Err(usage(format!("{}: no curve samples", path.display())));
    }

    let subjects: Vec<u64> = series.keys().copied().collect();
    let dims: Vec<u64> = series.values().next().unwrap().keys().copied().collect();
    let mut grid: Option<Vec<f64>> = None;
    let mut samples = Vec::with_capacity(subjects.len());
    for (&subject, dim_map) in &series {
        let these: Vec<u64> = dim_map.keys().copied().collect();
        if these != dims {
            return Err(usage(format!(
                "{}: subject {subject} has dimensions {these:?}, expected {dims:?}",
                path.display()
            )));
        }
        let mut mat = DMatrix::zeros(dim_map.values().next().unwrap().len(), dims.len());
        for (d, points) in dim_map.values().enumerate() {
            let mut points = points.clone();
            points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let times: Vec<f64> = points.iter().map(|p| p.0).collect();
            match &grid {
                None => grid = Some(times),
                Some(g) => {
                    if g != &times {
                        return Err(usage(format!(
                            "{}: subject {subject}, dimension {} sampled on a different time grid",
                            path.display(),
                            dims[d]
                        )));
                    }
                }
            }
            if points.len() != mat.nrows() {
                return Err(usage(format!(
                    "{}: subject {subject} has ragged series",
                    path.display()
                )));
            }
            for (g, &(_, v)) in points.iter().enumerate() {
                mat[(g, d)] = v;
            }
        }
        samples.push(mat);
    }
    Ok(CurveData { subjects, dims, grid: grid.unwrap(), samples })
}

/// Reads `subject_id,y` and aligns the values to `subjects`.
pub fn read_responses(path: &Path, subjects: &[u64]) -> Result<DVector<f64>> {
    let content = read_to_string(path)?;
    let lines = data_lines(path, &content, "subject_id,y")?;
    let mut map: BTreeMap<u64, f64> = BTreeMap::new();
    for (lineno, line) in lines {
        let f = fields(line);
        if f.len() != 2 {
            return Err(usage(format!(
                "{} line {lineno}: expected 2 fields, found {}",
                path.display(),
                f.len()
            )));
        }
        let subject: u64 = parse_num(path, lineno, "subject_id", f[0])?;
        let y: f64 = parse_num(path, lineno, "y", f[1])?;
        if map.insert(subject, y).is_some() {
            return Err(usage(format!(
                "{} line {lineno}: duplicate subject {subject}",
                path.display()
            )));
        }
    }
    subjects
        .iter()
        .map(|s| {
            map.get(s).copied().ok_or_else(|| {
                usage(format!("{}: no response for subject {s}", path.display()))
            })
        })
        .collect::<Result<Vec<f64>>>()
        .map(DVector::from_vec)
}

/// Reads `dim_id,coord_1,...,coord_d`; the header fixes d.
pub fn read_conditions(path: &Path, dims: &[u64]) -> Result<ConditionSet<f64>> {
    let content = read_to_string(path)?;
    let header = content
        .lines()
        .next()
        .map(str::trim)
        .ok_or_else(|| usage(format!("{}: file is empty", path.display())))?;
    let cols = fields(header);
    let d = cols.len().saturating_sub(1);
    if cols.first() != Some(&"dim_id")
        || d == 0
        || !(1..=d).all(|i| cols[i] == format!("coord_{i}"))
    {
        return Err(usage(format!(
            "{}: expected header 'dim_id,coord_1,...', found '{header}'",
            path.display()
        )));
    }
    let lines = data_lines(path, &content, header)?;
    let mut map: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for (lineno, line) in lines {
        let f = fields(line);
        if f.len() != d + 1 {
            return Err(usage(format!(
                "{} line {lineno}: expected {} fields, found {}",
                path.display(),
                d + 1,
                f.len()
            )));
        }
        let dim: u64 = parse_num(path, lineno, "dim_id", f[0])?;
        let coords = (1..=d)
            .map(|i| parse_num(path, lineno, &format!("coord_{i}"), f[i]))
            .collect::<Result<Vec<f64>>>()?;
        map.insert(dim, coords);
    }
    let rows = dims
        .iter()
        .map(|id| {
            map.get(id)
                .ok_or_else(|| usage(format!("{}: no coordinates for dimension {id}", path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    let coords = DMatrix::from_fn(dims.len(), d, |r, c| rows[r][c]);
    Ok(ConditionSet::new(coords)?)
}

/// Reads `dim_id,group_id`; group ids must cover 0..K-1.
pub fn read_groups(path: &Path, dims: &[u64]) -> Result<ConditionGrouping> {
    let content = read_to_string(path)?;
    let lines = data_lines(path, &content, "dim_id,group_id")?;
    let mut map: BTreeMap<u64, usize> = BTreeMap::new();
    for (lineno, line) in lines {
        let f = fields(line);
        if f.len() != 2 {
            return Err(usage(format!(
                "{} line {lineno}: expected 2 fields, found {}",
                path.display(),
                f.len()
            )));
        }
        let dim: u64 = parse_num(path, lineno, "dim_id", f[0])?;
        let gid: usize = parse_num(path, lineno, "group_id", f[1])?;
        map.insert(dim, gid);
    }
    let labels = dims
        .iter()
        .map(|id| {
            map.get(id)
                .copied()
                .ok_or_else(|| usage(format!("{}: no group for dimension {id}", path.display())))
        })
        .collect::<Result<Vec<usize>>>()?;
    let present: BTreeSet<usize> = labels.iter().copied().collect();
    let k = present.len();
    if present.iter().next_back() != Some(&(k - 1)) {
        return Err(usage(format!(
            "{}: group ids must cover 0..{} with no gaps",
            path.display(),
            k - 1
        )));
    }
    Ok(ConditionGrouping::from_labels(&labels)?)
}

// ---------------------------------------------------------------------------
// Writers

/// Writes curves by evaluating basis coefficients on `grid`, in
/// subject-major, dimension-major, time-major order.
pub fn write_curves(
    path: &Path,
    subjects: &[u64],
    dims: &[u64],
    grid: &[f64],
    coeffs: &[DMatrix<f64>],
    basis: &BasisSystem<f64>,
) -> Result<()> {
    let phi = basis.eval_matrix(grid)?;
    let mut out = String::from("subject_id,dim_id,t,value\n");
    for (i, &subject) in subjects.iter().enumerate() {
        let values = &phi * coeffs[i].transpose();
        for (d, &dim) in dims.iter().enumerate() {
            for (g, &t) in grid.iter().enumerate() {
                writeln!(out, "{subject},{dim},{t},{}", values[(g, d)]).unwrap();
            }
        }
    }
    write_file(path, &out)
}

pub fn write_responses(path: &Path, subjects: &[u64], y: &DVector<f64>) -> Result<()> {
    let mut out = String::from("subject_id,y\n");
    for (i, &subject) in subjects.iter().enumerate() {
        writeln!(out, "{subject},{}", y[i]).unwrap();
    }
    write_file(path, &out)
}

pub fn write_conditions(path: &Path, dims: &[u64], set: &ConditionSet<f64>) -> Result<()> {
    let d = set.dim();
    let mut out = String::from("dim_id");
    for i in 1..=d {
        write!(out, ",coord_{i}").unwrap();
    }
    out.push('\n');
    for (r, &dim) in dims.iter().enumerate() {
        write!(out, "{dim}").unwrap();
        for c in 0..d {
            write!(out, ",{}", set.coords()[(r, c)]).unwrap();
        }
        out.push('\n');
    }
    write_file(path, &out)
}

pub fn write_groups(path: &Path, dims: &[u64], grouping: &ConditionGrouping) -> Result<()> {
    let mut out = String::from("dim_id,group_id\n");
    for (r, &dim) in dims.iter().enumerate() {
        writeln!(out, "{dim},{}", grouping.labels()[r]).unwrap();
    }
    write_file(path, &out)
}

/// Coefficient matrix as `dim_id,basis_index,value` rows.
pub fn write_beta(path: &Path, dims: &[u64], beta: &DMatrix<f64>) -> Result<()> {
    let mut out = String::from("dim_id,basis_index,value\n");
    for (r, &dim) in dims.iter().enumerate() {
        for c in 0..beta.ncols() {
            writeln!(out, "{dim},{c},{}", beta[(r, c)]).unwrap();
        }
    }
    write_file(path, &out)
}

pub fn write_comparison(path: &Path, table: &ComparisonTable<f64>) -> Result<()> {
    let mut out = String::from("method,MSE_mean,MSE_sd,Sens,Spec\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for row in &table.rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            row.method,
            row.mse_mean,
            row.mse_sd,
            opt(row.sens_mean),
            opt(row.spec_mean)
        )
        .unwrap();
    }
    write_file(path, &out)
}

pub fn write_pairs(path: &Path, dims: &[u64], pairs: &[(usize, usize)]) -> Result<()> {
    let mut out = String::from("j,j_prime\n");
    for &(a, b) in pairs {
        writeln!(out, "{},{}", dims[a], dims[b]).unwrap();
    }
    write_file(path, &out)
}

pub fn write_cv_table(path: &Path, rows: &[CvRow<f64>]) -> Result<()> {
    let mut out = String::from("lambda,alpha,n_components,score\n");
    for row in rows {
        writeln!(
            out,
            "{},{},{},{}",
            row.lambda.map(|v| v.to_string()).unwrap_or_default(),
            row.alpha.map(|v| v.to_string()).unwrap_or_default(),
            row.n_components.map(|v| v.to_string()).unwrap_or_default(),
            row.score
        )
        .unwrap();
    }
    write_file(path, &out)
}

// ---------------------------------------------------------------------------
// Fit artifact

#[derive(Serialize, Deserialize)]
pub struct BasisInfo {
    pub order: usize,
    pub size: usize,
    pub domain: [f64; 2],
}

#[derive(Serialize, Deserialize)]
pub struct CodingInfo {
    pub positive: f64,
    pub negative: f64,
    pub threshold: f64,
}

#[derive(Serialize, Deserialize)]
pub struct CvRowInfo {
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    pub n_components: Option<usize>,
    pub score: f64,
}

/// Everything a fit produced, enough to predict and export later.
#[derive(Serialize, Deserialize)]
pub struct FitArtifact {
    pub format_version: u32,
    pub method: String,
    pub task: String,
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    pub n_components: Option<usize>,
    pub intercept: f64,
    pub basis: BasisInfo,
    pub dim_ids: Vec<u64>,
    /// Row-major coefficient rows, one per dimension.
    pub coefficients: Vec<Vec<f64>>,
    pub fused_pairs: Vec<[usize; 2]>,
    pub fused_groups: Vec<usize>,
    pub zero_dims: Vec<usize>,
    pub coding: Option<CodingInfo>,
    pub cv_table: Option<Vec<CvRowInfo>>,
}

pub const FORMAT_VERSION: u32 = 1;

impl FitArtifact {
    pub fn from_fit(
        fit: &FitResult<f64>,
        task: &str,
        basis: &BasisSystem<f64>,
        dim_ids: &[u64],
    ) -> Self {
        FitArtifact {
            format_version: FORMAT_VERSION,
            method: fit.method.to_string(),
            task: task.to_string(),
            lambda: fit.lambda,
            alpha: fit.alpha,
            n_components: fit.n_components,
            intercept: fit.intercept,
            basis: BasisInfo {
                order: basis.order(),
                size: basis.size(),
                domain: [basis.domain().0, basis.domain().1],
            },
            dim_ids: dim_ids.to_vec(),
            coefficients: (0..fit.beta.nrows())
                .map(|r| fit.beta.row(r).iter().copied().collect())
                .collect(),
            fused_pairs: fit.equality.fused_pairs.iter().map(|&(a, b)| [a, b]).collect(),
            fused_groups: fit.equality.fused_groups.clone(),
            zero_dims: fit.equality.zero_dims.clone(),
            coding: fit.coding.as_ref().map(|c| CodingInfo {
                positive: c.positive,
                negative: c.negative,
                threshold: c.threshold,
            }),
            cv_table: fit.cv_table.as_ref().map(|rows| {
                rows.iter()
                    .map(|r| CvRowInfo {
                        lambda: r.lambda,
                        alpha: r.alpha,
                        n_components: r.n_components,
                        score: r.score,
                    })
                    .collect()
            }),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Runtime(format!("cannot serialize fit: {e}")))?;
        write_file(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = read_to_string(path)?;
        let artifact: FitArtifact = serde_json::from_str(&content)
            .map_err(|e| usage(format!("{}: invalid fit file: {e}", path.display())))?;
        if artifact.format_version != FORMAT_VERSION {
            return Err(usage(format!(
                "{}: format version {} unsupported (expected {FORMAT_VERSION})",
                path.display(),
                artifact.format_version
            )));
        }
        if artifact.coefficients.len() != artifact.dim_ids.len()
            || artifact.coefficients.iter().any(|r| r.len() != artifact.basis.size)
        {
            return Err(usage(format!(
                "{}: coefficient shape does not match dim_ids/basis",
                path.display()
            )));
        }
        Ok(artifact)
    }

    pub fn to_basis(&self) -> Result<BasisSystem<f64>> {
        Ok(BasisSystem::bspline(
            self.basis.order,
            self.basis.size,
            (self.basis.domain[0], self.basis.domain[1]),
        )?)
    }

    pub fn beta(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.coefficients.len(), self.basis.size, |r, c| {
            self.coefficients[r][c]
        })
    }

    /// Raw prediction scores for projected curve coefficients.
    pub fn predict(
        &self,
        basis: &BasisSystem<f64>,
        data: &FunctionalDataset<f64>,
    ) -> Result<DVector<f64>> {
        if data.p() != self.dim_ids.len() || data.basis_size() != self.basis.size {
            return Err(usage(format!(
                "fit covers {} dimensions x {} basis functions, data has {} x {}",
                self.dim_ids.len(),
                self.basis.size,
                data.p(),
                data.basis_size()
            )));
        }
        let weighted = self.beta() * basis.gram();
        Ok(DVector::from_iterator(
            data.n(),
            data.coeffs().iter().map(|a| self.intercept + a.dot(&weighted)),
        ))
    }
}

/// `dim_id,t,beta_value` rows on `grid_size` equidistant points (the domain
/// midpoint when `grid_size` is 1).
pub fn write_exported_curves(path: &Path, artifact: &FitArtifact, grid_size: usize) -> Result<()> {
    if grid_size == 0 {
        return Err(usage("grid size must be at least 1"));
    }
    let basis = artifact.to_basis()?;
    let (lo, hi) = (artifact.basis.domain[0], artifact.basis.domain[1]);
    let grid: Vec<f64> = if grid_size == 1 {
        vec![(lo + hi) / 2.0]
    } else {
        (0..grid_size)
            .map(|g| lo + (hi - lo) * g as f64 / (grid_size - 1) as f64)
            .collect()
    };
    let phi = basis.eval_matrix(&grid)?;
    let values = phi * artifact.beta().transpose();
    let mut out = String::from("dim_id,t,beta_value\n");
    for (d, &dim) in artifact.dim_ids.iter().enumerate() {
        for (g, &t) in grid.iter().enumerate() {
            writeln!(out, "{dim},{t},{}", values[(g, d)]).unwrap();
        }
    }
    write_file(path, &out)
}

/// Method-agnostic metrics blob for evaluate runs.
#[derive(Serialize)]
pub struct MetricsOut {
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub errors: Option<usize>,
}

pub fn parse_method(s: &str) -> Result<Method> {
    s.parse::<Method>().map_err(|e| usage(e.to_string()))
}
