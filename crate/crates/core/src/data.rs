//! Federated problem construction: the non-i.i.d. synthetic regression
//! generator, random partitioning of pooled datasets, and file loaders.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::loss::{ClientDataset, LossModel};
use crate::seed::rng_from_seed;

/// Parameters of the synthetic linear-regression generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub m: usize,
    pub n: usize,
    /// Inclusive range of per-client sample counts.
    pub d_min: usize,
    pub d_max: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { m: 128, n: 100, d_min: 50, d_max: 150, seed: 0 }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::invalid("m and n must be positive"));
        }
        if self.d_min == 0 || self.d_min > self.d_max {
            return Err(Error::invalid(format!("invalid sample range [{}, {}]", self.d_min, self.d_max)));
        }
        Ok(())
    }
}

/// `m` client datasets sharing one feature dimension, plus the loss they use.
#[derive(Debug, Clone)]
pub struct FederatedProblem {
    clients: Vec<ClientDataset>,
    loss: LossModel,
    n: usize,
}

impl FederatedProblem {
    pub fn new(clients: Vec<ClientDataset>, loss: LossModel) -> Result<Self> {
        let first = clients.first().ok_or_else(|| Error::invalid("problem needs at least one client"))?;
        let n = first.dim();
        for c in &clients {
            if c.dim() != n {
                return Err(Error::DimensionMismatch { expected: n, got: c.dim() });
            }
            loss.bind(c)?;
        }
        Ok(Self { clients, loss, n })
    }

    pub fn clients(&self) -> &[ClientDataset] {
        &self.clients
    }

    pub fn loss(&self) -> &LossModel {
        &self.loss
    }

    /// The same clients under a different loss model.
    pub fn with_loss(&self, loss: LossModel) -> Result<Self> {
        Self::new(self.clients.clone(), loss)
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Total sample count `d = Σ d_i`.
    pub fn total_samples(&self) -> usize {
        self.clients.iter().map(ClientDataset::num_samples).sum()
    }

    /// `f(x) = (1/m) Σ f_i(x)`.
    pub fn objective(&self, x: &DVector<f64>) -> Result<f64> {
        let mut total = 0.0;
        for c in &self.clients {
            total += self.loss.value(c, x)?;
        }
        Ok(total / self.clients.len() as f64)
    }

    /// `∇f(x) = (1/m) Σ ∇f_i(x)`.
    pub fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut g = DVector::zeros(self.n);
        for c in &self.clients {
            g += self.loss.gradient(c, x)?;
        }
        Ok(g / self.clients.len() as f64)
    }
}

/// Draws a Student-t variate with `dof` degrees of freedom as `Z / sqrt(χ²/dof)`,
/// with the chi-square built from squared standard normals.
fn student_t<R: Rng + ?Sized>(rng: &mut R, dof: usize) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    let chi2: f64 = (0..dof)
        .map(|_| {
            let g: f64 = StandardNormal.sample(rng);
            g * g
        })
        .sum();
    z / (chi2 / dof as f64).sqrt()
}

/// Generates the non-i.i.d. linear-regression benchmark: per-client sizes are
/// drawn from `d_min..=d_max`, the pooled samples come in thirds from a
/// standard normal, a Student-t(5) and a uniform[-5, 5] distribution (each
/// sample's features and label drawn jointly from one of them), then are
/// shuffled and split contiguously across the clients.
pub fn generate_linear_noniid(spec: &SyntheticSpec) -> Result<FederatedProblem> {
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let sizes: Vec<usize> = (0..spec.m).map(|_| rng.random_range(spec.d_min..=spec.d_max)).collect();
    let d: usize = sizes.iter().sum();
    let width = spec.n + 1;

    let third = d.div_ceil(3);
    let n_normal = third.min(d);
    let n_student = third.min(d - n_normal);
    let mut pool = Vec::with_capacity(d * width);
    for s in 0..d {
        for _ in 0..width {
            let v = if s < n_normal {
                StandardNormal.sample(&mut rng)
            } else if s < n_normal + n_student {
                student_t(&mut rng, 5)
            } else {
                rng.random_range(-5.0..5.0)
            };
            pool.push(v);
        }
    }

    let mut order: Vec<usize> = (0..d).collect();
    order.shuffle(&mut rng);

    let mut clients = Vec::with_capacity(spec.m);
    let mut cursor = 0;
    for &di in &sizes {
        let rows = &order[cursor..cursor + di];
        cursor += di;
        let features = DMatrix::from_fn(di, spec.n, |r, c| pool[rows[r] * width + c]);
        let labels = DVector::from_fn(di, |r, _| pool[rows[r] * width + spec.n]);
        clients.push(ClientDataset::new(features, labels)?);
    }
    FederatedProblem::new(clients, LossModel::least_squares())
}

/// Randomly permutes the rows and splits them into `m` contiguous groups
/// whose sizes differ by at most one (larger groups first).
pub fn partition_dataset(
    features: &DMatrix<f64>,
    labels: &DVector<f64>,
    m: usize,
    seed: u64,
    loss: LossModel,
) -> Result<FederatedProblem> {
    let d = features.nrows();
    if labels.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: labels.len() });
    }
    if m == 0 || d < m {
        return Err(Error::invalid(format!("cannot split {d} samples into {m} clients")));
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.shuffle(&mut rng_from_seed(seed));

    let (base, extra) = (d / m, d % m);
    let mut clients = Vec::with_capacity(m);
    let mut cursor = 0;
    for i in 0..m {
        let size = base + usize::from(i < extra);
        let rows = &order[cursor..cursor + size];
        cursor += size;
        let f = DMatrix::from_fn(size, features.ncols(), |r, c| features[(rows[r], c)]);
        let l = DVector::from_fn(size, |r, _| labels[rows[r]]);
        clients.push(ClientDataset::new(f, l)?);
    }
    FederatedProblem::new(clients, loss)
}

/// Maps `{−1, +1}` labels onto `{0, 1}` for logistic losses. Any other label
/// value is rejected.
pub fn bind_logistic_labels(labels: &mut DVector<f64>) -> Result<()> {
    if let Some(index) = labels.iter().position(|&b| b != 0.0 && b != 1.0 && b != -1.0) {
        return Err(Error::InvalidLabel { index, label: labels[index] });
    }
    let remapped = labels.iter().filter(|&&b| b == -1.0).count();
    if remapped > 0 {
        log::info!("remapped {remapped} labels from -1 to 0");
        labels.apply(|b| {
            if *b == -1.0 {
                *b = 0.0
            }
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Csv,
    Libsvm,
}

impl DataFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "csv" => Some(DataFormat::Csv),
            "libsvm" | "svm" => Some(DataFormat::Libsvm),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    pub format: DataFormat,
    /// CSV only: skip the first line.
    pub skip_header: bool,
    /// LIBSVM only: feature count; inferred from the largest index when `None`.
    pub n_features: Option<usize>,
}

impl LoadOptions {
    pub fn new(format: DataFormat) -> Self {
        Self { format, skip_header: false, n_features: None }
    }
}

/// Loads a dense feature matrix and label vector from a CSV or LIBSVM file.
pub fn load_dataset(path: &Path, opts: &LoadOptions) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let text = fs::read_to_string(path)?;
    match opts.format {
        DataFormat::Csv => parse_csv(path, &text, opts.skip_header),
        DataFormat::Libsvm => parse_libsvm(path, &text, opts.n_features),
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, message: message.into() }
}

fn parse_csv(path: &Path, text: &str, skip_header: bool) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let mut width = None;
    let mut values = Vec::new();
    let mut rows = 0;
    for (idx, line) in text.lines().enumerate().skip(usize::from(skip_header)) {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let mut count = 0;
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("cannot parse `{}` as a number", field.trim())))?;
            values.push(v);
            count += 1;
        }
        match width {
            None if count < 2 => return Err(parse_err(path, lineno, "need at least one feature and a label")),
            None => width = Some(count),
            Some(w) if w != count => {
                return Err(parse_err(path, lineno, format!("expected {w} columns, found {count}")))
            }
            _ => {}
        }
        rows += 1;
    }
    let width = width.ok_or_else(|| parse_err(path, 0, "no data rows"))?;
    let n = width - 1;
    let features = DMatrix::from_fn(rows, n, |r, c| values[r * width + c]);
    let labels = DVector::from_fn(rows, |r, _| values[r * width + n]);
    Ok((features, labels))
}

fn parse_libsvm(path: &Path, text: &str, n_features: Option<usize>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let mut labels = Vec::new();
    let mut entries: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut max_index = 0;
    for (idx, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let mut tokens = line.split_whitespace();
        let label_tok = tokens.next().unwrap_or_default();
        let label: f64 =
            label_tok.parse().map_err(|_| parse_err(path, lineno, format!("cannot parse label `{label_tok}`")))?;
        let mut row = Vec::new();
        for tok in tokens {
            let (i, v) = tok
                .split_once(':')
                .ok_or_else(|| parse_err(path, lineno, format!("expected index:value, found `{tok}`")))?;
            let i: usize = i.parse().map_err(|_| parse_err(path, lineno, format!("bad feature index `{i}`")))?;
            if i == 0 {
                return Err(parse_err(path, lineno, "feature indices are 1-based"));
            }
            let v: f64 = v.parse().map_err(|_| parse_err(path, lineno, format!("bad feature value `{v}`")))?;
            if let Some(n) = n_features {
                if i > n {
                    return Err(parse_err(path, lineno, format!("index {i} exceeds feature count {n}")));
                }
            }
            max_index = max_index.max(i);
            row.push((i - 1, v));
        }
        labels.push(label);
        entries.push(row);
    }
    if labels.is_empty() {
        return Err(parse_err(path, 0, "no data rows"));
    }
    let n = n_features.unwrap_or(max_index).max(1);
    let mut features = DMatrix::zeros(labels.len(), n);
    for (r, row) in entries.iter().enumerate() {
        for &(c, v) in row {
            features[(r, c)] = v;
        }
    }
    Ok((features, DVector::from_vec(labels)))
}

/// Name of the index file written next to per-client CSV files.
pub const MANIFEST_FILE: &str = "manifest.csv";

fn client_file_name(i: usize) -> String {
    format!("client_{i:04}.csv")
}

/// Writes one headerless CSV per client (features then label) and a
/// `manifest.csv` listing `client,file,samples,features`.
pub fn write_client_dir(problem: &FederatedProblem, dir: &Path) -> Result<()> {
    use std::io::Write;
    fs::create_dir_all(dir)?;
    let mut manifest = String::from("client,file,samples,features\n");
    for (i, c) in problem.clients().iter().enumerate() {
        let name = client_file_name(i);
        let mut w = std::io::BufWriter::new(fs::File::create(dir.join(&name))?);
        let a = c.features();
        for r in 0..a.nrows() {
            for v in a.row(r).iter() {
                write!(w, "{v},")?;
            }
            writeln!(w, "{}", c.labels()[r])?;
        }
        w.flush()?;
        manifest.push_str(&format!("{i},{name},{},{}\n", a.nrows(), a.ncols()));
    }
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

/// Reads a directory produced by [`write_client_dir`].
pub fn load_client_dir(dir: &Path, loss: LossModel) -> Result<FederatedProblem> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path)?;
    let mut clients = Vec::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let file = line
            .split(',')
            .nth(1)
            .ok_or_else(|| parse_err(&manifest_path, idx + 1, "expected client,file,samples,features"))?;
        let (features, mut labels) = load_dataset(&dir.join(file.trim()), &LoadOptions::new(DataFormat::Csv))?;
        if loss.kind.is_logistic() {
            bind_logistic_labels(&mut labels)?;
        }
        clients.push(ClientDataset::new(features, labels)?);
    }
    FederatedProblem::new(clients, loss)
}
