//! Dataset CSV files.
//!
//! Header: `x0..x{n-1}` for vector features or `x{r}_{c}` for matrix
//! features, then `y` or `y0..y{p-1}`.

use std::collections::BTreeMap;
use std::path::Path;

use dlfm_core::Dataset;
use sha2::{Digest, Sha256};

use crate::CliError;

enum Column {
    Feature(usize, usize),
    Obs(usize),
}

fn parse_index(s: &str) -> Option<usize> {
    if s.is_empty() || (s.len() > 1 && s.starts_with('0')) {
        return None;
    }
    s.parse().ok()
}

fn classify(name: &str) -> Option<Column> {
    if name == "y" {
        return Some(Column::Obs(0));
    }
    if let Some(rest) = name.strip_prefix('y') {
        return parse_index(rest).map(Column::Obs);
    }
    let rest = name.strip_prefix('x')?;
    match rest.split_once('_') {
        Some((r, c)) => Some(Column::Feature(parse_index(r)?, parse_index(c)?)),
        None => parse_index(rest).map(|c| Column::Feature(usize::MAX, c)),
    }
}

/// Column positions for every feature entry and observation slot.
struct Layout {
    rows: usize,
    n: usize,
    features: Vec<usize>,
    obs: Vec<usize>,
}

fn layout(header: &csv::StringRecord) -> Result<Layout, CliError> {
    let mut vector = BTreeMap::new();
    let mut matrix = BTreeMap::new();
    let mut obs = BTreeMap::new();
    let mut bare_y = false;
    for (pos, name) in header.iter().enumerate() {
        let name = name.trim();
        let slot = match classify(name) {
            Some(Column::Feature(usize::MAX, c)) => vector.insert(c, pos),
            Some(Column::Feature(r, c)) => matrix.insert((r, c), pos),
            Some(Column::Obs(j)) => {
                bare_y |= name == "y";
                obs.insert(j, pos)
            }
            None => return Err(CliError::Input(format!("data: unexpected column `{name}`"))),
        };
        if slot.is_some() {
            return Err(CliError::Input(format!("data: duplicate column `{name}`")));
        }
    }
    if bare_y && obs.len() > 1 {
        return Err(CliError::Input("data: mix of `y` and indexed `y` columns".into()));
    }
    if !vector.is_empty() && !matrix.is_empty() {
        return Err(CliError::Input("data: mix of vector and matrix feature columns".into()));
    }
    let (rows, n, features) = if !matrix.is_empty() {
        let rows = matrix.keys().map(|k| k.0).max().unwrap() + 1;
        let n = matrix.keys().map(|k| k.1).max().unwrap() + 1;
        let mut positions = Vec::with_capacity(rows * n);
        for r in 0..rows {
            for c in 0..n {
                let pos = matrix.get(&(r, c)).ok_or_else(|| CliError::Input(format!("data: missing column `x{r}_{c}`")))?;
                positions.push(*pos);
            }
        }
        (rows, n, positions)
    } else {
        let n = vector.keys().max().map_or(0, |c| c + 1);
        if n == 0 {
            return Err(CliError::Input("data: no feature columns".into()));
        }
        let positions = (0..n)
            .map(|c| vector.get(&c).copied().ok_or_else(|| CliError::Input(format!("data: missing column `x{c}`"))))
            .collect::<Result<_, _>>()?;
        (1, n, positions)
    };
    let p = obs.keys().max().map_or(0, |j| j + 1);
    if p == 0 {
        return Err(CliError::Input("data: no observation column `y`".into()));
    }
    let obs = (0..p)
        .map(|j| obs.get(&j).copied().ok_or_else(|| CliError::Input(format!("data: missing column `y{j}`"))))
        .collect::<Result<_, _>>()?;
    Ok(Layout { rows, n, features, obs })
}

/// Parse a dataset; returns it with the SHA-256 of the file contents.
pub fn read_dataset(path: &Path, ordered: bool) -> Result<(Dataset, String), CliError> {
    let bytes =
        std::fs::read(path).map_err(|e| CliError::Input(format!("data: cannot read {}: {e}", path.display())))?;
    let fingerprint = format!("sha256:{}", hex(&Sha256::digest(&bytes)));
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes.as_slice());
    let header = reader.headers().map_err(|e| CliError::Input(format!("data: {e}")))?.clone();
    let lay = layout(&header)?;
    let mut features = Vec::new();
    let mut obs = Vec::new();
    let mut m = 0;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Input(format!("data: {e}")))?;
        let value = |pos: usize| -> Result<f64, CliError> {
            let raw = record.get(pos).unwrap_or("").trim();
            raw.parse::<f64>().map_err(|_| {
                CliError::Input(format!("data: row {}, column `{}`: `{raw}` is not a number", line + 1, &header[pos]))
            })
        };
        for &pos in &lay.features {
            features.push(value(pos)?);
        }
        for &pos in &lay.obs {
            obs.push(value(pos)?);
        }
        m += 1;
    }
    let data = Dataset::new(m, lay.rows, lay.n, features, lay.obs.len(), obs)
        .map_err(|e| CliError::Input(format!("data: {e}")))?
        .ordered(ordered);
    Ok((data, fingerprint))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, CliError> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

pub fn write_table(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    let io = |e: csv::Error| CliError::Input(format!("cannot write {}: {e}", path.display()));
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

pub fn dataset_header(data: &Dataset) -> Vec<String> {
    let mut header = Vec::new();
    if data.rows() == 1 {
        header.extend((0..data.n()).map(|c| format!("x{c}")));
    } else {
        for r in 0..data.rows() {
            header.extend((0..data.n()).map(|c| format!("x{r}_{c}")));
        }
    }
    if data.obs_width() == 1 {
        header.push("y".into());
    } else {
        header.extend((0..data.obs_width()).map(|j| format!("y{j}")));
    }
    header
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<(), CliError> {
    let rows: Vec<Vec<f64>> =
        (0..data.m()).map(|i| data.feature(i).iter().chain(data.observation(i)).copied().collect()).collect();
    write_table(path, &dataset_header(data), &rows)
}
