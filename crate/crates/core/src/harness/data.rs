use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use super::config::{LikelihoodName, ModelConfig};
use super::{HarnessError, HarnessResult};

/// A categorical column mapped to dense indices in first-appearance order.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupColumn {
    pub index: Vec<usize>,
    pub levels: Vec<String>,
}

impl GroupColumn {
    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Self {
        let mut seen = HashMap::new();
        let mut levels = Vec::new();
        let index = labels
            .iter()
            .map(|l| {
                *seen.entry(l.as_ref().to_string()).or_insert_with(|| {
                    levels.push(l.as_ref().to_string());
                    levels.len() - 1
                })
            })
            .collect();
        GroupColumn { index, levels }
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }
}

/// The columns a model reads, in row order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub response_name: String,
    pub response: Vec<f64>,
    pub numeric: BTreeMap<String, Vec<f64>>,
    pub groups: BTreeMap<String, GroupColumn>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.response.len()
    }

    pub fn column(&self, name: &str) -> HarnessResult<&[f64]> {
        self.numeric
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| HarnessError::Data(format!("no numeric column {name}")))
    }

    pub fn group(&self, name: &str) -> HarnessResult<&GroupColumn> {
        self.groups
            .get(name)
            .ok_or_else(|| HarnessError::Data(format!("no group column {name}")))
    }
}

pub fn load_csv(path: &Path, config: &ModelConfig) -> HarnessResult<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
    read_csv(file, config)
}

/// Reads the response, numeric and group columns named by `config`. Rows
/// are numbered from 1, not counting the header.
pub fn read_csv<R: Read>(reader: R, config: &ModelConfig) -> HarnessResult<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| HarnessError::Data(e.to_string()))?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| HarnessError::Data(format!("missing column {name}")))
    };
    let response_col = find(&config.response)?;
    let numeric_cols: Vec<(String, usize)> = config
        .numeric_columns()
        .into_iter()
        .map(|c| find(&c).map(|i| (c, i)))
        .collect::<HarnessResult<_>>()?;
    let group_cols: Vec<(String, usize)> = config
        .group_columns()
        .into_iter()
        .map(|c| find(&c).map(|i| (c, i)))
        .collect::<HarnessResult<_>>()?;

    let mut response = Vec::new();
    let mut numeric: Vec<Vec<f64>> = vec![Vec::new(); numeric_cols.len()];
    let mut labels: Vec<Vec<String>> = vec![Vec::new(); group_cols.len()];
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| HarnessError::Data(format!("row {row}: {e}")))?;
        let number = |col: usize, name: &str| -> HarnessResult<f64> {
            let s = rec.get(col).unwrap_or("");
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| HarnessError::Data(format!("row {row}: column {name}: cannot parse {s:?} as a number")))
        };
        let y = number(response_col, &config.response)?;
        if config.likelihood == LikelihoodName::Lognormal && !(y > 0.0) {
            return Err(HarnessError::Data(format!(
                "row {row}: response {y} is not positive under a lognormal likelihood"
            )));
        }
        response.push(y);
        for (k, (name, col)) in numeric_cols.iter().enumerate() {
            numeric[k].push(number(*col, name)?);
        }
        for (k, (name, col)) in group_cols.iter().enumerate() {
            let s = rec.get(*col).unwrap_or("");
            if s.is_empty() {
                return Err(HarnessError::Data(format!("row {row}: column {name} is empty")));
            }
            labels[k].push(s.to_string());
        }
    }
    if response.is_empty() {
        return Err(HarnessError::Data("no data rows".into()));
    }
    Ok(Dataset {
        response_name: config.response.clone(),
        response,
        numeric: numeric_cols.into_iter().map(|(n, _)| n).zip(numeric).collect(),
        groups: group_cols
            .into_iter()
            .map(|(n, _)| n)
            .zip(labels.iter().map(|l| GroupColumn::from_labels(l)))
            .collect(),
    })
}

/// Writes the response, numeric and group columns (levels as labels).
pub fn write_csv<W: Write>(writer: W, data: &Dataset) -> HarnessResult<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![data.response_name.clone()];
    header.extend(data.numeric.keys().cloned());
    header.extend(data.groups.keys().filter(|k| !data.numeric.contains_key(*k)).cloned());
    w.write_record(&header)?;
    for i in 0..data.n() {
        let mut rec = vec![data.response[i].to_string()];
        rec.extend(data.numeric.values().map(|c| c[i].to_string()));
        rec.extend(
            data.groups
                .iter()
                .filter(|(k, _)| !data.numeric.contains_key(*k))
                .map(|(_, g)| g.levels[g.index[i]].clone()),
        );
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Level mappings as `column,index,level` rows.
pub fn write_levels<W: Write>(writer: W, data: &Dataset) -> HarnessResult<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["column", "index", "level"])?;
    for (name, g) in &data.groups {
        for (j, level) in g.levels.iter().enumerate() {
            w.write_record([name.as_str(), &j.to_string(), level])?;
        }
    }
    w.flush()?;
    Ok(())
}
