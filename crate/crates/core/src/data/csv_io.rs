use super::{
    DataError, LabelKind, Labels, Layout, Manifest, Result, Split, TimeSeriesDataset,
};
use ndarray::{Array2, Array3};
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

const INSTANCE_COLUMN: &str = "instance";
const SPLIT_COLUMN: &str = "split";

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| DataError::Manifest {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads the dataset a manifest file describes; data files resolve relative
/// to the manifest's directory.
pub fn load_from_manifest(path: &Path) -> Result<TimeSeriesDataset> {
    let manifest = load_manifest(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    load_csv(base, &manifest)
}

struct Columns {
    instance: Option<usize>,
    split: Option<usize>,
    label: Option<usize>,
    vars: Vec<usize>,
}

fn resolve_columns(headers: &csv::StringRecord, manifest: &Manifest, file: &str) -> Result<Columns> {
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let instance = find(INSTANCE_COLUMN);
    if manifest.layout == Layout::Long && instance.is_none() {
        return Err(DataError::MissingColumn {
            file: file.into(),
            column: INSTANCE_COLUMN.into(),
        });
    }
    let label = match (&manifest.label_column, manifest.label_kind) {
        (_, LabelKind::None) => None,
        (Some(col), _) => Some(find(col).ok_or_else(|| DataError::MissingColumn {
            file: file.into(),
            column: col.clone(),
        })?),
        (None, _) => {
            return Err(DataError::MissingColumn {
                file: file.into(),
                column: "<label_column unset in manifest>".into(),
            })
        }
    };
    let split = find(SPLIT_COLUMN);
    let vars: Vec<usize> = (0..headers.len())
        .filter(|i| Some(*i) != instance && Some(*i) != split && Some(*i) != label)
        .collect();
    if vars.len() < manifest.d {
        return Err(DataError::MissingColumn {
            file: file.into(),
            column: format!("variable #{} (manifest declares D={})", vars.len(), manifest.d),
        });
    }
    if vars.len() > manifest.d {
        return Err(DataError::Invalid(format!(
            "{file}: {} variable columns, manifest declares D={}",
            vars.len(),
            manifest.d
        )));
    }
    Ok(Columns {
        instance,
        split,
        label,
        vars,
    })
}

fn parse_number(cell: &str, file: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| DataError::NonNumericCell {
        file: file.into(),
        row,
        column: column.into(),
        value: cell.into(),
    })?;
    if !v.is_finite() {
        return Err(DataError::NaNValue {
            file: file.into(),
            row,
            column: column.into(),
        });
    }
    Ok(v)
}

#[derive(Default)]
struct InstanceRows {
    id: String,
    values: Vec<Vec<f64>>,
    labels: Vec<f64>,
    split: Option<Split>,
}

fn read_file(path: &Path, manifest: &Manifest, out: &mut Vec<InstanceRows>) -> Result<String> {
    let file = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|source| DataError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
    let headers = reader
        .headers()
        .map_err(|source| DataError::Csv {
            path: path.to_path_buf(),
            source,
        })?
        .clone();
    let cols = resolve_columns(&headers, manifest, &file)?;
    let mut index: HashMap<String, usize> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|source| DataError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let row = record.position().map_or(0, |p| p.line() as usize);
        let id = cols.instance.map_or_else(|| file.clone(), |c| record[c].to_string());
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            out.push(InstanceRows {
                id: id.clone(),
                ..Default::default()
            });
            out.len() - 1
        });
        let mut values = Vec::with_capacity(cols.vars.len());
        for &c in &cols.vars {
            values.push(parse_number(&record[c], &file, row, &headers[c])?);
        }
        let inst = &mut out[slot];
        inst.values.push(values);
        if let Some(c) = cols.label {
            inst.labels.push(parse_number(&record[c], &file, row, &headers[c])?);
        }
        if let Some(c) = cols.split {
            let split = Split::parse(&record[c]).ok_or_else(|| DataError::NonNumericCell {
                file: file.clone(),
                row,
                column: SPLIT_COLUMN.into(),
                value: record[c].to_string(),
            })?;
            inst.split.get_or_insert(split);
        }
    }
    Ok(file)
}

/// Reads every file listed in `manifest` from `base_dir`.
pub fn load_csv(base_dir: &Path, manifest: &Manifest) -> Result<TimeSeriesDataset> {
    if manifest.files.is_empty() {
        return Err(DataError::Invalid("manifest lists no files".into()));
    }
    let mut instances = Vec::new();
    let mut origin = Vec::new();
    for name in &manifest.files {
        let path = base_dir.join(name);
        if !path.exists() {
            return Err(DataError::Io {
                path: path.clone(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
            });
        }
        let before = instances.len();
        let file = read_file(&path, manifest, &mut instances)?;
        origin.extend(std::iter::repeat_n(file, instances.len() - before));
    }

    let (n, d, t) = (instances.len(), manifest.d, manifest.t);
    let mut values = Array3::zeros((n, d, t));
    let mut classes = Vec::with_capacity(n);
    let mut flags = Array2::from_elem((n, t), false);
    let mut splits = Vec::with_capacity(n);
    for (i, inst) in instances.iter().enumerate() {
        if inst.values.len() != t {
            return Err(DataError::RaggedLength {
                file: origin[i].clone(),
                instance: inst.id.clone(),
                expected: t,
                found: inst.values.len(),
            });
        }
        for (step, row) in inst.values.iter().enumerate() {
            for (v, &x) in row.iter().enumerate() {
                values[[i, v, step]] = x;
            }
        }
        match manifest.label_kind {
            LabelKind::Class => {
                let first = inst.labels[0];
                if inst.labels.iter().any(|&l| l != first) {
                    return Err(DataError::InconsistentLabel {
                        file: origin[i].clone(),
                        instance: inst.id.clone(),
                    });
                }
                if first < 0.0 || first.fract() != 0.0 {
                    return Err(DataError::Invalid(format!(
                        "{}: class label {first} is not a non-negative integer",
                        origin[i]
                    )));
                }
                classes.push(first as usize);
            }
            LabelKind::Anomaly => {
                for (step, &l) in inst.labels.iter().enumerate() {
                    flags[[i, step]] = l != 0.0;
                }
            }
            LabelKind::None => {}
        }
        splits.push(inst.split.unwrap_or(Split::Train));
    }
    let labels = match manifest.label_kind {
        LabelKind::Class => Labels::Class(classes),
        LabelKind::Anomaly => Labels::Anomaly(flags),
        LabelKind::None => Labels::None,
    };
    TimeSeriesDataset::new(values, labels, splits, manifest.clone())
}

/// Writes `dataset` as a long-layout CSV plus `manifest.json` under `dir`.
/// Returns the manifest path.
pub fn write_csv(dataset: &TimeSeriesDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let file_name = format!("{}.csv", dataset.manifest.name);
    let path = dir.join(&file_name);
    let csv_err = |source| DataError::Csv {
        path: path.clone(),
        source,
    };
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    let has_label = dataset.labels.kind() != LabelKind::None;
    let mut header = vec![INSTANCE_COLUMN.to_string(), SPLIT_COLUMN.to_string()];
    header.extend((0..dataset.n_vars()).map(|v| format!("x{v}")));
    if has_label {
        header.push("label".into());
    }
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..dataset.len() {
        for step in 0..dataset.n_steps() {
            let mut rec = vec![i.to_string(), dataset.splits[i].as_str().to_string()];
            rec.extend((0..dataset.n_vars()).map(|v| dataset.values[[i, v, step]].to_string()));
            match &dataset.labels {
                Labels::Class(c) => rec.push(c[i].to_string()),
                Labels::Anomaly(a) => rec.push(u8::from(a[[i, step]]).to_string()),
                Labels::None => {}
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|source| DataError::Io {
        path: path.clone(),
        source,
    })?;

    let manifest = Manifest {
        name: dataset.manifest.name.clone(),
        d: dataset.n_vars(),
        t: dataset.n_steps(),
        layout: Layout::Long,
        label_kind: dataset.labels.kind(),
        label_column: has_label.then(|| "label".to_string()),
        files: vec![file_name],
        sampling_rate: dataset.manifest.sampling_rate,
    };
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text).map_err(|source| DataError::Io {
        path: manifest_path.clone(),
        source,
    })?;
    Ok(manifest_path)
}
