use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// CSV text with header `label,superclass,f0,…`; floats carry 17 significant digits.
pub fn to_csv_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["label".to_string(), "superclass".to_string()];
    header.extend((0..ds.dim()).map(|j| format!("f{j}")));
    let csv_err = |e: csv::Error| Error::InvalidTensor(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for (i, &y) in ds.labels().iter().enumerate() {
        let sup = ds.superclass_of(y).expect("dataset invariant");
        let mut rec = vec![y.to_string(), sup.to_string()];
        rec.extend(ds.features().row(i).iter().map(|v| format!("{v:.16e}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::InvalidTensor(e.to_string()))
}

pub fn parse_csv(bytes: &[u8]) -> Result<Dataset> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let header = r
        .headers()
        .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
        .clone();
    let names: Vec<&str> = header.iter().collect();
    let dim = names.len().saturating_sub(2);
    let expected_ok = names.len() >= 3
        && names[0] == "label"
        && names[1] == "superclass"
        && names[2..].iter().enumerate().all(|(j, n)| *n == format!("f{j}"));
    if !expected_ok {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header `label,superclass,f0,…`, got `{}`", names.join(",")),
        });
    }
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut taxonomy = BTreeMap::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != dim + 2 {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, got {}", dim + 2, rec.len()),
            });
        }
        let int = |k: usize, what: &str| -> Result<usize> {
            rec[k].trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("{what} `{}` is not a non-negative integer", &rec[k]),
            })
        };
        let y = int(0, "label")?;
        let s = int(1, "superclass")?;
        if let Some(prev) = taxonomy.insert(y, s) {
            if prev != s {
                return Err(Error::Parse {
                    line,
                    msg: format!("class {y} listed under superclasses {prev} and {s}"),
                });
            }
        }
        for k in 2..dim + 2 {
            let v: f64 = rec[k].trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("feature `{}` is not a number", &rec[k]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("feature `{}` is not finite", &rec[k]),
                });
            }
            data.push(v);
        }
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(Error::Parse { line: 2, msg: "no data rows".into() });
    }
    Dataset::new(Tensor::matrix(labels.len(), dim, data)?, labels, taxonomy)
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Path of the digest file written next to `path`.
pub fn digest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".sha256");
    PathBuf::from(s)
}

/// Writes the CSV and a `sha256sum`-style digest file; returns the digest.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<String> {
    let bytes = to_csv_bytes(ds)?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let digest = sha256_hex(&bytes);
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let dpath = digest_path(path);
    fs::write(&dpath, format!("{digest}  {name}\n")).map_err(|e| Error::io(&dpath, e))?;
    Ok(digest)
}

/// Recomputes the digest of `path` and compares it with the recorded one.
pub fn verify_digest(path: &Path) -> Result<bool> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let dpath = digest_path(path);
    let recorded = fs::read_to_string(&dpath).map_err(|e| Error::io(&dpath, e))?;
    Ok(recorded.split_whitespace().next() == Some(sha256_hex(&bytes).as_str()))
}
