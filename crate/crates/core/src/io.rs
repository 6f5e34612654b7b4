//! JSON formats for Kruskal models and dense tensors.
//!
//! A Kruskal model is `{"dims": [...], "rank": R, "factors": [...]}` with each
//! factor a row-major array of `Iₙ` rows of length `R`. A dense tensor is
//! `{"dims": [...], "values": [...]}` with values in column-major order, mode 1
//! fastest.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CribError, Result};
use crate::tensor::{DenseTensor, KruskalModel};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KruskalJson {
    dims: Vec<usize>,
    rank: usize,
    factors: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorJson {
    dims: Vec<usize>,
    values: Vec<f64>,
}

/// `line L column C: message`, without serde's trailing location.
pub fn json_diagnostic(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    let suffix = format!(" at line {} column {}", e.line(), e.column());
    format!("line {} column {}: {}", e.line(), e.column(), msg.strip_suffix(&suffix).unwrap_or(&msg))
}

fn syntax(e: serde_json::Error) -> CribError {
    CribError::Format(json_diagnostic(&e))
}

fn field(path: &str, msg: impl std::fmt::Display) -> CribError {
    CribError::Format(format!("field `{path}`: {msg}"))
}

pub fn kruskal_from_json(text: &str) -> Result<KruskalModel> {
    let raw: KruskalJson = serde_json::from_str(text).map_err(syntax)?;
    if raw.dims.len() < 3 {
        return Err(field("dims", format!("need at least 3 modes, got {}", raw.dims.len())));
    }
    if let Some(n) = raw.dims.iter().position(|&d| d == 0) {
        return Err(field(&format!("dims[{n}]"), "must be positive"));
    }
    if raw.rank == 0 {
        return Err(field("rank", "must be positive"));
    }
    if raw.factors.len() != raw.dims.len() {
        return Err(field(
            "factors",
            format!("expected {} factor matrices, got {}", raw.dims.len(), raw.factors.len()),
        ));
    }
    let mut factors = Vec::with_capacity(raw.dims.len());
    for (n, (rows, &d)) in raw.factors.iter().zip(&raw.dims).enumerate() {
        if rows.len() != d {
            return Err(field(&format!("factors[{n}]"), format!("expected {d} rows, got {}", rows.len())));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != raw.rank {
                return Err(field(
                    &format!("factors[{n}][{i}]"),
                    format!("expected {} entries, got {}", raw.rank, row.len()),
                ));
            }
        }
        factors.push(DMatrix::from_fn(d, raw.rank, |i, r| rows[i][r]));
    }
    KruskalModel::new(factors)
}

pub fn kruskal_to_json(model: &KruskalModel) -> String {
    let raw = KruskalJson {
        dims: model.dims(),
        rank: model.rank(),
        factors: model
            .factors()
            .iter()
            .map(|a| a.row_iter().map(|row| row.iter().copied().collect()).collect())
            .collect(),
    };
    serde_json::to_string_pretty(&raw).expect("finite model serializes")
}

pub fn tensor_from_json(text: &str) -> Result<DenseTensor> {
    let raw: TensorJson = serde_json::from_str(text).map_err(syntax)?;
    if raw.dims.is_empty() {
        return Err(field("dims", "must not be empty"));
    }
    if let Some(n) = raw.dims.iter().position(|&d| d == 0) {
        return Err(field(&format!("dims[{n}]"), "must be positive"));
    }
    let len: usize = raw.dims.iter().product();
    if raw.values.len() != len {
        return Err(field("values", format!("expected {len} entries for dims {:?}, got {}", raw.dims, raw.values.len())));
    }
    DenseTensor::new(raw.dims, raw.values)
}

pub fn tensor_to_json(t: &DenseTensor) -> String {
    let raw = TensorJson { dims: t.dims().to_vec(), values: t.values().to_vec() };
    serde_json::to_string(&raw).expect("finite tensor serializes")
}

pub fn read_kruskal(path: &std::path::Path) -> Result<KruskalModel> {
    let text = read(path)?;
    kruskal_from_json(&text).map_err(|e| prefix(path, e))
}

pub fn read_tensor(path: &std::path::Path) -> Result<DenseTensor> {
    let text = read(path)?;
    tensor_from_json(&text).map_err(|e| prefix(path, e))
}

fn read(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CribError::Format(format!("{}: {e}", path.display())))
}

fn prefix(path: &std::path::Path, e: CribError) -> CribError {
    match e {
        CribError::Format(msg) => CribError::Format(format!("{}: {msg}", path.display())),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MODEL: &str = r#"{
        "dims": [2, 2, 2],
        "rank": 2,
        "factors": [
            [[1.0, 0.5], [2.0, -1.0]],
            [[1.0, 0.0], [0.0, 1.0]],
            [[0.6, 0.8], [0.8, -0.6]]
        ]
    }"#;

    #[test]
    fn parses_row_major_factors() {
        let m = kruskal_from_json(MODEL).unwrap();
        assert_eq!(m.dims(), vec![2, 2, 2]);
        assert_eq!(m.factor(0)[(1, 0)], 2.0);
        assert_eq!(m.factor(0)[(0, 1)], 0.5);
        assert_eq!(m.factor(2)[(1, 1)], -0.6);
    }

    #[test]
    fn kruskal_round_trip_is_bit_exact() {
        let m = KruskalModel::new(vec![
            DMatrix::from_fn(3, 2, |i, j| (i as f64 + 0.1) / (j as f64 + 3.0)),
            DMatrix::from_fn(2, 2, |i, j| std::f64::consts::PI * (i + 2 * j) as f64 / 7.0),
            DMatrix::from_fn(4, 2, |i, j| 1e-300 * (i + j + 1) as f64 - 1e300 * (i == 3) as u8 as f64),
        ])
        .unwrap();
        assert_eq!(kruskal_from_json(&kruskal_to_json(&m)).unwrap(), m);
    }

    #[test]
    fn tensor_round_trip_and_order() {
        let t = tensor_from_json(r#"{"dims":[2,2,2],"values":[1,2,3,4,5,6,7,8]}"#).unwrap();
        assert_eq!(t.get(&[1, 0, 0]), 2.0);
        assert_eq!(t.get(&[0, 1, 0]), 3.0);
        assert_eq!(t.get(&[0, 0, 1]), 5.0);
        assert_eq!(tensor_from_json(&tensor_to_json(&t)).unwrap(), t);
    }

    #[test]
    fn diagnostics_name_line_or_field() {
        let e = kruskal_from_json("{\n  \"dims\": [2, 2, 2],\n  \"rank\": oops\n}").unwrap_err();
        assert!(e.to_string().contains("line 3"), "{e}");
        let bad_row = MODEL.replace("[0.0, 1.0]", "[0.0]");
        let e = kruskal_from_json(&bad_row).unwrap_err();
        assert!(e.to_string().contains("factors[1][1]"), "{e}");
        let e = tensor_from_json(r#"{"dims":[2,2,2],"values":[1,2]}"#).unwrap_err();
        assert!(e.to_string().contains("values"), "{e}");
        let e = kruskal_from_json(r#"{"dims":[2,2,2],"rank":1,"factors":[],"extra":1}"#).unwrap_err();
        assert!(e.to_string().contains("extra"), "{e}");
        let e = kruskal_from_json(r#"{"dims":[2,2],"rank":1,"factors":[[[1],[1]],[[1],[1]]]}"#).unwrap_err();
        assert!(e.to_string().contains("dims"), "{e}");
    }
}
