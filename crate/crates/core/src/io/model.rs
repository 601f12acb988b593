//! Payload model files, JSON sidecars and the network document.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{read_file, write_file, BinReader, BinWriter, IoError};
use crate::graph::{Factor, FactorClass, Network, NetworkBuilder, Payload, Value, VarId, VariableKind};
use crate::subspace::{Basis, HiddenDomain, SubspaceFactor};
use crate::table::MemoryTable;

const TABLE_MAGIC: &[u8; 4] = b"MFNT";
const SUBSPACE_MAGIC: &[u8; 4] = b"MFNS";
const VERSION: u32 = 1;
pub const NETWORK_VERSION: u32 = 1;

fn kind_tag(v: &Value) -> u8 {
    match v {
        Value::Real(_) => 0,
        Value::Complex(_) => 1,
        Value::Int(_) => 2,
        Value::Label(_) => 3,
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32, IoError> {
    u32::try_from(n).map_err(|_| IoError::Invalid(format!("{what} {n} too large")))
}

pub fn encode_table(t: &MemoryTable) -> Result<Vec<u8>, IoError> {
    let mut w = BinWriter::new(TABLE_MAGIC, VERSION);
    w.u32(len_u32(t.n_rows(), "row count")?);
    w.u32(len_u32(t.n_cols(), "column count")?);
    for v in t.row(0) {
        w.u8(kind_tag(v));
    }
    for v in t.cells() {
        match *v {
            Value::Real(x) => w.f64(x),
            Value::Complex(c) => {
                w.f64(c.re);
                w.f64(c.im);
            }
            Value::Int(z) => w.i64(z),
            Value::Label(k) => w.u32(k),
        }
    }
    Ok(w.finish())
}

pub fn decode_table(bytes: &[u8]) -> Result<MemoryTable, IoError> {
    let (mut r, _) = BinReader::open(bytes, TABLE_MAGIC, VERSION)?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    if rows == 0 || cols == 0 {
        return Err(IoError::Invalid("empty table".into()));
    }
    let tags = (0..cols).map(|_| r.u8()).collect::<Result<Vec<_>, _>>()?;
    let mut out = Vec::with_capacity(rows);
    for _ in 0..rows {
        let mut row = Vec::with_capacity(cols);
        for &t in &tags {
            row.push(match t {
                0 => Value::Real(r.f64()?),
                1 => Value::Complex(Complex64::new(r.f64()?, r.f64()?)),
                2 => Value::Int(r.i64()?),
                3 => Value::Label(r.u32()?),
                other => return Err(IoError::Invalid(format!("column kind tag {other}"))),
            });
        }
        out.push(row);
    }
    r.finish()?;
    MemoryTable::new(out).map_err(|e| IoError::Invalid(e.to_string()))
}

pub fn encode_subspace(s: &SubspaceFactor) -> Result<Vec<u8>, IoError> {
    let mut w = BinWriter::new(SUBSPACE_MAGIC, VERSION);
    w.u32(len_u32(s.n(), "n")?);
    w.u32(len_u32(s.p(), "p")?);
    match s.basis() {
        Basis::Real(m) => {
            w.u8(0);
            w.u8(match s.domain() {
                HiddenDomain::Reals => 0,
                _ => 1,
            });
            // nalgebra storage is column-major
            for &x in m.as_slice() {
                w.f64(x);
            }
        }
        Basis::Complex(m) => {
            w.u8(1);
            w.u8(2);
            for c in m.as_slice() {
                w.f64(c.re);
                w.f64(c.im);
            }
        }
    }
    Ok(w.finish())
}

pub fn decode_subspace(bytes: &[u8]) -> Result<SubspaceFactor, IoError> {
    let (mut r, _) = BinReader::open(bytes, SUBSPACE_MAGIC, VERSION)?;
    let n = r.u32()? as usize;
    let p = r.u32()? as usize;
    let scalar = r.u8()?;
    let domain = match r.u8()? {
        0 => HiddenDomain::Reals,
        1 => HiddenDomain::NonnegReals,
        2 => HiddenDomain::Complex,
        other => return Err(IoError::Invalid(format!("domain flag {other}"))),
    };
    let count = n
        .checked_mul(p)
        .ok_or_else(|| IoError::Invalid("basis size overflow".into()))?;
    let basis = match scalar {
        0 => {
            let v = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            Basis::Real(DMatrix::from_vec(n, p, v))
        }
        1 => {
            let v = (0..count)
                .map(|_| Ok(Complex64::new(r.f64()?, r.f64()?)))
                .collect::<Result<Vec<_>, IoError>>()?;
            Basis::Complex(DMatrix::from_vec(n, p, v))
        }
        other => return Err(IoError::Invalid(format!("scalar kind {other}"))),
    };
    r.finish()?;
    SubspaceFactor::new(basis, domain).map_err(|e| IoError::Invalid(e.to_string()))
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelFile {
    Table(MemoryTable),
    Subspace(SubspaceFactor),
}

impl ModelFile {
    pub fn to_payload(self) -> Payload {
        match self {
            ModelFile::Table(t) => Payload::table(Arc::new(t)),
            ModelFile::Subspace(s) => Payload::Subspace(Arc::new(s)),
        }
    }
}

/// JSON description stored next to a payload file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub format: String,
    /// Neighbor lists of every factor that references the payload.
    pub bound_variables: Vec<Vec<VarId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

pub fn save_model(path: &Path, model: &ModelFile, sidecar: &Sidecar) -> Result<(), IoError> {
    let bytes = match model {
        ModelFile::Table(t) => encode_table(t)?,
        ModelFile::Subspace(s) => encode_subspace(s)?,
    };
    write_file(path, &bytes)?;
    let mut json = serde_json::to_vec_pretty(sidecar)?;
    json.push(b'\n');
    write_file(&sidecar_path(path), &json)
}

pub fn load_model(path: &Path) -> Result<ModelFile, IoError> {
    let bytes = read_file(path)?;
    match bytes.get(..4) {
        Some(m) if m == TABLE_MAGIC => Ok(ModelFile::Table(decode_table(&bytes)?)),
        Some(m) if m == SUBSPACE_MAGIC => Ok(ModelFile::Subspace(decode_subspace(&bytes)?)),
        _ => Err(IoError::BadMagic("MFNT or MFNS")),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariableEntry {
    pub id: VarId,
    pub kind: VariableKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorEntry {
    pub id: usize,
    pub class: FactorClass,
    /// Payload file name relative to the document; absent for evidence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub columns: Option<Vec<usize>>,
    pub neighbors: Vec<VarId>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkDoc {
    pub version: u32,
    pub variables: Vec<VariableEntry>,
    pub factors: Vec<FactorEntry>,
}

fn payload_key(p: &Payload) -> usize {
    match p {
        Payload::Table { table, .. } => Arc::as_ptr(table) as usize,
        Payload::Subspace(s) => Arc::as_ptr(s) as usize,
    }
}

/// Write `network.json` plus one payload file per distinct payload into
/// `dir`. Factors sharing a payload reference a single file.
pub fn save_network(net: &Network, dir: &Path) -> Result<(), IoError> {
    let mut refs: HashMap<usize, usize> = HashMap::new();
    let mut payloads: Vec<(Payload, Vec<Vec<VarId>>)> = Vec::new();
    let mut factors = Vec::with_capacity(net.n_factors());
    for (a, f) in net.factors().iter().enumerate() {
        if let Some(obs) = f.observation() {
            factors.push(FactorEntry {
                id: a,
                class: FactorClass::Evidence,
                payload_ref: None,
                observation: Some(obs[0]),
                columns: None,
                neighbors: f.neighbors.clone(),
                weights: f.weights.clone(),
            });
            continue;
        }
        let k = *refs.entry(payload_key(&f.payload)).or_insert_with(|| {
            payloads.push((f.payload.clone(), Vec::new()));
            payloads.len() - 1
        });
        payloads[k].1.push(f.neighbors.clone());
        let (name, columns) = match &f.payload {
            Payload::Table { columns, .. } => (format!("payload_{k:04}.mfnt"), columns.as_ref().map(|c| c.to_vec())),
            Payload::Subspace(_) => (format!("payload_{k:04}.mfns"), None),
        };
        factors.push(FactorEntry {
            id: a,
            class: FactorClass::Memory,
            payload_ref: Some(name),
            observation: None,
            columns,
            neighbors: f.neighbors.clone(),
            weights: f.weights.clone(),
        });
    }
    for (k, (p, bound)) in payloads.into_iter().enumerate() {
        let (name, model, format) = match p {
            Payload::Table { table, .. } => (format!("payload_{k:04}.mfnt"), ModelFile::Table((*table).clone()), "table"),
            Payload::Subspace(s) => (format!("payload_{k:04}.mfns"), ModelFile::Subspace((*s).clone()), "subspace"),
        };
        let sidecar = Sidecar {
            format: format.into(),
            bound_variables: bound,
            lambda: None,
            alpha: None,
        };
        save_model(&dir.join(name), &model, &sidecar)?;
    }
    let doc = NetworkDoc {
        version: NETWORK_VERSION,
        variables: net
            .variables()
            .iter()
            .enumerate()
            .map(|(id, &kind)| VariableEntry { id, kind })
            .collect(),
        factors,
    };
    let mut json = serde_json::to_vec_pretty(&doc)?;
    json.push(b'\n');
    write_file(&dir.join("network.json"), &json)
}

/// Load a network saved by [`save_network`].
pub fn load_network(dir: &Path) -> Result<Network, IoError> {
    let doc: NetworkDoc = serde_json::from_slice(&read_file(&dir.join("network.json"))?)?;
    if doc.version != NETWORK_VERSION {
        return Err(IoError::Version(doc.version));
    }
    for (k, v) in doc.variables.iter().enumerate() {
        if v.id != k {
            return Err(IoError::Invalid(format!("variable ids not dense at {k}")));
        }
    }
    let mut b = NetworkBuilder::with_variables(doc.variables.iter().map(|v| v.kind).collect());
    let mut cache: HashMap<String, Payload> = HashMap::new();
    for (k, f) in doc.factors.into_iter().enumerate() {
        if f.id != k {
            return Err(IoError::Invalid(format!("factor ids not dense at {k}")));
        }
        match f.class {
            FactorClass::Evidence => {
                let (&[i], Some(v), &[w]) = (f.neighbors.as_slice(), f.observation, f.weights.as_slice()) else {
                    return Err(IoError::Invalid(format!("evidence factor {k} malformed")));
                };
                b.add_evidence(i, v, w);
            }
            FactorClass::Memory => {
                let name = f
                    .payload_ref
                    .ok_or_else(|| IoError::Invalid(format!("memory factor {k} has no payload")))?;
                let base = match cache.get(&name) {
                    Some(p) => p.clone(),
                    None => {
                        let p = load_model(&dir.join(&name))?.to_payload();
                        cache.insert(name.clone(), p.clone());
                        p
                    }
                };
                let payload = match (base, f.columns) {
                    (Payload::Table { table, .. }, cols) => Payload::Table {
                        table,
                        columns: cols.map(Arc::new),
                    },
                    (p, None) => p,
                    (_, Some(_)) => {
                        return Err(IoError::Invalid(format!("column map on subspace factor {k}")))
                    }
                };
                b.push_factor(Factor {
                    class: FactorClass::Memory,
                    payload,
                    neighbors: f.neighbors,
                    weights: f.weights,
                });
            }
        }
    }
    b.build().map_err(|e| IoError::Invalid(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> MemoryTable {
        MemoryTable::new(vec![
            vec![Value::Real(0.25), Value::Int(-3), Value::Label(2), Value::Complex(Complex64::new(1.0, -2.0))],
            vec![Value::Real(1e-300), Value::Int(i64::MAX), Value::Label(0), Value::Complex(Complex64::new(0.0, 0.5))],
        ])
        .unwrap()
    }

    #[test]
    fn table_round_trip_bit_exact() {
        let t = table();
        let bytes = encode_table(&t).unwrap();
        assert_eq!(decode_table(&bytes).unwrap(), t);
        assert_eq!(encode_table(&decode_table(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn flipped_checksum_fails() {
        let mut bytes = encode_table(&table()).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x80;
        assert!(matches!(decode_table(&bytes), Err(IoError::Checksum)));
    }

    #[test]
    fn subspace_round_trip() {
        let w = DMatrix::from_fn(4, 2, |i, j| (i * 2 + j) as f64 * 0.5);
        let s = SubspaceFactor::new(Basis::Real(w), HiddenDomain::NonnegReals).unwrap();
        assert_eq!(decode_subspace(&encode_subspace(&s).unwrap()).unwrap(), s);
        let w = DMatrix::from_fn(3, 1, |i, _| Complex64::new(i as f64, -1.0));
        let s = SubspaceFactor::new(Basis::Complex(w), HiddenDomain::Complex).unwrap();
        assert_eq!(decode_subspace(&encode_subspace(&s).unwrap()).unwrap(), s);
    }

    #[test]
    fn network_round_trip_dedups_shared_payloads() {
        let dir = tempfile::tempdir().unwrap();
        let shared = Payload::table(Arc::new(
            MemoryTable::new(vec![vec![Value::Real(0.0), Value::Real(1.0)]]).unwrap(),
        ));
        let mut b = NetworkBuilder::new();
        let v: Vec<_> = (0..4).map(|_| b.add_variable(VariableKind::REAL_NONNEG)).collect();
        b.add_memory_factor(shared.clone(), vec![v[0], v[1]], vec![1.0, 1.0]);
        b.add_memory_factor(shared.clone(), vec![v[2], v[3]], vec![1.0, 1.0]);
        if let Payload::Table { table, .. } = &shared {
            b.add_memory_factor(
                Payload::Table {
                    table: table.clone(),
                    columns: Some(Arc::new(vec![1])),
                },
                vec![v[1]],
                vec![1.0],
            );
        }
        b.add_evidence(v[0], Value::Real(0.5), 2.0);
        let net = b.build().unwrap();
        save_network(&net, dir.path()).unwrap();
        let files: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == "mfnt"))
            .collect();
        assert_eq!(files.len(), 1);
        let back = load_network(dir.path()).unwrap();
        assert_eq!(back.n_factors(), 4);
        assert_eq!(back.factor(3).observation(), Some(&[Value::Real(0.5)][..]));
        assert_eq!(back.factor(2).payload.width(), 1);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = serde_json::from_str::<Sidecar>(
            r#"{"format":"table","bound_variables":[],"bogus":1}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }
}
