//! File formats: adjacency matrices, design-matrix CSV, responses, the
//! co-clustering binary and chain records.

use crate::error::{BaconError, Result};
use crate::estimate::CoClusterMatrix;
use crate::gibbs::Stage1Sample;
use crate::matrix::BinaryDesignMatrix;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// One subject's symmetric binary adjacency matrix, row-major `v x v`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    pub subject_id: String,
    pub v: usize,
    pub bits: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct PackedHeader {
    #[serde(rename = "V")]
    v: usize,
    subject_id: String,
}

impl Adjacency {
    pub fn get(&self, a: usize, b: usize) -> u8 {
        self.bits[a * self.v + b]
    }

    /// Symmetry, zero diagonal and 0/1 entries.
    pub fn validate(&self) -> Result<()> {
        if self.bits.len() != self.v * self.v {
            return Err(BaconError::Data(format!("subject {}: expected {} entries", self.subject_id, self.v * self.v)));
        }
        for a in 0..self.v {
            if self.get(a, a) != 0 {
                return Err(BaconError::Data(format!("subject {}: nonzero diagonal at region {}", self.subject_id, a + 1)));
            }
            for b in 0..a {
                let (x, y) = (self.get(a, b), self.get(b, a));
                if x > 1 || y > 1 {
                    return Err(BaconError::Data(format!("subject {}: non-binary entry", self.subject_id)));
                }
                if x != y {
                    return Err(BaconError::Data(format!("subject {}: asymmetric at ({}, {})", self.subject_id, a + 1, b + 1)));
                }
            }
        }
        Ok(())
    }

    /// Whitespace-separated 0/1 text, one matrix row per line.
    pub fn parse_text(text: &str, subject_id: &str) -> Result<Self> {
        let mut bits = Vec::new();
        let mut v = None;
        for (ln, line) in text.lines().enumerate() {
            let row: Vec<&str> = line.split_whitespace().collect();
            if row.is_empty() {
                continue;
            }
            let width = *v.get_or_insert(row.len());
            if row.len() != width {
                return Err(BaconError::Data(format!("subject {subject_id}: line {} has {} entries, expected {width}", ln + 1, row.len())));
            }
            for tok in row {
                bits.push(match tok {
                    "0" => 0,
                    "1" => 1,
                    other => return Err(BaconError::Data(format!("subject {subject_id}: non-binary entry {other:?}"))),
                });
            }
        }
        let v = v.unwrap_or(0);
        if bits.len() != v * v {
            return Err(BaconError::Data(format!("subject {subject_id}: matrix is not square")));
        }
        let adj = Self { subject_id: subject_id.to_string(), v, bits };
        adj.validate()?;
        Ok(adj)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(2 * self.bits.len());
        for row in self.bits.chunks(self.v.max(1)) {
            let line: Vec<&str> = row.iter().map(|&b| if b == 1 { "1" } else { "0" }).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    /// JSON header line `{"V":…, "subject_id":…}` followed by the row-major
    /// matrix packed LSB-first into bytes.
    pub fn parse_packed(bytes: &[u8]) -> Result<Self> {
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| BaconError::Data("packed adjacency lacks a header line".into()))?;
        let header: PackedHeader =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| BaconError::Data(format!("bad packed adjacency header: {e}")))?;
        let body = &bytes[nl + 1..];
        let cells = header.v * header.v;
        if body.len() != cells.div_ceil(8) {
            return Err(BaconError::Data(format!(
                "subject {}: packed body has {} bytes, expected {}",
                header.subject_id,
                body.len(),
                cells.div_ceil(8)
            )));
        }
        let bits = (0..cells).map(|c| (body[c / 8] >> (c % 8)) & 1).collect();
        let adj = Self { subject_id: header.subject_id, v: header.v, bits };
        adj.validate()?;
        Ok(adj)
    }

    pub fn to_packed(&self) -> Vec<u8> {
        let header = PackedHeader { v: self.v, subject_id: self.subject_id.clone() };
        let mut out = serde_json::to_vec(&header).expect("serializable header");
        out.push(b'\n');
        let mut body = vec![0u8; self.bits.len().div_ceil(8)];
        for (c, &b) in self.bits.iter().enumerate() {
            body[c / 8] |= (b & 1) << (c % 8);
        }
        out.extend(body);
        out
    }

    /// Reads either format; a leading `{` marks the packed one.
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| BaconError::io(path, e))?;
        if bytes.first() == Some(&b'{') {
            return Self::parse_packed(&bytes);
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("subject");
        let text = String::from_utf8(bytes).map_err(|_| BaconError::Data(format!("{} is neither text nor packed", path.display())))?;
        Self::parse_text(&text, stem)
    }
}

/// Adjacency matrices of every subject plus region labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyBundle {
    pub regions: Vec<String>,
    pub subjects: Vec<Adjacency>,
}

/// Region labels file inside a bundle directory.
pub const REGIONS_FILE: &str = "regions.txt";

impl AdjacencyBundle {
    /// Builds a bundle, defaulting region labels to `R1..RV`.
    pub fn new(subjects: Vec<Adjacency>, regions: Option<Vec<String>>) -> Result<Self> {
        let first = subjects.first().ok_or_else(|| BaconError::Data("bundle has no subjects".into()))?;
        let v = first.v;
        for s in &subjects {
            s.validate()?;
            if s.v != v {
                return Err(BaconError::Data(format!("subject {} has V = {}, expected {v}", s.subject_id, s.v)));
            }
        }
        let regions = regions.unwrap_or_else(|| (1..=v).map(|r| format!("R{r}")).collect());
        if regions.len() != v {
            return Err(BaconError::Data(format!("{} region labels for V = {v}", regions.len())));
        }
        Ok(Self { regions, subjects })
    }

    /// Every `*.txt`, `*.adj` or `*.pbin` file in `dir` except the region
    /// list, in file-name order; region labels from `regions.txt` if present.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let mut files: Vec<_> = fs::read_dir(dir)
            .map_err(|e| BaconError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name().and_then(|s| s.to_str()) != Some(REGIONS_FILE)
                    && matches!(p.extension().and_then(|s| s.to_str()), Some("txt" | "adj" | "pbin"))
            })
            .collect();
        files.sort();
        let subjects = files.iter().map(|p| Adjacency::read(p)).collect::<Result<Vec<_>>>()?;
        let rpath = dir.join(REGIONS_FILE);
        let regions = if rpath.exists() {
            let text = fs::read_to_string(&rpath).map_err(|e| BaconError::io(&rpath, e))?;
            Some(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
        } else {
            None
        };
        Self::new(subjects, regions)
    }

    pub fn v(&self) -> usize {
        self.regions.len()
    }

    /// Region pairs `(j₁, j₂)` with `j₁ > j₂`, row-major.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let v = self.v();
        (0..v).flat_map(|a| (0..a).map(move |b| (a, b))).collect()
    }

    /// All `V(V−1)/2` edge indicators, one row per subject.
    pub fn vectorize(&self) -> Result<BinaryDesignMatrix> {
        let pairs = self.pairs();
        let ids = pairs.iter().map(|&(a, b)| pair_id(&self.regions[a], &self.regions[b])).collect();
        BinaryDesignMatrix::from_fn(self.subjects.len(), pairs.len(), |i, j| {
            let (a, b) = pairs[j];
            self.subjects[i].get(a, b) == 1
        })
        .with_column_ids(ids)
    }
}

pub fn pair_id(a: &str, b: &str) -> String {
    format!("{a}--{b}")
}

/// One covariate column of the raw vectorization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnEntry {
    /// Index among raw columns.
    pub raw_index: usize,
    pub id: String,
    /// Region labels, when the column came from adjacency matrices.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regions: Option<(String, String)>,
}

/// What ingestion kept and dropped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub subjects: Vec<String>,
    pub raw_columns: usize,
    /// Retained columns in design-matrix order.
    pub retained: Vec<ColumnEntry>,
    /// Constant columns removed before modelling.
    pub removed: Vec<ColumnEntry>,
}

fn split_constant(
    raw: &BinaryDesignMatrix,
    regions: Option<(&AdjacencyBundle, &[(usize, usize)])>,
    subjects: Vec<String>,
) -> (BinaryDesignMatrix, Manifest) {
    let entry = |j: usize| ColumnEntry {
        raw_index: j,
        id: raw.column_ids()[j].clone(),
        regions: regions.map(|(b, pairs)| (b.regions[pairs[j].0].clone(), b.regions[pairs[j].1].clone())),
    };
    let (x, kept) = raw.drop_constant_columns();
    let mut is_kept = vec![false; raw.p()];
    kept.iter().for_each(|&j| is_kept[j] = true);
    let manifest = Manifest {
        subjects,
        raw_columns: raw.p(),
        retained: kept.iter().map(|&j| entry(j)).collect(),
        removed: (0..raw.p()).filter(|&j| !is_kept[j]).map(entry).collect(),
    };
    (x, manifest)
}

/// Vectorizes a bundle and removes constant columns.
pub fn ingest_bundle(bundle: &AdjacencyBundle) -> Result<(BinaryDesignMatrix, Manifest)> {
    let raw = bundle.vectorize()?;
    let pairs = bundle.pairs();
    let subjects = bundle.subjects.iter().map(|s| s.subject_id.clone()).collect();
    let (x, m) = split_constant(&raw, Some((bundle, &pairs)), subjects);
    if x.p() == 0 {
        return Err(BaconError::Data("every covariate is constant".into()));
    }
    Ok((x, m))
}

/// Reads a matrix CSV and removes constant columns.
pub fn ingest_matrix_csv(path: &Path) -> Result<(BinaryDesignMatrix, Manifest)> {
    let (raw, subjects) = read_matrix_csv(path)?;
    let (x, m) = split_constant(&raw, None, subjects);
    if x.p() == 0 {
        return Err(BaconError::Data("every covariate is constant".into()));
    }
    Ok((x, m))
}

/// Leading column name that marks subject ids in a matrix CSV.
pub const SUBJECT_COLUMN: &str = "subject_id";

fn csv_err(path: &Path, e: csv::Error) -> BaconError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => BaconError::io(path, io),
        other => BaconError::Data(format!("{}: {other:?}", path.display())),
    }
}

/// Matrix CSV: header of column ids (optionally led by `subject_id`), then
/// one 0/1 row per subject. Subjects default to `S1..Sn`.
pub fn read_matrix_csv(path: &Path) -> Result<(BinaryDesignMatrix, Vec<String>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = rdr.headers().map_err(|e| csv_err(path, e))?.iter().map(String::from).collect();
    let with_ids = header.first().map(String::as_str) == Some(SUBJECT_COLUMN);
    let ids: Vec<String> = header[usize::from(with_ids)..].to_vec();
    let mut rows = Vec::new();
    let mut subjects = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let mut fields = rec.iter();
        subjects.push(if with_ids { fields.next().unwrap_or_default().to_string() } else { format!("S{}", r + 1) });
        let row = fields
            .map(|f| match f {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                other => Err(BaconError::Data(format!("{}: row {}: non-binary entry {other:?}", path.display(), r + 1))),
            })
            .collect::<Result<Vec<u8>>>()?;
        if row.len() != ids.len() {
            return Err(BaconError::Data(format!("{}: row {} has {} entries, header has {}", path.display(), r + 1, row.len(), ids.len())));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(BaconError::Data(format!("{}: no data rows", path.display())));
    }
    let x = BinaryDesignMatrix::from_rows(&rows)?.with_column_ids(ids)?;
    Ok((x, subjects))
}

pub fn write_matrix_csv(path: &Path, x: &BinaryDesignMatrix, subjects: Option<&[String]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header: Vec<&str> = Vec::with_capacity(x.p() + 1);
    if subjects.is_some() {
        header.push(SUBJECT_COLUMN);
    }
    header.extend(x.column_ids().iter().map(String::as_str));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for i in 0..x.n() {
        let mut rec: Vec<String> = Vec::with_capacity(x.p() + 1);
        if let Some(s) = subjects {
            rec.push(s[i].clone());
        }
        rec.extend((0..x.p()).map(|j| if x.get(i, j) { "1".to_string() } else { "0".to_string() }));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| BaconError::io(path, e))
}

/// One row of a responses file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub subject_id: String,
    pub y: f64,
}

pub fn read_responses(path: &Path) -> Result<Vec<Response>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| csv_err(path, e))?;
    let rows = rdr.deserialize().collect::<std::result::Result<Vec<Response>, _>>().map_err(|e| csv_err(path, e))?;
    if let Some(r) = rows.iter().find(|r| !r.y.is_finite()) {
        return Err(BaconError::Data(format!("{}: response of {} is not finite", path.display(), r.subject_id)));
    }
    Ok(rows)
}

pub fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| BaconError::io(path, e))
}

pub fn read_csv_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    rdr.deserialize().collect::<std::result::Result<Vec<T>, _>>().map_err(|e| csv_err(path, e))
}

/// `cocluster.bin`: `p` as 8-byte little-endian, then the dense `p x p`
/// matrix as row-major little-endian `f32`.
pub fn write_cocluster(path: &Path, m: &CoClusterMatrix) -> Result<()> {
    let mut out = Vec::with_capacity(8 + 4 * m.values().len());
    out.extend_from_slice(&(m.p() as u64).to_le_bytes());
    for v in m.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| BaconError::io(path, e))
}

pub fn read_cocluster(path: &Path) -> Result<CoClusterMatrix> {
    let bytes = fs::read(path).map_err(|e| BaconError::io(path, e))?;
    if bytes.len() < 8 {
        return Err(BaconError::Data(format!("{}: truncated header", path.display())));
    }
    let p = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = &bytes[8..];
    if p.checked_mul(p).and_then(|c| c.checked_mul(4)) != Some(body.len()) {
        return Err(BaconError::Data(format!("{}: body does not hold a {p}x{p} matrix", path.display())));
    }
    let values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    CoClusterMatrix::from_dense(p, values)
}

/// One NDJSON line of a clustering chain; labels are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub sweep: u64,
    pub q: usize,
    pub d: f64,
    pub p_star: f64,
    pub r: [f64; 2],
    pub labels: Vec<u32>,
}

impl From<&Stage1Sample> for ChainRecord {
    fn from(s: &Stage1Sample) -> Self {
        Self { sweep: s.sweep, q: s.q, d: s.d, p_star: s.p_star, r: s.r, labels: s.labels.iter().map(|&l| l + 1).collect() }
    }
}

impl ChainRecord {
    /// 0-based labels.
    pub fn zero_based(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize - 1).collect()
    }
}

pub fn write_ndjson<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| BaconError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, &r).map_err(|e| BaconError::Data(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| BaconError::io(path, e))?;
    }
    w.flush().map_err(|e| BaconError::io(path, e))
}

pub fn read_ndjson<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| BaconError::io(path, e))?;
    let mut out = Vec::new();
    for (ln, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| BaconError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| BaconError::Data(format!("{}:{}: {e}", path.display(), ln + 1)))?);
    }
    Ok(out)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| BaconError::Data(e.to_string()))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| BaconError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| BaconError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| BaconError::Data(format!("{}: {e}", path.display())))
}
