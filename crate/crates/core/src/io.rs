//! File formats: CSV matrices, vectors and labels, ASCII OFF meshes, GMM
//! JSON, and JSON results.
//!
//! CSV files are plain comma-separated decimals with an optional header row.
//! A first row is a header when any field fails to parse as a number.
//! Floats are written in Rust's shortest round-trip form, so every written
//! file reads back bit-identically.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spaces::{bures_wasserstein, Gaussian2};
use crate::types::{DistanceMatrix, MmSpace, SimplexWeights};

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn csv_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(open(path)?);
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::parse(path, e.to_string()))?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        rows.push(record.iter().map(str::to_owned).collect());
    }
    Ok(rows)
}

fn drop_header(rows: &mut Vec<Vec<String>>) {
    if rows
        .first()
        .is_some_and(|r| r.iter().any(|f| f.parse::<f64>().is_err()))
    {
        rows.remove(0);
    }
}

/// Reads a rectangular matrix of floats.
pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let mut rows = csv_rows(path)?;
    drop_header(&mut rows);
    let cols = rows.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(rows.len() * cols);
    for (r, row) in rows.iter().enumerate() {
        if row.len() != cols {
            return Err(Error::parse(
                path,
                format!("row {} has {} fields, expected {cols}", r + 1, row.len()),
            ));
        }
        for (c, field) in row.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::parse(
                    path,
                    format!("row {}, column {}: {field:?} is not a number", r + 1, c + 1),
                )
            })?;
            data.push(v);
        }
    }
    Array2::from_shape_vec((rows.len(), cols), data).map_err(|e| Error::parse(path, e.to_string()))
}

/// Writes a matrix, one row per line, optionally preceded by a header.
pub fn write_matrix_csv(path: impl AsRef<Path>, m: &Array2<f64>, header: Option<&[&str]>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    if let Some(h) = header {
        writeln!(w, "{}", h.join(",")).map_err(io)?;
    }
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(f64::to_string).collect();
        writeln!(w, "{}", line.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a vector stored as one column or one row.
pub fn read_vector_csv(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let m = read_matrix_csv(path)?;
    match m.dim() {
        (_, 1) => Ok(m.column(0).to_vec()),
        (1, _) => Ok(m.row(0).to_vec()),
        (r, c) => Err(Error::parse(
            path,
            format!("expected a single row or column, found {r}x{c}"),
        )),
    }
}

/// Writes a vector as one column under `header`.
pub fn write_vector_csv(path: impl AsRef<Path>, v: &[f64], header: &str) -> Result<()> {
    let m = Array1::from(v.to_vec()).insert_axis(ndarray::Axis(1));
    write_matrix_csv(path, &m, Some(&[header]))
}

/// Reads probability weights; they must already sum to one.
pub fn read_weights_csv(path: impl AsRef<Path>) -> Result<SimplexWeights> {
    SimplexWeights::new(read_vector_csv(path)?)
}

/// Reads a symmetric distance matrix.
pub fn read_distance_csv(path: impl AsRef<Path>) -> Result<DistanceMatrix> {
    DistanceMatrix::new(read_matrix_csv(path)?)
}

/// Reads integer class labels, one per line (or one row).
pub fn read_labels_csv(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let mut rows = csv_rows(path)?;
    drop_header(&mut rows);
    let fields: Vec<&String> = if rows.len() == 1 {
        rows[0].iter().collect()
    } else {
        rows.iter()
            .map(|r| match r.as_slice() {
                [f] => Ok(f),
                _ => Err(Error::parse(path, "labels must form a single column or row")),
            })
            .collect::<Result<_>>()?
    };
    fields
        .into_iter()
        .map(|f| {
            f.parse::<usize>()
                .map_err(|_| Error::parse(path, format!("label {f:?} is not a non-negative integer")))
        })
        .collect()
}

/// Writes integer labels as one column.
pub fn write_labels_csv(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "label").map_err(io)?;
    for l in labels {
        writeln!(w, "{l}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// A triangle mesh read from an OFF file.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    /// `n x 3` vertex coordinates.
    pub vertices: Array2<f64>,
    /// Triangles; polygons are fan-triangulated on load.
    pub faces: Vec<[usize; 3]>,
}

/// Reads an ASCII OFF mesh. `#` starts a comment; the counts may share the
/// header line.
pub fn read_off(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let reader = BufReader::new(open(path)?);
    let mut tokens: Vec<Vec<String>> = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let content = line.split('#').next().unwrap_or("").trim();
        if !content.is_empty() {
            tokens.push(content.split_whitespace().map(str::to_owned).collect());
        }
    }
    let mut lines = tokens.into_iter();
    let mut first = lines.next().ok_or_else(|| Error::parse(path, "empty file"))?;
    if first.first().map(String::as_str) != Some("OFF") {
        return Err(Error::parse(path, "missing OFF header"));
    }
    first.remove(0);
    let counts = if first.is_empty() {
        lines
            .next()
            .ok_or_else(|| Error::parse(path, "missing vertex/face counts"))?
    } else {
        first
    };
    let num = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::parse(path, format!("{what} {s:?} is not a count")))
    };
    if counts.len() < 2 {
        return Err(Error::parse(path, "expected vertex and face counts"));
    }
    let nv = num(&counts[0], "vertex count")?;
    let nf = num(&counts[1], "face count")?;
    let mut vertices = Array2::zeros((nv, 3));
    for i in 0..nv {
        let line = lines
            .next()
            .ok_or_else(|| Error::parse(path, format!("expected {nv} vertices, found {i}")))?;
        if line.len() < 3 {
            return Err(Error::parse(path, format!("vertex {i} has fewer than 3 coordinates")));
        }
        for d in 0..3 {
            vertices[[i, d]] = line[d]
                .parse()
                .map_err(|_| Error::parse(path, format!("vertex {i}: {:?} is not a number", line[d])))?;
        }
    }
    let mut faces = Vec::with_capacity(nf);
    for f in 0..nf {
        let line = lines
            .next()
            .ok_or_else(|| Error::parse(path, format!("expected {nf} faces, found {f}")))?;
        let k = num(&line[0], "face size")?;
        if k < 3 || line.len() < k + 1 {
            return Err(Error::parse(path, format!("face {f} is not a polygon")));
        }
        let idx: Vec<usize> = line[1..=k]
            .iter()
            .map(|s| num(s, "vertex index"))
            .collect::<Result<_>>()?;
        if let Some(&bad) = idx.iter().find(|&&v| v >= nv) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: nv,
                context: "OFF face",
            });
        }
        for t in 1..k - 1 {
            faces.push([idx[0], idx[t], idx[t + 1]]);
        }
    }
    Ok(Mesh { vertices, faces })
}

/// Writes an ASCII OFF mesh.
pub fn write_off(path: impl AsRef<Path>, mesh: &Mesh) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "OFF\n{} {} 0", mesh.vertices.nrows(), mesh.faces.len()).map_err(io)?;
    for v in mesh.vertices.rows() {
        writeln!(w, "{} {} {}", v[0], v[1], v[2]).map_err(io)?;
    }
    for f in &mesh.faces {
        writeln!(w, "3 {} {} {}", f[0], f[1], f[2]).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// A 2d Gaussian mixture given as `{weights, means, covariances}` arrays.
#[derive(Debug, Clone, Serialize)]
pub struct Gmm {
    pub weights: SimplexWeights,
    pub components: Vec<Gaussian2>,
}

#[derive(Deserialize)]
struct GmmFile {
    weights: Vec<f64>,
    means: Vec<[f64; 2]>,
    covariances: Vec<[[f64; 2]; 2]>,
}

impl Gmm {
    /// The mixture as an mm-space over its components with Bures-Wasserstein distances.
    pub fn to_mm_space(&self) -> Result<MmSpace> {
        let c = &self.components;
        let dist = DistanceMatrix::from_fn(
            c.len(),
            |i, j| if i == j { 0.0 } else { bures_wasserstein(&c[i], &c[j]) },
        )?;
        MmSpace::new(dist, self.weights.clone())
    }
}

/// Reads a GMM JSON file.
pub fn read_gmm_json(path: impl AsRef<Path>) -> Result<Gmm> {
    let path = path.as_ref();
    let raw: GmmFile =
        serde_json::from_reader(BufReader::new(open(path)?)).map_err(|e| Error::parse(path, e.to_string()))?;
    let n = raw.weights.len();
    for (len, what) in [(raw.means.len(), "means"), (raw.covariances.len(), "covariances")] {
        if len != n {
            return Err(Error::parse(
                path,
                format!("{what} has {len} entries but weights has {n}"),
            ));
        }
    }
    let components = raw
        .means
        .into_iter()
        .zip(raw.covariances)
        .map(|(m, c)| Gaussian2::new(m, c))
        .collect::<Result<_>>()?;
    Ok(Gmm {
        weights: SimplexWeights::new(raw.weights)?,
        components,
    })
}

/// Writes any serializable value as pretty JSON.
pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::parse(path, e.to_string()))?;
    writeln!(w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn dir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn matrix_with_and_without_header() {
        let d = dir();
        let p = d.path().join("m.csv");
        std::fs::write(&p, "a,b\n1,2\n3.5,-4e-3\n").unwrap();
        assert_eq!(read_matrix_csv(&p).unwrap(), array![[1.0, 2.0], [3.5, -4e-3]]);
        std::fs::write(&p, "1, 2\n3,4\n").unwrap();
        assert_eq!(read_matrix_csv(&p).unwrap(), array![[1.0, 2.0], [3.0, 4.0]]);
        std::fs::write(&p, "1,2\n3\n").unwrap();
        assert_eq!(read_matrix_csv(&p).unwrap_err().kind(), "Parse");
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = read_matrix_csv("/nonexistent/dist.csv").unwrap_err();
        assert_eq!(err.kind(), "Io");
        assert!(err.to_string().contains("/nonexistent/dist.csv"));
    }

    #[test]
    fn labels_and_weights() {
        let d = dir();
        let p = d.path().join("l.csv");
        write_labels_csv(&p, &[0, 2, 1]).unwrap();
        assert_eq!(read_labels_csv(&p).unwrap(), vec![0, 2, 1]);
        std::fs::write(&p, "0,1,1\n").unwrap();
        assert_eq!(read_labels_csv(&p).unwrap(), vec![0, 1, 1]);
        std::fs::write(&p, "x\n-1\n").unwrap();
        assert_eq!(read_labels_csv(&p).unwrap_err().kind(), "Parse");
        let w = d.path().join("w.csv");
        write_vector_csv(&w, &[0.25, 0.75], "weight").unwrap();
        assert_eq!(read_weights_csv(&w).unwrap().as_slice(), &[0.25, 0.75]);
        write_vector_csv(&w, &[0.25, 0.5], "weight").unwrap();
        assert_eq!(read_weights_csv(&w).unwrap_err().kind(), "WeightsNotSimplex");
    }

    #[test]
    fn off_round_trip_and_polygons() {
        let d = dir();
        let p = d.path().join("m.off");
        std::fs::write(&p, "OFF # square\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n").unwrap();
        let mesh = read_off(&p).unwrap();
        assert_eq!(mesh.faces, vec![[0, 1, 2], [0, 2, 3]]);
        let q = d.path().join("n.off");
        write_off(&q, &mesh).unwrap();
        assert_eq!(read_off(&q).unwrap(), mesh);
        std::fs::write(&p, "OFF\n2 1 0\n0 0 0\n1 0 0\n3 0 1 5\n").unwrap();
        assert_eq!(read_off(&p).unwrap_err().kind(), "IndexOutOfRange");
        std::fs::write(&p, "PLY\n").unwrap();
        assert_eq!(read_off(&p).unwrap_err().kind(), "Parse");
    }

    #[test]
    fn gmm_json() {
        let d = dir();
        let p = d.path().join("g.json");
        std::fs::write(
            &p,
            r#"{"weights":[0.5,0.5],"means":[[0,0],[3,4]],"covariances":[[[1,0],[0,1]],[[1,0],[0,1]]]}"#,
        )
        .unwrap();
        let g = read_gmm_json(&p).unwrap();
        let x = g.to_mm_space().unwrap();
        assert!((x.dist.matrix()[[0, 1]] - 5.0).abs() < 1e-12);
        std::fs::write(&p, r#"{"weights":[1],"means":[[0,0]],"covariances":[[[1,2],[2,1]]]}"#).unwrap();
        assert_eq!(read_gmm_json(&p).unwrap_err().kind(), "NotPositiveDefinite");
        std::fs::write(&p, r#"{"weights":[1],"means":[],"covariances":[]}"#).unwrap();
        assert_eq!(read_gmm_json(&p).unwrap_err().kind(), "Parse");
    }

    proptest! {
        #[test]
        fn matrix_csv_round_trips_bitwise(
            rows in 1usize..6, cols in 1usize..6,
            seed in proptest::collection::vec(-1e300..1e300f64, 36),
        ) {
            let m = Array2::from_shape_fn((rows, cols), |(i, j)| seed[i * 6 + j] * 1e-290f64.powi((i % 2) as i32));
            let d = dir();
            let p = d.path().join("m.csv");
            write_matrix_csv(&p, &m, Some(&vec!["c"; cols])).unwrap();
            let back = read_matrix_csv(&p).unwrap();
            prop_assert!(m.iter().zip(back.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
