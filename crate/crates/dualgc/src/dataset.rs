//! Dataset bundle I/O.
//!
//! A bundle is a directory holding `features.bin` (row-major N×D little-endian
//! f64) or `features.csv`, `edges.csv` (two integer columns, one undirected
//! edge per line), an optional `labels.csv` (one integer per line), and a
//! `meta` text file with `n`, `d`, `c` and an optional `name`. The
//! `convert-dataset` subcommand ingests the common public text layout
//! (`{name}.txt`, `{name}_graph.txt`, `{name}_label.txt`) into this shape.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read as _, Write as _};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::graph::Graph;

/// Parsed `meta` file.
#[derive(Debug, Clone)]
pub struct Meta {
    pub n: usize,
    pub d: usize,
    pub c: usize,
    pub name: Option<String>,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Parse a bundle's `meta` file.
pub fn read_meta(path: &Path) -> Result<Meta> {
    let text = fs::read_to_string(path)?;
    let (mut n, mut d, mut c, mut name) = (None, None, None, None);
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .or_else(|| line.split_once(':'))
            .ok_or_else(|| parse_err(path, idx + 1, "expected `key = value`"))?;
        let value = value.trim();
        match key.trim().to_ascii_lowercase().as_str() {
            "n" => n = Some(parse_usize(path, idx + 1, value)?),
            "d" => d = Some(parse_usize(path, idx + 1, value)?),
            "c" => c = Some(parse_usize(path, idx + 1, value)?),
            "name" => name = Some(value.to_string()),
            other => {
                return Err(parse_err(path, idx + 1, format!("unknown key `{other}`")));
            }
        }
    }
    match (n, d, c) {
        (Some(n), Some(d), Some(c)) => Ok(Meta { n, d, c, name }),
        _ => Err(Error::Bundle(format!(
            "{}: meta must define n, d and c",
            path.display()
        ))),
    }
}

fn parse_usize(path: &Path, line: usize, s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| parse_err(path, line, format!("`{s}` is not a nonnegative integer")))
}

fn split_fields(line: &str) -> impl Iterator<Item = &str> {
    line.split(|ch: char| ch == ',' || ch.is_whitespace())
        .filter(|f| !f.is_empty())
}

fn read_features_csv(path: &Path, n: usize, d: usize) -> Result<Array2<f64>> {
    let file = BufReader::new(fs::File::open(path)?);
    let mut x = Array2::zeros((n, d));
    let mut row = 0usize;
    for (idx, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if row >= n {
            return Err(parse_err(
                path,
                idx + 1,
                format!("more than {n} feature rows"),
            ));
        }
        let mut col = 0usize;
        for field in split_fields(&line) {
            if col >= d {
                return Err(parse_err(path, idx + 1, format!("more than {d} columns")));
            }
            x[[row, col]] = field
                .parse()
                .map_err(|_| parse_err(path, idx + 1, format!("`{field}` is not a number")))?;
            col += 1;
        }
        if col != d {
            return Err(parse_err(
                path,
                idx + 1,
                format!("expected {d} columns, got {col}"),
            ));
        }
        row += 1;
    }
    if row != n {
        return Err(Error::Bundle(format!(
            "{}: expected {n} feature rows, got {row}",
            path.display()
        )));
    }
    Ok(x)
}

fn read_features_bin(path: &Path, n: usize, d: usize) -> Result<Array2<f64>> {
    let mut file = fs::File::open(path)?;
    let expected = n * d * 8;
    let mut bytes = Vec::with_capacity(expected);
    file.read_to_end(&mut bytes)?;
    if bytes.len() != expected {
        return Err(Error::Bundle(format!(
            "{}: expected {expected} bytes for {n}x{d} f64, got {}",
            path.display(),
            bytes.len()
        )));
    }
    let mut x = Array2::zeros((n, d));
    for (i, chunk) in bytes.chunks_exact(8).enumerate() {
        x[[i / d, i % d]] = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
    }
    Ok(x)
}

fn read_edges(path: &Path) -> Result<Vec<(usize, usize)>> {
    let file = BufReader::new(fs::File::open(path)?);
    let mut edges = Vec::new();
    for (idx, line) in file.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = split_fields(line);
        let u = fields
            .next()
            .ok_or_else(|| parse_err(path, idx + 1, "missing source index"))?;
        let v = fields
            .next()
            .ok_or_else(|| parse_err(path, idx + 1, "missing target index"))?;
        if fields.next().is_some() {
            return Err(parse_err(path, idx + 1, "expected exactly two columns"));
        }
        edges.push((
            parse_usize(path, idx + 1, u)?,
            parse_usize(path, idx + 1, v)?,
        ));
    }
    Ok(edges)
}

/// Read one label per line; float-formatted integers are tolerated.
pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let file = BufReader::new(fs::File::open(path)?);
    let mut labels = Vec::new();
    for (idx, line) in file.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        // Tolerate float-formatted integer labels ("3.0") from public dumps.
        let value: f64 = line
            .parse()
            .map_err(|_| parse_err(path, idx + 1, format!("`{line}` is not a label")))?;
        if value < 0.0 || value.fract() != 0.0 {
            return Err(parse_err(
                path,
                idx + 1,
                format!("`{line}` is not a nonnegative integer"),
            ));
        }
        labels.push(value as usize);
    }
    Ok(labels)
}

/// Load a bundle directory into a validated graph.
pub fn load_bundle(dir: &Path) -> Result<Graph> {
    let meta = read_meta(&dir.join("meta"))?;
    let bin = dir.join("features.bin");
    let csv = dir.join("features.csv");
    let features = if bin.exists() {
        read_features_bin(&bin, meta.n, meta.d)?
    } else if csv.exists() {
        read_features_csv(&csv, meta.n, meta.d)?
    } else {
        return Err(Error::Bundle(format!(
            "{}: neither features.bin nor features.csv present",
            dir.display()
        )));
    };
    let edges = read_edges(&dir.join("edges.csv"))?;
    let labels_path = dir.join("labels.csv");
    let labels = if labels_path.exists() {
        let l = read_labels(&labels_path)?;
        if l.len() != meta.n {
            return Err(Error::LabelsLength {
                got: l.len(),
                expected: meta.n,
            });
        }
        Some(l)
    } else {
        None
    };
    Graph::from_matrix(features, &edges, labels, Some(meta.c))
}

/// Write a graph as a bundle directory. `binary` selects `features.bin`
/// over `features.csv`.
pub fn save_bundle(g: &Graph, dir: &Path, name: Option<&str>, binary: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut meta = String::new();
    meta.push_str(&format!("n = {}\n", g.num_nodes()));
    meta.push_str(&format!("d = {}\n", g.num_features()));
    meta.push_str(&format!("c = {}\n", g.num_classes()));
    if let Some(name) = name {
        meta.push_str(&format!("name = {name}\n"));
    }
    fs::write(dir.join("meta"), meta)?;

    if binary {
        let mut out = BufWriter::new(fs::File::create(dir.join("features.bin"))?);
        for v in g.features().iter() {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
    } else {
        let mut out = BufWriter::new(fs::File::create(dir.join("features.csv"))?);
        for row in g.features().rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        out.flush()?;
    }

    let mut out = BufWriter::new(fs::File::create(dir.join("edges.csv"))?);
    for (u, v) in g.edges() {
        writeln!(out, "{u},{v}")?;
    }
    out.flush()?;

    if let Some(labels) = g.labels() {
        let mut out = BufWriter::new(fs::File::create(dir.join("labels.csv"))?);
        for l in labels {
            writeln!(out, "{l}")?;
        }
        out.flush()?;
    }
    Ok(())
}

/// Convert the common public text layout into a bundle directory.
///
/// Expects `{name}.txt` (whitespace- or comma-separated feature rows),
/// `{name}_graph.txt` (edge list) and optionally `{name}_label.txt` under
/// `input_dir`. Self-loop lines in the public edge list are dropped with a
/// warning; duplicate and reversed edges merge into one undirected edge.
pub fn convert_public(input_dir: &Path, name: &str, out_dir: &Path) -> Result<()> {
    let feat_path = input_dir.join(format!("{name}.txt"));
    let graph_path = input_dir.join(format!("{name}_graph.txt"));
    let label_path = input_dir.join(format!("{name}_label.txt"));

    let text = fs::read_to_string(&feat_path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> = split_fields(line).map(str::parse).collect();
        rows.push(row.map_err(|_| parse_err(&feat_path, idx + 1, "bad feature value"))?);
    }

    let mut edges = read_edges(&graph_path)?;
    let before = edges.len();
    edges.retain(|&(u, v)| u != v);
    if edges.len() != before {
        log::warn!(
            "{}: dropped {} self-loop line(s)",
            graph_path.display(),
            before - edges.len()
        );
    }

    let labels = if label_path.exists() {
        Some(read_labels(&label_path)?)
    } else {
        None
    };

    let g = Graph::build(rows, &edges, labels, None)?;
    save_bundle(&g, out_dir, Some(name), true)
}
