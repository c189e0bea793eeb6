use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use super::FlowDataset;
use crate::error::{Error, Result};
use crate::graph::{load_graph, save_graph};
use crate::numerics::NdArray;

pub const GRAPH_FILE: &str = "graph.txt";
pub const FLOWS_FILE: &str = "flows.txt";
pub const TIMESTAMPS_FILE: &str = "timestamps.txt";

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_row(line: &str, width: usize, origin: &str, lineno: usize) -> Result<Vec<f64>> {
    let cells: Vec<&str> = line.split(',').map(str::trim).collect();
    if cells.len() != width {
        return Err(Error::parse(
            origin,
            lineno,
            format!("expected {width} values, found {}", cells.len()),
        ));
    }
    cells
        .iter()
        .map(|c| {
            c.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(origin, lineno, format!("not a finite number: {c:?}")))
        })
        .collect()
}

/// Parses a flow file: header `T N C`, then `T·N` rows of `C` comma-separated values.
pub fn parse_flows(text: &str, origin: &str, expected_nodes: Option<usize>) -> Result<NdArray> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(origin, 1, "missing header \"T N C\""))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::parse(origin, 1, format!("malformed header {header:?}")))?;
    let [t, n, c] = dims[..] else {
        return Err(Error::parse(origin, 1, format!("malformed header {header:?}")));
    };
    if t == 0 || n == 0 || c == 0 {
        return Err(Error::parse(origin, 1, "header dimensions must be ≥ 1"));
    }
    if let Some(expected) = expected_nodes {
        if expected != n {
            return Err(Error::parse(
                origin,
                1,
                format!("header declares {n} nodes but the graph has {expected}"),
            ));
        }
    }
    let rows: Vec<(usize, &str)> = lines.filter(|(_, l)| !l.trim().is_empty()).collect();
    if rows.len() != t * n {
        return Err(Error::Data(format!(
            "{origin}: expected {} data rows (T·N = {t}·{n}), found {}",
            t * n,
            rows.len()
        )));
    }
    let mut data = Vec::with_capacity(t * n * c);
    for (i, line) in rows {
        data.extend(parse_row(line, c, origin, i + 1)?);
    }
    NdArray::new(&[t, n, c], data)
}

/// `{:?}` prints the shortest string that parses back to the same `f64`.
pub fn format_flows(flows: &NdArray) -> Result<String> {
    let [t, n, c] = flows.shape()[..] else {
        return Err(Error::shape(format!("flows must be [T, N, C], got {:?}", flows.shape())));
    };
    let mut out = format!("{t} {n} {c}\n");
    for row in flows.data().chunks_exact(c) {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v:?}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn load_flows(path: impl AsRef<Path>, expected_nodes: Option<usize>) -> Result<NdArray> {
    let path = path.as_ref();
    parse_flows(&read(path)?, &path.display().to_string(), expected_nodes)
}

pub fn save_flows(path: impl AsRef<Path>, flows: &NdArray) -> Result<()> {
    write(path.as_ref(), &format_flows(flows)?)
}

/// One `time_of_day,day_of_week` row per step.
pub fn parse_timestamps(text: &str, origin: &str, expected_steps: Option<usize>) -> Result<NdArray> {
    let mut data = Vec::new();
    let mut count = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = parse_row(line, 2, origin, i + 1)?;
        if let Some(v) = row.iter().find(|v| !(0.0..1.0).contains(*v)) {
            return Err(Error::parse(origin, i + 1, format!("{v} is outside [0, 1)")));
        }
        data.extend(row);
        count += 1;
    }
    if let Some(expected) = expected_steps {
        if expected != count {
            return Err(Error::Data(format!(
                "{origin}: expected {expected} timestamp rows, found {count}"
            )));
        }
    }
    NdArray::new(&[count, 2], data)
}

pub fn format_timestamps(ts: &NdArray) -> Result<String> {
    if ts.ndim() != 2 || ts.shape()[1] != 2 {
        return Err(Error::shape(format!("timestamps must be [T, 2], got {:?}", ts.shape())));
    }
    let mut out = String::new();
    for row in ts.data().chunks_exact(2) {
        writeln!(out, "{:?},{:?}", row[0], row[1]).unwrap();
    }
    Ok(out)
}

pub fn load_timestamps(path: impl AsRef<Path>, expected_steps: Option<usize>) -> Result<NdArray> {
    let path = path.as_ref();
    parse_timestamps(&read(path)?, &path.display().to_string(), expected_steps)
}

pub fn save_timestamps(path: impl AsRef<Path>, ts: &NdArray) -> Result<()> {
    write(path.as_ref(), &format_timestamps(ts)?)
}

/// Loads `graph.txt`, `flows.txt` and `timestamps.txt` from a directory.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<FlowDataset> {
    let dir = dir.as_ref();
    let graph = load_graph(dir.join(GRAPH_FILE))?;
    let flows = load_flows(dir.join(FLOWS_FILE), Some(graph.num_nodes()))?;
    let ts = load_timestamps(dir.join(TIMESTAMPS_FILE), Some(flows.shape()[0]))?;
    FlowDataset::new(flows, ts, Arc::new(graph))
}

pub fn save_dataset(dir: impl AsRef<Path>, ds: &FlowDataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_graph(dir.join(GRAPH_FILE), ds.graph())?;
    save_flows(dir.join(FLOWS_FILE), ds.flows())?;
    save_timestamps(dir.join(TIMESTAMPS_FILE), ds.timestamps())
}
