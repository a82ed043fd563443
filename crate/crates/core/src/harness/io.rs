//! CSV input and output plus atomic file writes.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::algorithms::RunTrace;
use crate::error::{Error, Result};
use crate::expfam::{GlobalNaturalParams, Layout};
use crate::harness::data::LabeledDataset;

pub const TRACE_HEADER: &str = "iter,algo,mean_kl,std_kl,consensus_disagreement,elapsed_ms";

/// Writes `contents` to a temporary file next to `path`, then renames it into place.
pub fn atomic_write(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(contents).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_label(field: &str) -> Option<usize> {
    field.parse::<usize>().ok().or_else(|| {
        let x: f64 = field.parse().ok()?;
        (x >= 0.0 && x.fract() == 0.0 && x < u32::MAX as f64).then_some(x as usize)
    })
}

/// Parses a numeric CSV with one point per row.
///
/// A first row containing a non-numeric field is a header. Header columns
/// named `label` and `node` carry labels and node assignments; everything
/// else is a feature. Without a header the last column is the label when
/// `has_labels` is set. Points without a node column all go to node 0.
pub fn parse_csv_dataset(text: &str, origin: &str, has_labels: bool) -> Result<LabeledDataset> {
    let perr = |line: usize, column: usize, message: String| Error::Parse { path: origin.to_string(), line, column, message };
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut records = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            perr(line, 0, e.to_string())
        })?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        records.push(rec);
    }
    let first = records.first().ok_or_else(|| perr(1, 0, "no data rows".into()))?;
    let header = first.iter().any(|f| f.parse::<f64>().is_err());
    let width = first.len();
    let (label_col, node_col) = if header {
        let find = |name: &str| first.iter().position(|f| f.eq_ignore_ascii_case(name));
        (find("label"), find("node"))
    } else {
        (has_labels.then(|| width - 1), None)
    };
    if has_labels && label_col.is_none() {
        return Err(perr(1, 0, "header has no `label` column".into()));
    }
    let feature_cols: Vec<usize> = (0..width).filter(|c| Some(*c) != label_col && Some(*c) != node_col).collect();
    if feature_cols.is_empty() {
        return Err(perr(1, 0, "no feature columns".into()));
    }
    let rows = &records[usize::from(header)..];
    let mut values = Vec::with_capacity(rows.len() * feature_cols.len());
    let mut labels = Vec::new();
    let mut node_of = Vec::new();
    for rec in rows {
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != width {
            return Err(perr(line, rec.len().min(width) + 1, format!("expected {width} fields, found {}", rec.len())));
        }
        for &c in &feature_cols {
            let x: f64 = rec[c].parse().map_err(|_| perr(line, c + 1, format!("`{}` is not a number", &rec[c])))?;
            if !x.is_finite() {
                return Err(perr(line, c + 1, format!("`{}` is not finite", &rec[c])));
            }
            values.push(x);
        }
        if let Some(c) = label_col {
            labels.push(parse_label(&rec[c]).ok_or_else(|| perr(line, c + 1, format!("`{}` is not a class label", &rec[c])))?);
        }
        if let Some(c) = node_col {
            node_of.push(parse_label(&rec[c]).ok_or_else(|| perr(line, c + 1, format!("`{}` is not a node index", &rec[c])))?);
        }
    }
    let points = DMatrix::from_row_slice(rows.len(), feature_cols.len(), &values);
    if node_col.is_none() {
        node_of = vec![0; rows.len()];
    }
    let n_nodes = node_of.iter().max().map_or(1, |m| m + 1);
    LabeledDataset::new(points, label_col.map(|_| labels), node_of, n_nodes)
}

pub fn load_csv_dataset(path: &Path, has_labels: bool) -> Result<LabeledDataset> {
    parse_csv_dataset(&read_to_string(path)?, &path.display().to_string(), has_labels)
}

/// CSV with header `x0,...,x{D-1}[,label],node`; values use shortest round-trip formatting.
pub fn dataset_to_csv(data: &LabeledDataset) -> String {
    let mut out = String::new();
    let mut header: Vec<String> = (0..data.dim()).map(|c| format!("x{c}")).collect();
    if data.labels.is_some() {
        header.push("label".into());
    }
    header.push("node".into());
    out.push_str(&header.join(","));
    out.push('\n');
    for r in 0..data.len() {
        let mut fields: Vec<String> = data.points.row(r).iter().map(|x| format!("{x:?}")).collect();
        if let Some(l) = &data.labels {
            fields.push(l[r].to_string());
        }
        fields.push(data.node_of[r].to_string());
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn write_csv(path: &Path, data: &LabeledDataset) -> Result<()> {
    atomic_write(path, dataset_to_csv(data).as_bytes())
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:?}"))
}

/// Trace rows for several runs. Wall time is written only when `timing` is
/// set, so that reruns produce identical bytes; otherwise the column is 0.
pub fn trace_csv(traces: &[RunTrace], timing: bool) -> String {
    let mut out = format!("{TRACE_HEADER}\n");
    for trace in traces {
        for rec in &trace.records {
            let elapsed = if timing { format!("{:?}", rec.elapsed_ms) } else { "0".into() };
            writeln!(
                out,
                "{},{},{},{},{:?},{}",
                rec.iter,
                trace.algo,
                opt(rec.mean_kl),
                opt(rec.std_kl),
                rec.consensus_disagreement,
                elapsed
            )
            .unwrap();
        }
    }
    out
}

/// One row per node: `node,phi_0,...,phi_{L-1}` in the flattened layout.
pub fn final_state_csv(phis: &[&GlobalNaturalParams]) -> String {
    let len = phis.first().map_or(0, |p| p.layout().len());
    let mut out = String::from("node");
    for c in 0..len {
        write!(out, ",phi_{c}").unwrap();
    }
    out.push('\n');
    for (i, phi) in phis.iter().enumerate() {
        out.push_str(&i.to_string());
        for x in phi.to_flat().iter() {
            write!(out, ",{x:?}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn parse_final_state(text: &str, origin: &str, layout: Layout) -> Result<Vec<GlobalNaturalParams>> {
    let perr = |line: usize, column: usize, message: String| Error::Parse { path: origin.to_string(), line, column, message };
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != layout.len() + 1 {
            return Err(perr(idx + 1, 1, format!("expected {} fields, found {}", layout.len() + 1, fields.len())));
        }
        let flat = fields[1..]
            .iter()
            .enumerate()
            .map(|(c, f)| f.trim().parse::<f64>().map_err(|_| perr(idx + 1, c + 2, format!("`{f}` is not a number"))))
            .collect::<Result<Vec<f64>>>()?;
        out.push(GlobalNaturalParams::from_flat(layout, &flat)?);
    }
    if out.is_empty() {
        return Err(perr(1, 0, "no node rows".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithms::{AlgoKind, IterRecord};
    use crate::harness::data::{partition_to_nodes, PartitionPolicy};

    #[test]
    fn parses_headerless_with_labels() {
        let d = parse_csv_dataset("1.0,2.0,0\n3.5,-1e-3,1\n", "a.csv", true).unwrap();
        assert_eq!(d.points, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.5, -1e-3]));
        assert_eq!(d.labels, Some(vec![0, 1]));
        let d = parse_csv_dataset("1.0,2.0,0\n", "a.csv", false).unwrap();
        assert_eq!(d.dim(), 3);
        assert!(d.labels.is_none());
    }

    #[test]
    fn parse_errors_carry_position() {
        let err = parse_csv_dataset("1,2,0\n3,x,1\n", "bad.csv", true).unwrap_err();
        assert!(err.to_string().starts_with("bad.csv:2:2:"), "{err}");
        let err = parse_csv_dataset("1,2,0\n3,1\n", "bad.csv", true).unwrap_err();
        assert!(err.to_string().starts_with("bad.csv:2:"), "{err}");
        let err = parse_csv_dataset("1,2,0.5\n", "bad.csv", true).unwrap_err();
        assert!(err.to_string().contains("class label"), "{err}");
        assert!(parse_csv_dataset("", "e.csv", false).is_err());
    }

    #[test]
    fn roundtrip_preserves_values_and_assignment() {
        let pts = DMatrix::from_row_slice(4, 2, &[0.1, 1.0 / 3.0, -2.5e-300, 7.0, 1e10, 2.0f64.sqrt(), -0.0, 5.0]);
        let base = LabeledDataset::new(pts, Some(vec![1, 0, 2, 1]), vec![0; 4], 1).unwrap();
        let data = partition_to_nodes(&base, 2, PartitionPolicy::UniformRandom, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/data.csv");
        write_csv(&path, &data).unwrap();
        let back = load_csv_dataset(&path, true).unwrap();
        assert_eq!(back.labels, data.labels);
        assert_eq!(back.node_of, data.node_of);
        assert!((back.points - &data.points).amax() <= 1e-15);
    }

    #[test]
    fn trace_csv_layout() {
        let rec = |iter, kl: Option<f64>| IterRecord {
            iter,
            node_kl: None,
            mean_kl: kl,
            std_kl: kl.map(|k| k / 2.0),
            consensus_disagreement: 0.25,
            primal_residual: 0.0,
            elapsed_ms: 12.5,
        };
        let t = RunTrace { algo: AlgoKind::Dsvb, records: vec![rec(1, Some(3.0)), rec(2, None)] };
        assert_eq!(
            trace_csv(std::slice::from_ref(&t), false),
            format!("{TRACE_HEADER}\n1,dsvb,3.0,1.5,0.25,0\n2,dsvb,,,0.25,0\n")
        );
        assert!(trace_csv(&[t], true).contains(",12.5\n"));
    }

    #[test]
    fn final_state_roundtrip() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let phis: Vec<GlobalNaturalParams> = (0..3)
            .map(|_| crate::expfam::hyper_to_natural(&crate::testutil::random_hyper(&mut rng, 2, 2)).unwrap())
            .collect();
        let text = final_state_csv(&phis.iter().collect::<Vec<_>>());
        let back = parse_final_state(&text, "f.csv", phis[0].layout()).unwrap();
        assert_eq!(back, phis);
        assert!(parse_final_state(&text, "f.csv", Layout::new(3, 2)).is_err());
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
