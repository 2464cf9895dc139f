//! CSV task files, format descriptors and split manifests.
//!
//! Canonical task schema: `task_id,f0,...,f{n-1},label` with labels in
//! `{0,1}`. A format descriptor (`key=value` lines) maps other column
//! names onto these roles so externally produced files load unchanged:
//!
//! ```text
//! task_id=stream
//! label=member
//! features=ra,dec,pmra,pmdec,g,bp,rp
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::task::{MetaSplit, Task, TaskSplit};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FormatDescriptor {
    /// `None` uses a `task_id` column when present, else the file stem.
    pub task_column: Option<String>,
    pub label_column: Option<String>,
    /// `None` takes every column other than task id and label.
    pub feature_columns: Option<Vec<String>>,
}

impl FormatDescriptor {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut d = FormatDescriptor::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: "expected key=value".into(),
            })?;
            let v = v.trim().to_string();
            match k.trim() {
                "task_id" => d.task_column = Some(v),
                "label" => d.label_column = Some(v),
                "features" => {
                    d.feature_columns = Some(v.split(',').map(|s| s.trim().to_string()).collect())
                }
                other => {
                    return Err(Error::Parse {
                        path: origin.to_path_buf(),
                        line: i + 1,
                        message: format!("unknown descriptor key `{other}`"),
                    })
                }
            }
        }
        Ok(d)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

fn csv_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        Ok(files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

/// Loads tasks from a CSV file or a directory of CSV files. Tasks appear
/// in order of first occurrence (files in name order).
pub fn load_tasks(path: &Path, desc: &FormatDescriptor) -> Result<Vec<Task>> {
    let mut order: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, (Vec<f64>, Vec<bool>, usize)> = BTreeMap::new();
    let mut width: Option<usize> = None;
    for file in csv_files(path)? {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: file.clone(),
            line,
            message,
        };
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(&file)
            .map_err(|e| match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(&file, io),
                other => parse_err(1, format!("{other:?}")),
            })?;
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        let find = |name: &str| header.iter().position(|h| h == name);
        let label_name = desc.label_column.as_deref().unwrap_or("label");
        let label_col = find(label_name)
            .ok_or_else(|| parse_err(1, format!("missing label column `{label_name}`")))?;
        let task_col = match &desc.task_column {
            Some(name) => Some(
                find(name).ok_or_else(|| parse_err(1, format!("missing task column `{name}`")))?,
            ),
            None => find("task_id"),
        };
        let feature_cols: Vec<usize> = match &desc.feature_columns {
            Some(names) => names
                .iter()
                .map(|n| find(n).ok_or_else(|| parse_err(1, format!("missing feature column `{n}`"))))
                .collect::<Result<_>>()?,
            None => (0..header.len())
                .filter(|&c| c != label_col && Some(c) != task_col)
                .collect(),
        };
        if feature_cols.is_empty() {
            return Err(parse_err(1, "no feature columns".into()));
        }
        match width {
            None => width = Some(feature_cols.len()),
            Some(w) if w != feature_cols.len() => {
                return Err(parse_err(
                    1,
                    format!("{} feature columns, earlier files had {w}", feature_cols.len()),
                ))
            }
            _ => {}
        }
        let stem = file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        for rec in reader.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let id = match task_col {
                Some(c) => rec.get(c).unwrap_or_default().to_string(),
                None => stem.clone(),
            };
            let label = match rec.get(label_col) {
                Some("1") => true,
                Some("0") => false,
                other => {
                    return Err(parse_err(
                        line,
                        format!("label must be 0 or 1, got `{}`", other.unwrap_or("")),
                    ))
                }
            };
            let entry = rows.entry(id.clone()).or_insert_with(|| {
                order.push(id.clone());
                (Vec::new(), Vec::new(), line)
            });
            for &c in &feature_cols {
                let raw = rec.get(c).unwrap_or_default();
                let v: f64 = raw
                    .parse()
                    .map_err(|_| parse_err(line, format!("column `{}`: bad number `{raw}`", header[c])))?;
                if !v.is_finite() {
                    return Err(parse_err(line, format!("column `{}`: non-finite value", header[c])));
                }
                entry.0.push(v);
            }
            entry.1.push(label);
        }
    }
    let n = width.unwrap_or(0);
    order
        .into_iter()
        .map(|id| {
            let (data, labels, first_line) = rows.remove(&id).expect("recorded");
            let m = Matrix::from_vec(labels.len(), n, data)?;
            Task::new(id.clone(), m, labels).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: first_line,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn render_task_csv(task: &Task) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let n = task.feature_dim();
    let mut header = vec!["task_id".to_string()];
    header.extend((0..n).map(|j| format!("f{j}")));
    header.push("label".into());
    w.write_record(&header)?;
    let mut rec = Vec::with_capacity(n + 2);
    for (i, row) in task.features().iter_rows().enumerate() {
        rec.clear();
        rec.push(task.id.clone());
        rec.extend(row.iter().map(|v| v.to_string()));
        rec.push(if task.labels()[i] { "1" } else { "0" }.to_string());
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("utf-8"))
}

pub fn write_task_csv(task: &Task, path: &Path) -> Result<()> {
    std::fs::write(path, render_task_csv(task)?).map_err(|e| Error::io(path, e))
}

pub fn write_meta_split(split: &MetaSplit, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["task_id", "split"])?;
    for (name, ids) in [
        ("train", &split.train),
        ("validation", &split.validation),
        ("test", &split.test),
    ] {
        for id in ids {
            w.write_record([id.as_str(), name])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_meta_split(path: &Path) -> Result<MetaSplit> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut s = MetaSplit::default();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or_default().to_string();
        match rec.get(1) {
            Some("train") => s.train.push(id),
            Some("validation") => s.validation.push(id),
            Some("test") => s.test.push(id),
            other => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 2,
                    message: format!("unknown split `{}`", other.unwrap_or("")),
                })
            }
        }
    }
    s.validate()?;
    Ok(s)
}

pub fn render_task_split(split: &TaskSplit) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["part", "row"])?;
    for (name, rows) in split.parts() {
        for r in rows {
            w.write_record([name, &r.to_string()])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("utf-8"))
}

pub fn write_task_split(split: &TaskSplit, path: &Path) -> Result<()> {
    std::fs::write(path, render_task_split(split)?).map_err(|e| Error::io(path, e))
}

pub fn read_task_split(path: &Path) -> Result<TaskSplit> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut s = TaskSplit::default();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |m: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            message: m,
        };
        let row: usize = rec
            .get(1)
            .unwrap_or_default()
            .parse()
            .map_err(|_| bad("bad row index".into()))?;
        match rec.get(0) {
            Some("support") => s.support.push(row),
            Some("baseline_negatives") => s.baseline_negatives.push(row),
            Some("self_label_pool") => s.self_label_pool.push(row),
            Some("final_test") => s.final_test.push(row),
            other => return Err(bad(format!("unknown part `{}`", other.unwrap_or("")))),
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn toy_csv_builds_one_task() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "toy.csv", "task_id,f0,f1,label\na,1,2,1\na,3,4,0\na,5,6,0\n");
        let tasks = load_tasks(&p, &FormatDescriptor::default()).unwrap();
        assert_eq!(tasks.len(), 1);
        assert_eq!((tasks[0].k(), tasks[0].m(), tasks[0].feature_dim()), (1, 2, 2));
    }

    #[test]
    fn bad_label_names_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("task_id,f0,label\n");
        for i in 0..15 {
            body.push_str(&format!("a,{i},{}\n", i % 2));
        }
        body.push_str("a,99,2\n");
        let p = write(dir.path(), "bad.csv", &body);
        let err = load_tasks(&p, &FormatDescriptor::default()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 17),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_label_column_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "x.csv", "task_id,f0\na,1\n");
        let err = load_tasks(&p, &FormatDescriptor::default()).unwrap_err();
        assert!(err.to_string().contains("label"));
    }

    #[test]
    fn descriptor_maps_released_columns() {
        let dir = tempfile::tempdir().unwrap();
        let names = ["ra", "dec", "pmra", "pmdec", "g", "bp", "rp", "phi1", "phi2", "extra"];
        let mut body = format!("stream,{},member\n", names.join(","));
        for i in 0..4 {
            let vals: Vec<String> = (0..10).map(|j| format!("{}.5", i * 10 + j)).collect();
            body.push_str(&format!("gd1,{},{}\n", vals.join(","), (i == 0) as u8));
        }
        let p = write(dir.path(), "stream.csv", &body);
        let desc = FormatDescriptor::parse(
            &format!("task_id=stream\nlabel=member\nfeatures={}\n", names.join(",")),
            Path::new("d"),
        )
        .unwrap();
        let tasks = load_tasks(&p, &desc).unwrap();
        assert_eq!(tasks[0].id, "gd1");
        assert_eq!(tasks[0].feature_dim(), 10);
    }

    #[test]
    fn file_stem_names_task_without_id_column() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "s01.csv", "x,y,label\n1,2,1\n3,4,0\n");
        write(dir.path(), "s02.csv", "x,y,label\n1,2,1\n3,4,0\n");
        let tasks = load_tasks(dir.path(), &FormatDescriptor::default()).unwrap();
        let ids: Vec<&str> = tasks.iter().map(|t| t.id.as_str()).collect();
        assert_eq!(ids, ["s01", "s02"]);
    }

    #[test]
    fn task_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = Matrix::from_rows(&[[0.1, -2.5e-7], [3.0, 1.0 / 3.0]]).unwrap();
        let t = Task::new("z", f, vec![true, false]).unwrap();
        let p = dir.path().join("z.csv");
        write_task_csv(&t, &p).unwrap();
        let back = load_tasks(&p, &FormatDescriptor::default()).unwrap();
        assert_eq!(back[0], t);
    }

    #[test]
    fn split_manifests_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ms = MetaSplit {
            train: vec!["a".into(), "b".into()],
            validation: vec!["c".into()],
            test: vec!["d".into()],
        };
        let p = dir.path().join("splits.csv");
        write_meta_split(&ms, &p).unwrap();
        assert_eq!(read_meta_split(&p).unwrap(), ms);
        let ts = TaskSplit {
            support: vec![0, 4],
            baseline_negatives: vec![1],
            self_label_pool: vec![2],
            final_test: vec![3],
        };
        let p = dir.path().join("t.csv");
        write_task_split(&ts, &p).unwrap();
        assert_eq!(read_task_split(&p).unwrap(), ts);
    }
}
