//! Reading and writing run artifacts.
//!
//! JSON is pretty-printed with a trailing newline. CSV files carry a header
//! row and print floats in Rust's shortest round-trip form, so artifacts are
//! byte-for-byte reproducible and parse back to identical values.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use switchid_core::pendulum::{ExperimentTag, Sample, State, Trajectory};
use switchid_core::Class;

use crate::error::{CliError, CliResult};

/// Relative artifact paths inside the output directory.
pub mod paths {
    pub const DATA_DIR: &str = "data";
    pub const MANIFEST: &str = "data/manifest.json";
    pub const GMM: &str = "gmm.json";
    pub const LABELS: &str = "labels.csv";
    pub const TREE: &str = "tree.json";
    pub const MODEL: &str = "model.json";
    pub const ROLLOUT: &str = "rollout.csv";
    pub const ESTIMATES: &str = "estimates.csv";
    pub const PLOTS_DIR: &str = "plots";
    pub const SUMMARY: &str = "summary.json";
}

pub fn ensure_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::io(path, std::io::Error::other(e)))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn read_text(path: &Path, producer: &'static str) -> CliResult<String> {
    match fs::read_to_string(path) {
        Ok(t) => Ok(t),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(CliError::MissingArtifact { path: path.to_path_buf(), producer })
        }
        Err(e) => Err(CliError::io(path, e)),
    }
}

fn schema(path: &Path, message: impl ToString) -> CliError {
    CliError::SchemaMismatch { path: path.to_path_buf(), message: message.to_string() }
}

/// Reads a JSON artifact written by the verb `producer`.
pub fn read_json<T: DeserializeOwned>(path: &Path, producer: &'static str) -> CliResult<T> {
    let text = read_text(path, producer)?;
    serde_json::from_str(&text).map_err(|e| schema(path, e))
}

/// CSV table held as a header and string cells.
struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Table {
        Table { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    fn write(&self, path: &Path) -> CliResult<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| CliError::io(path, std::io::Error::other(e));
        w.write_record(&self.header).map_err(err)?;
        for r in &self.rows {
            w.write_record(r).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::io(path, std::io::Error::other(e.to_string())))?;
        write_bytes(path, &bytes)
    }

    fn read(path: &Path, producer: &'static str, header: &[&str]) -> CliResult<Table> {
        let text = read_text(path, producer)?;
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let found: Vec<String> = r.headers().map_err(|e| schema(path, e))?.iter().map(String::from).collect();
        if found != header {
            return Err(schema(path, format!("expected columns {header:?}, found {found:?}")));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| schema(path, e))?;
            rows.push(rec.iter().map(String::from).collect());
        }
        Ok(Table { header: found, rows })
    }
}

pub fn num(v: f64) -> String {
    format!("{v}")
}

fn parse_f64(path: &Path, line: usize, s: &str) -> CliResult<f64> {
    s.parse().map_err(|_| schema(path, format!("row {line}: {s:?} is not a number")))
}

fn parse_class(path: &Path, line: usize, s: &str) -> CliResult<Class> {
    s.parse().map_err(|_| schema(path, format!("row {line}: {s:?} is not a class label")))
}

const TRAJECTORY_HEADER: [&str; 6] = ["t", "phi1", "omega1", "omega2", "u", "class"];

/// One row per recorded state. Input and class of row `k` belong to the
/// transition `k → k+1`, so both are empty on the final row.
pub fn write_trajectory(path: &Path, t: &Trajectory) -> CliResult<()> {
    let mut table = Table::new(&TRAJECTORY_HEADER);
    for (k, s) in t.samples.iter().enumerate() {
        let x = s.state;
        table.push(vec![
            num(k as f64 * t.dt),
            num(x.phi1),
            num(x.omega1),
            num(x.omega2),
            num(s.input),
            s.true_class.to_string(),
        ]);
    }
    if let Some(last) = t.samples.last() {
        let x = last.next_state;
        table.push(vec![
            num(t.samples.len() as f64 * t.dt),
            num(x.phi1),
            num(x.omega1),
            num(x.omega2),
            String::new(),
            String::new(),
        ]);
    }
    table.write(path)
}

pub fn read_trajectory(path: &Path, dt: f64, tag: ExperimentTag) -> CliResult<Trajectory> {
    let table = Table::read(path, "simulate", &TRAJECTORY_HEADER)?;
    if table.rows.len() < 2 {
        return Err(schema(path, "a trajectory needs at least two rows"));
    }
    let n = table.rows.len() - 1;
    let mut states = Vec::with_capacity(n + 1);
    for (i, r) in table.rows.iter().enumerate() {
        states.push(State::new(parse_f64(path, i + 1, &r[1])?, parse_f64(path, i + 1, &r[2])?, parse_f64(path, i + 1, &r[3])?));
    }
    let mut samples = Vec::with_capacity(n);
    for (k, r) in table.rows[..n].iter().enumerate() {
        samples.push(Sample {
            state: states[k],
            input: parse_f64(path, k + 1, &r[4])?,
            next_state: states[k + 1],
            true_class: parse_class(path, k + 1, &r[5])?,
        });
    }
    if !table.rows[n][4].is_empty() || !table.rows[n][5].is_empty() {
        return Err(schema(path, "the final row must leave input and class empty"));
    }
    Ok(Trajectory { samples, dt, experiment_tag: tag })
}

/// One entry per experiment file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentEntry {
    pub file: String,
    pub tag: ExperimentTag,
    pub x0: [f64; 3],
    pub noise_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_seed: Option<u64>,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub dt: f64,
    pub noise_std: [f64; 3],
    pub params: switchid_core::pendulum::PendulumParams,
    pub training: Vec<ExperimentEntry>,
    pub holdout: Vec<ExperimentEntry>,
    pub training_samples: usize,
    pub holdout_samples: usize,
}

/// Training and held-out trajectories listed in a manifest.
pub struct Dataset {
    pub manifest: Manifest,
    pub training: Vec<Trajectory>,
    pub holdout: Vec<Trajectory>,
}

impl Dataset {
    pub fn read(out: &Path) -> CliResult<Dataset> {
        let manifest: Manifest = read_json(&out.join(paths::MANIFEST), "simulate")?;
        let load = |entries: &[ExperimentEntry]| -> CliResult<Vec<Trajectory>> {
            let data = out.join(paths::DATA_DIR);
            entries
                .iter()
                .map(|e| {
                    let t = read_trajectory(&data.join(&e.file), manifest.dt, e.tag)?;
                    if t.len() != e.samples {
                        return Err(schema(&data.join(&e.file), format!("expected {} samples, found {}", e.samples, t.len())));
                    }
                    Ok(t)
                })
                .collect()
        };
        let training = load(&manifest.training)?;
        let holdout = load(&manifest.holdout)?;
        Ok(Dataset { manifest, training, holdout })
    }
}

/// Cluster label and posteriors of every training sample, in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelRow {
    pub label: Class,
    pub posterior: [f64; 2],
}

const LABEL_HEADER: [&str; 4] = ["index", "label", "p1", "p2"];

pub fn write_labels(path: &Path, rows: &[LabelRow]) -> CliResult<()> {
    let mut table = Table::new(&LABEL_HEADER);
    for (i, r) in rows.iter().enumerate() {
        table.push(vec![i.to_string(), r.label.to_string(), num(r.posterior[0]), num(r.posterior[1])]);
    }
    table.write(path)
}

pub fn read_labels(path: &Path) -> CliResult<Vec<LabelRow>> {
    let table = Table::read(path, "cluster", &LABEL_HEADER)?;
    let mut out = Vec::with_capacity(table.rows.len());
    for (i, r) in table.rows.iter().enumerate() {
        if r[0].parse::<usize>().ok() != Some(i) {
            return Err(schema(path, format!("row {}: index {:?} out of sequence", i + 1, r[0])));
        }
        out.push(LabelRow {
            label: parse_class(path, i + 1, &r[1])?,
            posterior: [parse_f64(path, i + 1, &r[2])?, parse_f64(path, i + 1, &r[3])?],
        });
    }
    Ok(out)
}

/// Writes a table of preformatted cells; `header` names the columns of every row.
pub fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> CliResult<()> {
    let mut table = Table::new(header);
    rows.into_iter().for_each(|r| table.push(r));
    table.write(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use switchid_core::pendulum::{generate_dropdown, NoiseSpec, PendulumParams};

    #[test]
    fn trajectory_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = PendulumParams::default();
        let t = generate_dropdown(&p, State::new(2.0, 0.0, 0.0), 300, 0.005, &NoiseSpec::default_with_seed(4)).unwrap();
        let path = dir.path().join("t.csv");
        write_trajectory(&path, &t).unwrap();
        let back = read_trajectory(&path, 0.005, ExperimentTag::DropDown).unwrap();
        assert_eq!(back, t);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("t,phi1,omega1,omega2,u,class\n"));
        assert!(text.trim_end().ends_with(",,"));
    }

    #[test]
    fn labels_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            LabelRow { label: Class::C1, posterior: [0.75, 0.25] },
            LabelRow { label: Class::C2, posterior: [1e-300, 1.0] },
        ];
        let path = dir.path().join("labels.csv");
        write_labels(&path, &rows).unwrap();
        assert_eq!(read_labels(&path).unwrap(), rows);
    }

    #[test]
    fn missing_and_malformed_artifacts_are_distinguished() {
        let dir = tempfile::tempdir().unwrap();
        let missing = read_labels(&dir.path().join("labels.csv")).unwrap_err();
        assert!(matches!(missing, CliError::MissingArtifact { producer: "cluster", .. }));
        assert_eq!(missing.exit_code(), 3);

        let path = dir.path().join("labels.csv");
        fs::write(&path, "index,label\n0,C1\n").unwrap();
        assert!(matches!(read_labels(&path).unwrap_err(), CliError::SchemaMismatch { .. }));
        fs::write(&path, "index,label,p1,p2\n0,C3,0.5,0.5\n").unwrap();
        assert!(matches!(read_labels(&path).unwrap_err(), CliError::SchemaMismatch { .. }));

        let json = dir.path().join("tree.json");
        fs::write(&json, "{\"nodes\": 3}").unwrap();
        let err = read_json::<switchid_core::tree::DecisionTree>(&json, "classify").unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }
}
