//! Reading scenario, robot and EMLA files, and writing result artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dynamics::RobotModel;
use crate::emla::{write_map_csv, EfficiencyMap, EmlaUnit};
use crate::error::{Error, Result};
use crate::nlp::{OptimizationResult, PointRecord};
use crate::scenario::{Scenario, ScenarioSpec};

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Pretty JSON with a trailing newline. Struct fields keep declaration order.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Raw scenario inputs before the problem is built.
#[derive(Debug, Clone)]
pub struct ScenarioInputs {
    pub path: PathBuf,
    pub spec: ScenarioSpec,
    pub robot: RobotModel<f64>,
    pub units: Vec<EmlaUnit<f64>>,
}

impl ScenarioInputs {
    pub fn build(&self) -> Result<Scenario> {
        self.spec.build(self.robot.clone(), self.units.clone())
    }
}

/// Reads a scenario and the robot and EMLA files it names (relative to the
/// scenario's directory).
pub fn load_inputs(path: &Path) -> Result<ScenarioInputs> {
    let spec: ScenarioSpec = read_json(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let robot = read_json(&dir.join(&spec.robot))?;
    let units = spec
        .emla
        .iter()
        .map(|p| read_json(&dir.join(p)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScenarioInputs {
        path: path.to_path_buf(),
        spec,
        robot,
        units,
    })
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    load_inputs(path)?.build()
}

fn num(v: f64) -> String {
    format!("{v:.8e}")
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => io_err(path, source),
        other => Error::Parse {
            path: path.display().to_string(),
            message: format!("{other:?}"),
        },
    }
}

/// Header of the per-point series table for `n` joints and `na` actuators.
pub fn series_header(n: usize, na: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    for name in ["theta", "theta_dot", "theta_ddot"] {
        h.extend((0..n).map(|i| format!("{name}_{i}")));
    }
    h.extend(["tcp_x", "tcp_z", "ref_x", "ref_z"].map(String::from));
    for name in ["stroke", "force", "velocity", "mech_power", "efficiency", "input_power"] {
        h.extend((0..na).map(|i| format!("{name}_{i}")));
    }
    h.push("valid".into());
    h
}

pub fn write_series_csv(path: &Path, series: &[PointRecord]) -> Result<()> {
    let n = series.first().map_or(0, |r| r.theta.len());
    let na = series.first().map_or(0, |r| r.force.len());
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(series_header(n, na)).map_err(|e| csv_err(path, e))?;
    for r in series {
        let mut row = vec![num(r.t)];
        for v in [&r.theta, &r.theta_dot, &r.theta_ddot] {
            row.extend(v.iter().map(|x| num(*x)));
        }
        row.extend([r.tcp[0], r.tcp[1], r.reference[0], r.reference[1]].map(num));
        for v in [
            &r.stroke,
            &r.force,
            &r.velocity,
            &r.mech_power,
            &r.efficiency,
            &r.input_power,
        ] {
            row.extend(v.iter().map(|x| num(*x)));
        }
        row.push(if r.valid { "1" } else { "0" }.into());
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// One row per solver iterate: objective, merit, best merit so far and violation.
pub fn write_trace_csv(path: &Path, result: &OptimizationResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["iteration", "objective", "merit", "best_merit", "violation"])
        .map_err(|e| csv_err(path, e))?;
    for (k, f) in result.objective_trace.iter().enumerate() {
        let pick = |v: &Vec<f64>| v.get(k).copied().map(num).unwrap_or_default();
        w.write_record([
            k.to_string(),
            num(*f),
            pick(&result.merit_trace),
            pick(&result.best_merit_trace),
            pick(&result.violation_trace),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn write_map_file(path: &Path, map: &EfficiencyMap<f64>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    write_map_csv(map, std::io::BufWriter::new(file)).map_err(|e| csv_err(path, e))
}

/// Files written by one run, relative to the output directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub result: Option<String>,
    pub series: Vec<String>,
    pub maps: Vec<String>,
    pub log: String,
}

impl RunArtifacts {
    pub fn files(&self) -> impl Iterator<Item = &String> {
        self.result
            .iter()
            .chain(&self.series)
            .chain(&self.maps)
            .chain(std::iter::once(&self.log))
    }

    /// Checks that every declared file exists and parses (JSON or RFC-4180 CSV
    /// with a consistent column count).
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for name in self.files() {
            let path = dir.join(name);
            if name.ends_with(".json") {
                read_json::<serde_json::Value>(&path)?;
            } else if name.ends_with(".csv") {
                let mut r = csv::Reader::from_path(&path).map_err(|e| csv_err(&path, e))?;
                for rec in r.records() {
                    rec.map_err(|e| csv_err(&path, e))?;
                }
            } else if !path.is_file() {
                return Err(io_err(&path, std::io::ErrorKind::NotFound.into()));
            }
        }
        Ok(())
    }
}

/// Line-oriented run log.
#[derive(Debug, Default)]
pub struct RunLog {
    lines: Vec<String>,
}

impl RunLog {
    pub fn line(&mut self, text: impl Into<String>) {
        self.lines.push(text.into());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.lines.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| io_err(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emla::build_efficiency_map;
    use crate::emla::tests::{reference_drive, reference_pmsm};
    use crate::nlp::tests::pendulum_problem;

    #[test]
    fn json_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let unit = EmlaUnit {
            name: "a".into(),
            pmsm: reference_pmsm(),
            drivetrain: reference_drive(),
        };
        let p = dir.path().join("u.json");
        write_json(&p, &unit).unwrap();
        let back: EmlaUnit<f64> = read_json(&p).unwrap();
        assert_eq!(back, unit);

        fs::write(&p, "{ not json").unwrap();
        assert!(matches!(read_json::<EmlaUnit<f64>>(&p), Err(Error::Parse { .. })));
        let missing = dir.path().join("none.json");
        assert!(matches!(read_json::<EmlaUnit<f64>>(&missing), Err(Error::Io { .. })));
    }

    #[test]
    fn series_and_map_csv_parse_back() {
        let dir = tempfile::tempdir().unwrap();
        let (p, z) = pendulum_problem(12, 8);
        let e = p.evaluate(&z).unwrap();
        write_series_csv(&dir.path().join("s.csv"), &e.points).unwrap();
        let map = build_efficiency_map(&reference_pmsm(), &reference_drive(), 5, 4).unwrap();
        write_map_file(&dir.path().join("m.csv"), &map).unwrap();
        let mut log = RunLog::default();
        log.line("done");
        log.write(&dir.path().join("run.log")).unwrap();
        let art = RunArtifacts {
            result: None,
            series: vec!["s.csv".into()],
            maps: vec!["m.csv".into()],
            log: "run.log".into(),
        };
        art.verify(dir.path()).unwrap();

        let mut r = csv::Reader::from_path(dir.path().join("s.csv")).unwrap();
        assert_eq!(r.headers().unwrap().len(), series_header(1, 1).len());
        let rows: Vec<_> = r.records().map(|x| x.unwrap()).collect();
        assert_eq!(rows.len(), 13);
        let t: f64 = rows[12][0].parse().unwrap();
        assert_eq!(t, e.points[12].t);
        let mut r = csv::Reader::from_path(dir.path().join("m.csv")).unwrap();
        assert_eq!(r.records().count(), 20);

        let bad = RunArtifacts {
            log: "absent.log".into(),
            ..art
        };
        assert!(bad.verify(dir.path()).is_err());
    }
}
