use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Map, Value};
use tokscope::analysis::Assertion;
use tokscope::language::{TeacherProcess, Token};
use tokscope::model::TransformerParams;

/// Why a run stopped early. Each variant maps to one exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad configuration, unreadable or malformed input.
    Config { message: String, path: Option<PathBuf> },
    /// An experiment invariant did not hold.
    Assertion { invariant: String, detail: String },
    /// The computation itself failed.
    Runtime { message: String },
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Failure::Config {
            message: message.into(),
            path: None,
        }
    }

    pub fn at(path: &Path, message: impl fmt::Display) -> Self {
        Failure::Config {
            message: format!("{}: {message}", path.display()),
            path: Some(path.to_path_buf()),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config { .. } => 2,
            Failure::Assertion { .. } => 3,
            Failure::Runtime { .. } => 1,
        }
    }

    pub fn to_json(&self) -> Value {
        let body = match self {
            Failure::Config { message, path } => json!({
                "kind": "config",
                "message": message,
                "path": path.as_ref().map(|p| p.display().to_string()),
            }),
            Failure::Assertion { invariant, detail } => json!({
                "kind": "assertion",
                "invariant": invariant,
                "message": detail,
            }),
            Failure::Runtime { message } => json!({"kind": "runtime", "message": message}),
        };
        json!({ "error": body })
    }
}

impl From<tokscope::Error> for Failure {
    fn from(e: tokscope::Error) -> Self {
        use tokscope::Error as E;
        match e {
            E::NonFinite(_) | E::ZeroProbabilityPath(_) | E::Infeasible(_) => {
                Failure::Runtime { message: e.to_string() }
            }
            other => Failure::config(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, Failure>;

/// Reads a JSON config file into an object. A top-level `seed` is split off.
pub fn read_config(path: &Path) -> CliResult<(Map<String, Value>, Option<u64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::at(path, e))?;
    let mut obj = match serde_json::from_str::<Value>(&text).map_err(|e| Failure::at(path, e))? {
        Value::Object(m) => m,
        _ => return Err(Failure::at(path, "config must be a JSON object")),
    };
    let seed = match obj.remove("seed") {
        None => None,
        Some(v) => Some(
            v.as_u64()
                .ok_or_else(|| Failure::at(path, "seed must be an unsigned 64-bit integer"))?,
        ),
    };
    Ok((obj, seed))
}

/// Defaults, then the config file, then explicit flags.
pub fn merge<C, F>(file: &Map<String, Value>, flags: &F) -> CliResult<C>
where
    C: Serialize + DeserializeOwned,
    F: Serialize,
{
    let bad = |e: serde_json::Error| Failure::config(format!("config: {e}"));
    let base: C = serde_json::from_value(Value::Object(file.clone())).map_err(bad)?;
    let mut obj = match serde_json::to_value(&base).map_err(bad)? {
        Value::Object(m) => m,
        _ => unreachable!("configs serialize to objects"),
    };
    if let Value::Object(f) = serde_json::to_value(flags).map_err(bad)? {
        for (k, v) in f {
            if !v.is_null() {
                obj.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(obj)).map_err(bad)
}

/// A lambda that may be `inf`, written as the string `"inf"` in JSON.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lambda(pub f64);

impl FromStr for Lambda {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "inf" | "Inf" | "infinity" => Ok(Lambda(f64::INFINITY)),
            t => t.parse().map(Lambda).map_err(|e| format!("bad lambda {t:?}: {e}")),
        }
    }
}

impl Serialize for Lambda {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0.is_infinite() && self.0 > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Lambda {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(x) => Ok(Lambda(x)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Comma-separated token list such as `0,1,2`.
pub fn parse_tokens(s: &str) -> CliResult<Vec<Token>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|e| Failure::config(format!("bad token {t:?}: {e}")))
        })
        .collect()
}

pub fn load_teacher(path: &Path) -> CliResult<TeacherProcess> {
    if !path.exists() {
        return Err(Failure::at(path, "file not found"));
    }
    TeacherProcess::load(path).map_err(|e| Failure::at(path, e))
}

pub fn load_model(path: &Path) -> CliResult<TransformerParams> {
    if !path.exists() {
        return Err(Failure::at(path, "file not found"));
    }
    TransformerParams::load(path).map_err(|e| Failure::at(path, e))
}

pub fn require<'a>(path: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Failure::config(format!("--{flag} is required")))
}

/// A curve for `report` to draw from the result points.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Plot {
    pub name: String,
    pub x: String,
    pub y: Vec<String>,
}

impl Plot {
    pub fn new(name: &str, x: &str, y: &[&str]) -> Self {
        Plot {
            name: name.into(),
            x: x.into(),
            y: y.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Everything a subcommand hands back for persistence.
pub struct Outcome {
    pub config: Value,
    pub summary: Value,
    pub points: Vec<Value>,
    pub assertions: Vec<Assertion>,
    pub plots: Vec<Plot>,
    /// Extra files, written verbatim.
    pub files: Vec<(String, String)>,
}

impl Outcome {
    pub fn new(config: impl Serialize, summary: Value) -> CliResult<Self> {
        Ok(Outcome {
            config: serde_json::to_value(config).map_err(|e| Failure::config(e.to_string()))?,
            summary,
            points: Vec::new(),
            assertions: Vec::new(),
            plots: Vec::new(),
            files: Vec::new(),
        })
    }

    pub fn file(&mut self, name: &str, contents: String) {
        self.files.push((name.into(), contents));
    }

    pub fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.assertions.push(Assertion::new(name, passed, detail));
    }
}

pub fn to_points<T: Serialize>(items: &[T]) -> Vec<Value> {
    items
        .iter()
        .map(|x| serde_json::to_value(x).expect("plain data serializes"))
        .collect()
}

/// Settings shared by every subcommand.
pub struct Run {
    pub command: &'static str,
    pub out: PathBuf,
    pub seed: u64,
    pub threads: usize,
    started: f64,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("plain data serializes");
    s.push('\n');
    s
}

impl Run {
    pub fn new(command: &'static str, out: PathBuf, seed: u64, threads: usize) -> Self {
        Run {
            command,
            out,
            seed,
            threads,
            started: unix_now(),
        }
    }

    fn write(&self, name: &str, contents: &str) -> CliResult<()> {
        let path = self.out.join(name);
        std::fs::write(&path, contents).map_err(|e| Failure::at(&path, e))
    }

    /// Writes all artifacts, prints the summary and reports the first
    /// failed assertion.
    pub fn finish(&self, outcome: Outcome) -> CliResult<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| Failure::at(&self.out, e))?;
        self.write(
            "config.json",
            &pretty(&json!({"seed": self.seed, "config": outcome.config})),
        )?;
        for (name, contents) in &outcome.files {
            self.write(name, contents)?;
        }
        let result = json!({
            "command": self.command,
            "config": outcome.config,
            "seed": self.seed,
            "summary": outcome.summary,
            "points": outcome.points,
            "assertions": outcome.assertions,
            "plots": outcome.plots,
        });
        self.write("result.json", &pretty(&result))?;
        let meta = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "threads": self.threads,
            "started_unix": self.started,
            "finished_unix": unix_now(),
        });
        self.write("meta.json", &pretty(&meta))?;
        println!(
            "{}",
            serde_json::to_string(&outcome.summary).expect("plain data serializes")
        );
        match outcome.assertions.iter().find(|a| !a.passed) {
            Some(a) => Err(Failure::Assertion {
                invariant: a.name.clone(),
                detail: a.detail.clone(),
            }),
            None => Ok(()),
        }
    }
}

/// Rows of a CSV table. Floats print in shortest round-trip form.
pub fn csv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}
