use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::hex_digest;
use super::{stages, ExperimentConfig, PipelineError, Stage};

pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const LOCK_FILE: &str = ".lock";
pub const RUN_FILE: &str = "run.json";
/// Root under which runs land when neither `--out` nor the config names a directory.
pub const OUTPUT_ENV: &str = "FUSIONDX_OUT";

/// Stored once per output directory; later stages must present the same hash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub config_hash: String,
    pub config: String,
}

/// One line of the run ledger. `config` holds the full TOML, so a stage can
/// be re-executed from the ledger alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub started_unix_ms: u128,
    pub wall_seconds: f64,
    pub inputs: Vec<String>,
    /// Relative path to hex SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub config: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSummary {
    pub stage: Stage,
    pub outputs: BTreeMap<String, String>,
    pub wall_seconds: f64,
}

/// `--out`, else the config's `output_dir`, else `$FUSIONDX_OUT/<name>`,
/// else `runs/<name>`, where `<name>` is the config file stem.
pub fn resolve_output_dir(
    cli: Option<&Path>,
    config: &ExperimentConfig,
    config_path: &Path,
    env_root: Option<&str>,
) -> PathBuf {
    if let Some(p) = cli {
        return p.to_path_buf();
    }
    if let Some(p) = &config.paths.output_dir {
        return p.clone();
    }
    let name = config_path.file_stem().map(|s| s.to_os_string()).unwrap_or_else(|| "run".into());
    match env_root.filter(|r| !r.is_empty()) {
        Some(root) => Path::new(root).join(name),
        None => Path::new("runs").join(name),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Owns the lock file for the duration of a stage.
struct Lock(PathBuf);

impl Lock {
    fn acquire(root: &Path) -> Result<Lock, PipelineError> {
        let path = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Lock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Locked(path)),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// File access for one stage: reads fail with the missing path, writes go
/// through a temp file and rename and are digested for the ledger.
pub(crate) struct StageContext<'a> {
    pub config: &'a ExperimentConfig,
    pub root: PathBuf,
    pub outputs: BTreeMap<String, String>,
}

impl<'a> StageContext<'a> {
    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn read(&self, rel: &str) -> Result<Vec<u8>, PipelineError> {
        read_file(&self.path(rel))
    }

    pub fn read_json<T: serde::de::DeserializeOwned>(&self, rel: &str) -> Result<T, PipelineError> {
        serde_json::from_slice(&self.read(rel)?).map_err(|e| PipelineError::Data(format!("{rel}: {e}")))
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let path = self.path(rel);
        write_atomic(&path, bytes)?;
        self.outputs.insert(rel.to_string(), hex_digest(bytes));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), PipelineError> {
        let text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::Data(e.to_string()))?;
        self.write(rel, text.as_bytes())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, PipelineError> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => PipelineError::MissingArtifact(path.to_path_buf()),
        _ => io_err(path)(e),
    })
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn check_run_state(root: &Path, config: &ExperimentConfig) -> Result<(), PipelineError> {
    let hash = config.hash();
    let path = root.join(RUN_FILE);
    if path.exists() {
        let state: RunState = serde_json::from_slice(&read_file(&path)?)
            .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
        if state.config_hash != hash {
            return Err(PipelineError::ConfigMismatch {
                expected: state.config_hash,
                found: hash,
            });
        }
        return Ok(());
    }
    let state = RunState {
        config_hash: hash,
        config: config.to_toml(),
    };
    write_atomic(&path, serde_json::to_string_pretty(&state).expect("state serializes").as_bytes())
}

/// Runs one stage in `out`, holding the directory lock, and appends a ledger line.
pub fn run_stage(config: &ExperimentConfig, stage: Stage, out: &Path) -> Result<StageSummary, PipelineError> {
    config.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let _lock = Lock::acquire(out)?;
    check_run_state(out, config)?;
    for rel in stage.inputs() {
        let p = out.join(rel);
        if !p.is_file() {
            return Err(PipelineError::MissingArtifact(p));
        }
    }
    let started_unix_ms = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let clock = Instant::now();
    let mut ctx = StageContext {
        config,
        root: out.to_path_buf(),
        outputs: BTreeMap::new(),
    };
    log::info!("stage {stage} starting in {}", out.display());
    stages::execute(stage, &mut ctx)?;
    let wall_seconds = clock.elapsed().as_secs_f64();
    let entry = LedgerEntry {
        stage: stage.name().to_string(),
        config_hash: config.hash(),
        seed: config.seed,
        started_unix_ms,
        wall_seconds,
        inputs: stage.inputs().iter().map(|s| s.to_string()).collect(),
        outputs: ctx.outputs.clone(),
        config: config.to_toml(),
    };
    let ledger = out.join(LEDGER_FILE);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&ledger)
        .map_err(io_err(&ledger))?;
    let line = serde_json::to_string(&entry).expect("ledger entry serializes");
    writeln!(f, "{line}").map_err(io_err(&ledger))?;
    log::info!("stage {stage} wrote {} files in {wall_seconds:.1}s", ctx.outputs.len());
    Ok(StageSummary {
        stage,
        outputs: ctx.outputs,
        wall_seconds,
    })
}

/// Every stage in order.
pub fn run_pipeline(config: &ExperimentConfig, out: &Path) -> Result<Vec<StageSummary>, PipelineError> {
    Stage::ALL.iter().map(|&s| run_stage(config, s, out)).collect()
}
