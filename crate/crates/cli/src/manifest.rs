//! Experiment manifests: an ordered list of CLI phases sharing one seed and
//! one base config. Every file a phase reads is hashed before it runs, and
//! files produced by earlier phases must still match their recorded hash.
//!
//! ```toml
//! id = "demo"
//! seed = 7
//!
//! [config.train]
//! max_steps = 100
//!
//! [[phase]]
//! name = "data"
//! command = "gen-synthetic"
//!
//! [[phase]]
//! name = "bpe"
//! command = "learn-bpe"
//! args = ["--input", "{out}/data/hmr.txt"]
//! config = { bpe = { merges = 50 } }
//! ```
//!
//! `{out}` expands to the run directory and `{manifest}` to the directory
//! holding the manifest. Each phase writes into `{out}/<name>`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Parser;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::cli::{Cli, Command};
use crate::commands;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub id: String,
    pub seed: u64,
    /// Base config table shared by all phases.
    #[serde(default)]
    pub config: toml::Table,
    #[serde(rename = "phase")]
    pub phases: Vec<Phase>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub name: String,
    pub command: String,
    #[serde(default)]
    pub args: Vec<String>,
    /// Merged over the base table.
    #[serde(default)]
    pub config: toml::Table,
    /// Replaces the manifest seed for this phase.
    pub seed: Option<u64>,
}

/// What `run.json` records for one phase.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub name: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub summary: Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    pub seed: u64,
    pub relm_threads: Option<String>,
    pub phases: Vec<PhaseRecord>,
}

/// Flags whose value is a file the phase reads.
const INPUT_FLAGS: &[&str] = &[
    "--input",
    "--hmr",
    "--lmr",
    "--dev",
    "--merges",
    "--vocab",
    "--checkpoint",
    "--hmr-vocab",
    "--lmr-vocab",
    "--corpus",
    "--dev-src",
    "--dev-ref",
    "--hmr-merges",
    "--lmr-merges",
    "--hyp",
    "--ref",
];

/// Flags the runner sets itself.
const RESERVED_FLAGS: &[&str] = &["--out", "--seed", "--config-file", "--config", "--manifest"];

pub fn load(path: &Path) -> CliResult<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let m: Manifest =
        toml::from_str(&text).map_err(|e| CliError::Manifest(format!("{}: {}", path.display(), e.message())))?;
    validate(&m)?;
    Ok(m)
}

fn validate(m: &Manifest) -> CliResult<()> {
    if m.phases.is_empty() {
        return Err(CliError::Manifest("no phases".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for p in &m.phases {
        let valid_name = !p.name.is_empty()
            && p.name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if !valid_name {
            return Err(CliError::Manifest(format!("phase name `{}` is not a plain identifier", p.name)));
        }
        if !seen.insert(p.name.as_str()) {
            return Err(CliError::Manifest(format!("duplicate phase `{}`", p.name)));
        }
        if p.command == "run-manifest" {
            return Err(CliError::Manifest("manifests cannot nest".into()));
        }
        if let Some(flag) = p.args.iter().find(|a| RESERVED_FLAGS.contains(&a.as_str())) {
            return Err(CliError::Manifest(format!("phase `{}` sets {flag}; the runner owns it", p.name)));
        }
    }
    Ok(())
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn merge_tables(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Files under `dir`, sorted, as paths relative to `root`.
fn list_files(root: &Path, dir: &Path, acc: &mut Vec<PathBuf>) -> CliResult<()> {
    let io = |source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(io)?
        .collect::<Result<Vec<_>, _>>()
        .map_err(io)?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            list_files(root, &p, acc)?;
        } else {
            acc.push(p.strip_prefix(root).unwrap_or(&p).to_path_buf());
        }
    }
    Ok(())
}

fn relative(root: &Path, p: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).to_string_lossy().into_owned()
}

pub fn run_manifest(path: &Path, out: &Path) -> CliResult<Value> {
    let manifest = load(path)?;
    let manifest_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    std::fs::create_dir_all(out.join("configs")).map_err(|source| CliError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    let out_str = out.to_string_lossy().into_owned();
    let manifest_str = manifest_dir.to_string_lossy().into_owned();
    // Hashes of every file an earlier phase produced, keyed by relative path.
    let mut produced: BTreeMap<String, String> = BTreeMap::new();
    let mut record = RunRecord {
        id: manifest.id.clone(),
        seed: manifest.seed,
        relm_threads: std::env::var("RELM_THREADS").ok(),
        phases: Vec::new(),
    };

    for phase in &manifest.phases {
        log::info!("phase {} ({})", phase.name, phase.command);
        let seed = phase.seed.unwrap_or(manifest.seed);
        let mut config = manifest.config.clone();
        merge_tables(&mut config, &phase.config);
        let config_path = out.join("configs").join(format!("{}.toml", phase.name));
        let config_text = toml::to_string(&config).map_err(|e| CliError::Manifest(e.to_string()))?;
        std::fs::write(&config_path, config_text).map_err(|source| CliError::Io {
            path: config_path.clone(),
            source,
        })?;

        let args: Vec<String> = phase
            .args
            .iter()
            .map(|a| a.replace("{out}", &out_str).replace("{manifest}", &manifest_str))
            .collect();
        let mut inputs = BTreeMap::new();
        inputs.insert(relative(out, &config_path), sha256_file(&config_path)?);
        for pair in args.windows(2) {
            if !INPUT_FLAGS.contains(&pair[0].as_str()) {
                continue;
            }
            let file = Path::new(&pair[1]);
            let key = relative(out, file);
            let hash = sha256_file(file)?;
            if file.starts_with(out) {
                let expected = produced.get(&key).ok_or_else(|| {
                    CliError::Manifest(format!(
                        "phase `{}` reads {key}, which no earlier phase produced",
                        phase.name
                    ))
                })?;
                if *expected != hash {
                    return Err(CliError::Hash {
                        path: file.to_path_buf(),
                        expected: expected.clone(),
                        found: hash,
                    });
                }
            }
            inputs.insert(key, hash);
        }

        let phase_out = out.join(&phase.name);
        let mut argv = vec!["relm".to_string(), phase.command.clone()];
        argv.extend(args);
        argv.extend([
            "--out".into(),
            phase_out.to_string_lossy().into_owned(),
            "--config-file".into(),
            config_path.to_string_lossy().into_owned(),
            "--seed".into(),
            seed.to_string(),
        ]);
        let cli = Cli::try_parse_from(&argv)
            .map_err(|e| CliError::Manifest(format!("phase `{}`: {}", phase.name, e.to_string().trim())))?;
        if matches!(cli.command, Command::RunManifest { .. }) {
            return Err(CliError::Manifest("manifests cannot nest".into()));
        }
        let mut summary = commands::run(&cli.command)?;
        strip_paths(&mut summary, &out_str);

        let mut outputs = BTreeMap::new();
        let mut files = Vec::new();
        if phase_out.is_dir() {
            list_files(out, &phase_out, &mut files)?;
        }
        // Explicit --output targets may live outside the phase directory.
        for pair in argv.windows(2) {
            if pair[0] == "--output" {
                let p = PathBuf::from(&pair[1]);
                files.push(p.strip_prefix(out).map(Path::to_path_buf).unwrap_or(p));
            }
        }
        for f in files {
            let hash = sha256_file(&out.join(&f))?;
            let key = f.to_string_lossy().into_owned();
            produced.insert(key.clone(), hash.clone());
            outputs.insert(key, hash);
        }
        let argv_rel = argv.iter().map(|a| a.replace(&out_str, "{out}")).collect();
        record.phases.push(PhaseRecord {
            name: phase.name.clone(),
            argv: argv_rel,
            seed,
            inputs,
            outputs,
            summary,
        });
        write_record(out, &record)?;
    }
    Ok(json!({
        "id": record.id,
        "phases": record.phases.len(),
        "record": out.join("run.json"),
    }))
}

fn write_record(out: &Path, record: &RunRecord) -> CliResult<()> {
    let path = out.join("run.json");
    let text = serde_json::to_string_pretty(record).expect("record serializes");
    std::fs::write(&path, text + "\n").map_err(|source| CliError::Io { path, source })
}

pub fn read_record(out: &Path) -> CliResult<RunRecord> {
    let path = out.join("run.json");
    let text = std::fs::read_to_string(&path).map_err(|source| CliError::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Manifest(format!("{}: {e}", path.display())))
}

/// Re-hashes every file recorded in `out/run.json` that lives in the run
/// directory.
pub fn verify_record(out: &Path) -> CliResult<()> {
    let record = read_record(out)?;
    for phase in &record.phases {
        for (file, expected) in phase.outputs.iter().chain(&phase.inputs) {
            let path = out.join(file);
            if Path::new(file).is_absolute() {
                continue;
            }
            let found = sha256_file(&path)?;
            if &found != expected {
                return Err(CliError::Hash {
                    path,
                    expected: expected.clone(),
                    found,
                });
            }
        }
    }
    Ok(())
}

/// Rewrites absolute run-directory paths inside a summary to `{out}`, so
/// the record does not depend on where the run lives.
fn strip_paths(v: &mut Value, out: &str) {
    match v {
        Value::String(s) if s.contains(out) => *s = s.replace(out, "{out}"),
        Value::Array(a) => a.iter_mut().for_each(|x| strip_paths(x, out)),
        Value::Object(o) => o.values_mut().for_each(|x| strip_paths(x, out)),
        _ => {}
    }
}
