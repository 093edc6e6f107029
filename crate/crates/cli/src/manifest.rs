use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::jobs::Job;
use crate::Failure;

pub const FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    /// FNV-1a 64 of the file contents, hex.
    pub fnv1a: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Fully resolved job, including every default.
    pub job: Job,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<PathBuf>,
}

pub fn hash_file(path: &Path) -> Result<String, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    Ok(format!("{:016x}", fnv1a(&bytes)))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl Manifest {
    pub fn new(job: &Job, outputs: Vec<PathBuf>) -> Result<Self, Failure> {
        let inputs = job
            .inputs()
            .into_iter()
            .map(|path| {
                let fnv1a = hash_file(&path)?;
                Ok(InputFile { path, fnv1a })
            })
            .collect::<Result<_, Failure>>()?;
        Ok(Self {
            tool: "kinesig".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: job.name().into(),
            job: job.clone(),
            inputs,
            outputs,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), Failure> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
    }

    /// Fails if any recorded input changed since the manifest was written.
    pub fn verify_inputs(&self) -> Result<(), Failure> {
        for input in &self.inputs {
            let now = hash_file(&input.path)?;
            if now != input.fnv1a {
                return Err(Failure::Invalid(format!(
                    "{} changed since the manifest was written",
                    input.path.display()
                )));
            }
        }
        Ok(())
    }
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

pub fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}
