//! Output-directory handling and config-file merging.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// A locked output directory. Creating it places a `.incomplete` marker
/// (exclusive create, so a second run targeting the same directory fails);
/// `finish` removes the marker once all outputs are written.
pub struct OutputDir {
    root: PathBuf,
    marker: PathBuf,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<OutputDir> {
        fs::create_dir_all(root)?;
        let marker = root.join(".incomplete");
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&marker)
        {
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::AlreadyExists,
                    format!(
                        "{} is locked by another run or holds an incomplete one; \
                         remove {} to retry",
                        root.display(),
                        marker.display()
                    ),
                )));
            }
            Err(e) => return Err(e.into()),
        }
        Ok(OutputDir {
            root: root.to_path_buf(),
            marker,
        })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Serialize the resolved config before any work happens.
    pub fn write_config_echo<T: Serialize>(&self, config: &T) -> Result<()> {
        let json = serde_json::to_string_pretty(config)
            .map_err(|e| Error::Config(format!("serialize config: {e}")))?;
        fs::write(self.join("config.echo.json"), json + "\n")?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let json = serde_json::to_string_pretty(value)
            .map_err(|e| Error::Config(format!("serialize {name}: {e}")))?;
        fs::write(self.join(name), json + "\n")?;
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        fs::remove_file(&self.marker)?;
        Ok(())
    }
}

/// Load a config file as the given partial-config type. `.json` and `.toml`
/// are supported; the echo written by a previous run loads directly.
pub fn load_config_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "json" => serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display()))),
        "toml" | "" => toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display()))),
        other => Err(Error::Config(format!(
            "unsupported config extension .{other} (expected .toml or .json)"
        ))),
    }
}

/// Largest-remainder apportionment of `total` into parts proportional to
/// `ratios`; the parts sum to `total` exactly.
pub fn apportion(total: usize, ratios: &[u64]) -> Result<Vec<usize>> {
    if ratios.is_empty() || ratios.iter().all(|&r| r == 0) {
        return Err(Error::InvalidArgument(
            "ratios must contain a nonzero entry".into(),
        ));
    }
    let sum: u64 = ratios.iter().sum();
    let exact: Vec<f64> = ratios
        .iter()
        .map(|&r| total as f64 * r as f64 / sum as f64)
        .collect();
    let mut counts: Vec<usize> = exact.iter().map(|&x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for k in 0..(total - assigned) {
        counts[order[k % order.len()]] += 1;
    }
    Ok(counts)
}
