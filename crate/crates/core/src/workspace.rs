//! Per-app workspace layout and resumable stage markers.
//!
//! ```text
//! <workdir>/<package>/
//!     raw/                 captured payloads (+ .capture.json metadata)
//!     dss.json
//!     policy.json  policy.txt  policy.pdf
//!     run-<k>/             preprocessed_*, findings_*, report_*
//!     audit/               model request/response log
//!     stages.json          stage markers
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::text::sha256_hex;

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn digest_file(path: &Path) -> Option<String> {
    fs::read(path).ok().map(|b| sha256_hex(&b))
}

/// Completion record of one stage. Carries digests only, never timestamps,
/// so re-running an up-to-date stage leaves `stages.json` byte-identical.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageMarker {
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct AppWorkspace {
    root: PathBuf,
}

impl AppWorkspace {
    pub fn new(workdir: &Path, package_name: &str) -> Self {
        AppWorkspace {
            root: workdir.join(package_name),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn raw_dir(&self) -> PathBuf {
        self.root.join("raw")
    }

    pub fn dss_path(&self) -> PathBuf {
        self.root.join("dss.json")
    }

    pub fn policy_meta_path(&self) -> PathBuf {
        self.root.join("policy.json")
    }

    pub fn policy_text_path(&self) -> PathBuf {
        self.root.join("policy.txt")
    }

    pub fn policy_pdf_path(&self) -> PathBuf {
        self.root.join("policy.pdf")
    }

    pub fn run_dir(&self, run_id: u32) -> PathBuf {
        self.root.join(format!("run-{run_id}"))
    }

    pub fn audit_dir(&self) -> PathBuf {
        self.root.join("audit")
    }

    fn stages_path(&self) -> PathBuf {
        self.root.join("stages.json")
    }

    pub fn markers(&self) -> BTreeMap<String, StageMarker> {
        fs::read(self.stages_path())
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .unwrap_or_default()
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root)
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/")
    }

    /// A stage is fresh when its marker's input digests equal `inputs` and
    /// every recorded output still exists with its recorded digest.
    pub fn is_fresh(&self, stage: &str, inputs: &BTreeMap<String, String>) -> bool {
        let markers = self.markers();
        let Some(m) = markers.get(stage) else {
            return false;
        };
        &m.inputs == inputs
            && m.outputs
                .iter()
                .all(|(rel, digest)| digest_file(&self.root.join(rel)).as_ref() == Some(digest))
    }

    pub fn mark(
        &self,
        stage: &str,
        inputs: BTreeMap<String, String>,
        outputs: &[PathBuf],
    ) -> std::io::Result<()> {
        let mut markers = self.markers();
        let outputs = outputs
            .iter()
            .map(|p| {
                let d = digest_file(p).ok_or_else(|| {
                    std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        format!("stage output {} missing", p.display()),
                    )
                })?;
                Ok((self.rel(p), d))
            })
            .collect::<std::io::Result<_>>()?;
        markers.insert(stage.to_string(), StageMarker { inputs, outputs });
        let mut json = serde_json::to_vec_pretty(&markers).expect("markers serialize");
        json.push(b'\n');
        write_atomic(&self.stages_path(), &json)
    }

    pub fn clear(&self, stage: &str) -> std::io::Result<()> {
        let mut markers = self.markers();
        if markers.remove(stage).is_some() {
            let mut json = serde_json::to_vec_pretty(&markers).expect("markers serialize");
            json.push(b'\n');
            write_atomic(&self.stages_path(), &json)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn staleness_follows_inputs_and_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let ws = AppWorkspace::new(dir.path(), "com.example.app");
        let out = ws.dss_path();
        write_atomic(&out, b"{}").unwrap();
        let inputs = BTreeMap::from([("payload".to_string(), "abc".to_string())]);
        assert!(!ws.is_fresh("scrape", &inputs));
        ws.mark("scrape", inputs.clone(), std::slice::from_ref(&out)).unwrap();
        assert!(ws.is_fresh("scrape", &inputs));

        let other = BTreeMap::from([("payload".to_string(), "abd".to_string())]);
        assert!(!ws.is_fresh("scrape", &other));

        fs::write(&out, b"{corrupt").unwrap();
        assert!(!ws.is_fresh("scrape", &inputs));
    }
}
