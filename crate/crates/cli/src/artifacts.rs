use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use erspin_core::io::{self, Document, Provenance};
use erspin_core::SystemParams;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const TOOL: &str = "erspin";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Digest over the run configuration and the digests of its inputs.
pub fn config_digest<C: Serialize>(config: &C, inputs: &BTreeMap<String, String>) -> String {
    let v = serde_json::json!({ "config": config, "inputs": inputs });
    sha256_hex(v.to_string().as_bytes())
}

pub fn provenance<C: Serialize>(config: &C, inputs: BTreeMap<String, String>) -> Provenance {
    Provenance {
        tool: TOOL.into(),
        version: VERSION.into(),
        config_digest: config_digest(config, &inputs),
        input_digests: inputs,
        threads: rayon::current_num_threads(),
    }
}

pub fn write_document<T: Serialize, C: Serialize>(
    path: &Path,
    config: &C,
    inputs: BTreeMap<String, String>,
    data: &T,
) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::stage(format!("cannot create {}: {e}", dir.display())))?;
    }
    let doc = Document::new(provenance(config, inputs), config, data);
    io::write_json(path, &doc).map_err(|e| CliError::stage(e.to_string()))
}

pub fn read_value(path: &Path) -> Result<Value, CliError> {
    io::read_json(path).map_err(|e| CliError::input(e.to_string()))
}

/// A document whose embedded digest has been recomputed and checked.
pub fn read_document<T: DeserializeOwned>(path: &Path) -> Result<Document<T>, CliError> {
    let doc: Document<T> = io::read_json(path).map_err(|e| CliError::input(e.to_string()))?;
    doc.check_units(path).map_err(|e| CliError::input(e.to_string()))?;
    let recomputed = config_digest(&doc.config, &doc.provenance.input_digests);
    if recomputed != doc.provenance.config_digest {
        return Err(CliError::input(format!(
            "{}: config digest mismatch (declared {}, recomputed {recomputed})",
            path.display(),
            doc.provenance.config_digest
        )));
    }
    Ok(doc)
}

/// Reads either a bare payload or a document wrapping it.
pub fn read_payload<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let v = read_value(path)?;
    if v.get("provenance").is_some() && v.get("data").is_some() {
        return read_document::<T>(path).map(|d| d.data);
    }
    serde_json::from_value(v).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

/// System parameters from a bare file, a parameter document, or a fit result.
pub fn read_params(path: &Path) -> Result<SystemParams, CliError> {
    let v = read_value(path)?;
    let data = if v.get("provenance").is_some() {
        read_document::<Value>(path)?.data
    } else {
        v
    };
    let inner = data.get("params").cloned().unwrap_or(data);
    let sys: SystemParams =
        serde_json::from_value(inner).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    sys.validate().map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    Ok(sys)
}

pub fn inputs(entries: &[(&str, &Path)]) -> Result<BTreeMap<String, String>, CliError> {
    entries
        .iter()
        .map(|(k, p)| Ok((k.to_string(), file_digest(p)?)))
        .collect()
}
