//! Checkpoint directories: `manifest.json` plus one little-endian `f64` blob
//! per named array.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::nets::ParamStore;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub group: String,
    pub name: String,
    pub file: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub dtype: String,
    pub seed: u64,
    pub step: u64,
    /// Architecture and any other configuration needed to rebuild the model.
    pub config: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
    /// SHA-256 over every blob in manifest order.
    pub content_hash: String,
}

/// Named groups of parameter stores (for example `theta_e`, `phi`,
/// `expert3`).
pub type Groups = BTreeMap<String, ParamStore>;

fn blob_name(group: &str, name: &str) -> String {
    let clean: String = format!("{group}__{name}")
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{clean}.bin")
}

fn to_bytes(m: &Mat) -> Vec<u8> {
    m.iter().flat_map(|x| x.to_le_bytes()).collect()
}

/// Content hash of a set of groups, independent of where it is stored.
pub fn groups_hash(groups: &Groups) -> String {
    let mut h = Sha256::new();
    for (g, store) in groups {
        for (name, m) in store.iter() {
            h.update(blob_name(g, name).as_bytes());
            h.update((m.nrows() as u64).to_le_bytes());
            h.update((m.ncols() as u64).to_le_bytes());
            h.update(to_bytes(m));
        }
    }
    hex::encode(h.finalize())
}

pub fn save(
    dir: &Path,
    kind: &str,
    seed: u64,
    step: u64,
    config: serde_json::Value,
    groups: &Groups,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut arrays = Vec::new();
    for (g, store) in groups {
        for (name, m) in store.iter() {
            let file = blob_name(g, name);
            let path = dir.join(&file);
            let m = m.as_standard_layout();
            fs::write(&path, to_bytes(&m.to_owned())).map_err(|e| Error::io(&path, e))?;
            arrays.push(ArrayEntry {
                group: g.clone(),
                name: name.to_string(),
                file,
                shape: [m.nrows(), m.ncols()],
            });
        }
    }
    let manifest = Manifest {
        format_version: 1,
        kind: kind.to_string(),
        dtype: "f64".into(),
        seed,
        step,
        config,
        arrays,
        content_hash: groups_hash(groups),
    };
    let path = dir.join(MANIFEST);
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load(dir: &Path) -> Result<(Manifest, Groups)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.dtype != "f64" {
        return Err(Error::format(
            &path,
            format!("unsupported dtype {}", manifest.dtype),
        ));
    }
    let mut groups = Groups::new();
    for a in &manifest.arrays {
        let p = dir.join(&a.file);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let [r, c] = a.shape;
        if bytes.len() != r * c * 8 {
            return Err(Error::format(
                &p,
                format!("expected {} bytes, found {}", r * c * 8, bytes.len()),
            ));
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let m = Mat::from_shape_vec((r, c), vals).map_err(|e| Error::format(&p, e.to_string()))?;
        groups
            .entry(a.group.clone())
            .or_default()
            .insert(a.name.clone(), m)?;
    }
    if groups_hash(&groups) != manifest.content_hash {
        return Err(Error::format(&path, "content hash mismatch"));
    }
    Ok((manifest, groups))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = ParamStore::new();
        a.insert("enc0.w", array![[1.0, -2.5e-300], [f64::MIN_POSITIVE, 3.0]])
            .unwrap();
        a.insert("enc0.b", array![[0.1, 0.2]]).unwrap();
        let mut b = ParamStore::new();
        b.insert("x/y", array![[7.0]]).unwrap();
        let groups: Groups = [("theta_e".to_string(), a), ("phi".to_string(), b)]
            .into_iter()
            .collect();
        let m = save(
            dir.path(),
            "test",
            3,
            9,
            serde_json::json!({"k": 1}),
            &groups,
        )
        .unwrap();
        let (m2, g2) = load(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(g2, groups);
    }

    #[test]
    fn corrupted_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = ParamStore::new();
        a.insert("w", array![[1.0, 2.0]]).unwrap();
        let groups: Groups = [("g".to_string(), a)].into_iter().collect();
        let m = save(dir.path(), "test", 0, 0, serde_json::Value::Null, &groups).unwrap();
        let p = dir.path().join(&m.arrays[0].file);
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] ^= 1;
        fs::write(&p, bytes).unwrap();
        assert!(load(dir.path()).is_err());
    }
}
