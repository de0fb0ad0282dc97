//! Single-file checkpoints: one JSON preamble line followed by named tensor
//! records.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Parameters, VstPose};
use crate::container::{decode_record, encode_record};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const FORMAT: &str = "vstpose-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Preamble {
    format: String,
    version: u32,
    config: ModelConfig,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: usize,
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint<S> {
    pub config: ModelConfig,
    /// Free-form metadata (training state counters and the like).
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor<S>>,
}

pub fn save_checkpoint<'a, S: Scalar>(
    path: &Path,
    config: &ModelConfig,
    meta: serde_json::Value,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<S>)>,
) -> Result<()> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let preamble = Preamble {
        format: FORMAT.into(),
        version: VERSION,
        config: config.clone(),
        meta,
        tensors: tensors.len(),
    };
    let mut buf = serde_json::to_vec(&preamble).map_err(|e| Error::format(path, e.to_string()))?;
    buf.push(b'\n');
    for (name, t) in tensors {
        encode_record(&mut buf, Some(name), t);
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    // write then rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    use std::io::BufRead;
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let pre: Preamble =
        serde_json::from_str(line.trim_end()).map_err(|e| Error::format(path, format!("bad preamble: {e}")))?;
    if pre.format != FORMAT {
        return Err(Error::format(path, format!("not a checkpoint (format {:?})", pre.format)));
    }
    if pre.version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {}", pre.version)));
    }
    let mut tensors = BTreeMap::new();
    for i in 0..pre.tensors {
        let (name, t) = decode_record::<S>(&mut r, path)?
            .ok_or_else(|| Error::format(path, format!("expected {} tensors, found {i}", pre.tensors)))?;
        let name = name.ok_or_else(|| Error::format(path, format!("tensor record {i} has no name")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::format(path, format!("duplicate tensor {name}")));
        }
    }
    if decode_record::<S>(&mut r, path)?.is_some() {
        return Err(Error::format(path, "more tensor records than declared"));
    }
    Ok(Checkpoint { config: pre.config, meta: pre.meta, tensors })
}

impl<S: Scalar> VstPose<S> {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.config, serde_json::Value::Null, self.params.iter().map(|(k, v)| (k.as_str(), v)))
    }

    /// Loads a checkpoint written by [`VstPose::save`] or by training. Extra
    /// optimizer tensors (prefixed `adam.`) are ignored.
    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint::<S>(path)?;
        ck.config.validate()?;
        let params: BTreeMap<_, _> = ck.tensors.into_iter().filter(|(k, _)| !k.starts_with("adam.")).collect();
        let params = Parameters::from_map(&ck.config, params).map_err(|e| Error::format(path, e.to_string()))?;
        Ok(VstPose { config: ck.config, params })
    }
}
