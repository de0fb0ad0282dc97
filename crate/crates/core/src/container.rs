//! Self-describing binary tensor container.
//!
//! A record is one UTF-8 header line followed by the row-major little-endian
//! payload:
//!
//! ```text
//! {"dtype":"f32","shape":[3,90,5]}\n<payload bytes>
//! ```
//!
//! Standalone tensor files hold exactly one record. Checkpoints chain several
//! named records (`{"dtype":...,"shape":...,"name":"..."}`) behind a JSON
//! preamble line.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    shape: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    name: Option<String>,
}

/// Appends one record to `out`.
pub fn encode_record<S: Scalar>(out: &mut Vec<u8>, name: Option<&str>, tensor: &Tensor<S>) {
    let header = Header { dtype: S::DTYPE.to_string(), shape: tensor.shape().to_vec(), name: name.map(str::to_string) };
    out.extend_from_slice(serde_json::to_string(&header).expect("header serializes").as_bytes());
    out.push(b'\n');
    out.reserve(tensor.len() * S::BYTES);
    for &v in tensor.data() {
        v.write_le(out);
    }
}

/// Reads one record, converting the payload to `S` if the stored dtype differs.
/// Returns `Ok(None)` at a clean end of stream.
pub fn decode_record<S: Scalar>(reader: &mut impl BufRead, path: &Path) -> Result<Option<(Option<String>, Tensor<S>)>> {
    let mut line = Vec::new();
    let n = reader.read_until(b'\n', &mut line).map_err(|e| Error::io(path, e))?;
    if n == 0 {
        return Ok(None);
    }
    if line.last() != Some(&b'\n') {
        return Err(Error::format(path, "header line is not newline-terminated"));
    }
    line.pop();
    let text = std::str::from_utf8(&line).map_err(|_| Error::format(path, "header is not UTF-8"))?;
    let header: Header = serde_json::from_str(text).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    let count = numel(&header.shape);
    let data = match header.dtype.as_str() {
        "f32" => read_payload::<f32, S>(reader, count, path)?,
        "f64" => read_payload::<f64, S>(reader, count, path)?,
        other => return Err(Error::format(path, format!("unsupported dtype {other:?}"))),
    };
    Ok(Some((header.name, Tensor::from_vec(&header.shape, data)?)))
}

fn read_payload<D: Scalar, S: Scalar>(reader: &mut impl Read, count: usize, path: &Path) -> Result<Vec<S>> {
    let mut bytes = vec![0u8; count * D::BYTES];
    reader
        .read_exact(&mut bytes)
        .map_err(|_| Error::format(path, format!("payload truncated: expected {} bytes", count * D::BYTES)))?;
    Ok(bytes
        .chunks_exact(D::BYTES)
        .map(|c| {
            let v = D::read_le(c);
            if D::DTYPE == S::DTYPE {
                // same width: reinterpret without an f64 round trip
                S::read_le(c)
            } else {
                S::lit(v.as_f64())
            }
        })
        .collect())
}

pub fn write_tensor<S: Scalar>(path: &Path, tensor: &Tensor<S>) -> Result<()> {
    let mut buf = Vec::new();
    encode_record(&mut buf, None, tensor);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tensor<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let (_, t) = decode_record(&mut r, path)?.ok_or_else(|| Error::format(path, "empty file"))?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    Ok(t)
}
