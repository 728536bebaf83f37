//! Raw container files: a small JSON header next to a little-endian `f32`
//! payload. Every writer goes through [`write_atomic`] so that a failed run
//! never leaves a half-written file behind.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub dtype: String,
    pub channels: usize,
}

impl ContainerHeader {
    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn payload_len(&self) -> usize {
        self.voxel_count() * self.channels * 4
    }
}

/// A decoded container: header plus channel-major, x-fastest samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: ContainerHeader,
    pub data: Vec<f32>,
}

/// Resolves `foo`, `foo.json` or `foo.bin` to the `(header, payload)` pair.
pub fn container_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut header = stem.clone().into_os_string();
    header.push(".json");
    let mut payload = stem.into_os_string();
    payload.push(".bin");
    (PathBuf::from(header), PathBuf::from(payload))
}

pub fn read_header(path: &Path) -> Result<ContainerHeader> {
    let (header_path, _) = container_paths(path);
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: ContainerHeader = serde_json::from_str(&text).map_err(|e| Error::Header {
        path: header_path.clone(),
        message: e.to_string(),
    })?;
    if header.dtype != "f32" {
        return Err(Error::UnsupportedDtype(header.dtype));
    }
    if header.dims.iter().any(|&d| d == 0) {
        return Err(Error::Header {
            path: header_path,
            message: format!("zero dimension in {:?}", header.dims),
        });
    }
    if header.spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Header {
            path: header_path,
            message: format!("spacing must be positive, got {:?}", header.spacing_mm),
        });
    }
    if header.channels == 0 {
        return Err(Error::Header {
            path: header_path,
            message: "channels must be at least 1".into(),
        });
    }
    Ok(header)
}

pub fn read_container(path: &Path) -> Result<Container> {
    let header = read_header(path)?;
    let (_, payload_path) = container_paths(path);
    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let expected = header.payload_len();
    if bytes.len() != expected {
        return Err(Error::PayloadSize {
            expected,
            found: bytes.len(),
        });
    }
    let data = decode_f32(&bytes);
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    Ok(Container { header, data })
}

pub fn write_container(path: &Path, container: &Container) -> Result<()> {
    let header = &container.header;
    if container.data.len() != header.voxel_count() * header.channels {
        return Err(Error::Shape(format!(
            "container holds {} samples, header expects {}",
            container.data.len(),
            header.voxel_count() * header.channels
        )));
    }
    let (header_path, payload_path) = container_paths(path);
    write_atomic(&payload_path, &encode_f32(&container.data))?;
    let text = serde_json::to_string_pretty(header)?;
    write_atomic(&header_path, text.as_bytes())
}

pub fn encode_f32(data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Write to a sibling temp file, fsync, then rename over the destination.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}
