//! Single-file weight container and key files. The container holds a JSON
//! header describing tensor layout plus a flat little-endian f32 payload,
//! so identical weights serialize to identical bytes on every platform.
//!
//! Layout: magic "NRSG", format version (u32 LE), header length (u64 LE),
//! UTF-8 JSON header, payload. Header: {model_type, config, tensors} where
//! tensors lists {name, shape, dtype, byte_offset, byte_len} with offsets
//! relative to the payload start. Unknown header keys are ignored so the
//! format can grow.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::extractor::{ExtractorConfig, ExtractorError, ExtractorParams};
use crate::field::{FieldConfig, FieldError, FieldParams, Mlp};
use crate::pipeline::{Manifest, StegoBundle};
use crate::render::{RenderError, ViewKey};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"NRSG";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("container header: {0}")]
    Json(#[from] serde_json::Error),
    #[error("container format: {0}")]
    Format(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Extractor(#[from] ExtractorError),
    #[error(transparent)]
    Key(#[from] RenderError),
}

fn format_err<T>(msg: impl Into<String>) -> Result<T, ContainerError> {
    Err(ContainerError::Format(msg.into()))
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    byte_offset: u64,
    byte_len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model_type: String,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleConfig {
    field: FieldConfig,
    extractor: ExtractorConfig,
    manifest: Manifest,
}

/// Whatever a container file turned out to hold.
pub enum LoadedModel {
    Field(FieldParams),
    Extractor(ExtractorParams),
    Bundle(StegoBundle),
}

impl LoadedModel {
    pub fn kind(&self) -> &'static str {
        match self {
            LoadedModel::Field(_) => "field",
            LoadedModel::Extractor(_) => "extractor",
            LoadedModel::Bundle(_) => "bundle",
        }
    }

    /// The scene weights, however they were packaged.
    pub fn into_field(self) -> Option<FieldParams> {
        match self {
            LoadedModel::Field(f) => Some(f),
            LoadedModel::Bundle(b) => Some(b.field),
            LoadedModel::Extractor(_) => None,
        }
    }
}

fn mlp_names(config: &FieldConfig) -> Vec<String> {
    let mut names = Vec::new();
    for i in 0..config.depth {
        names.push(format!("trunk.{i}.w"));
        names.push(format!("trunk.{i}.b"));
    }
    for head in ["sigma", "color_hidden", "color_out"] {
        names.push(format!("{head}.w"));
        names.push(format!("{head}.b"));
    }
    names
}

fn field_tensor_names(config: &FieldConfig) -> Vec<String> {
    let mut names = Vec::new();
    for net in ["coarse", "fine"] {
        for n in mlp_names(config) {
            names.push(format!("{net}.{n}"));
        }
    }
    names
}

const EXTRACTOR_TENSOR_NAMES: [&str; 8] = [
    "conv1.w", "conv1.b", "conv2.w", "conv2.b", "fc1.w", "fc1.b", "fc2.w", "fc2.b",
];

fn field_tensors(params: &FieldParams) -> Vec<&Tensor<f32>> {
    params
        .coarse
        .params()
        .iter()
        .chain(params.fine.params())
        .collect()
}

fn write_container(
    path: &Path,
    model_type: &str,
    config: serde_json::Value,
    names: &[String],
    tensors: &[&Tensor<f32>],
) -> Result<(), ContainerError> {
    assert_eq!(names.len(), tensors.len());
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in names.iter().zip(tensors) {
        let byte_len = (t.data().len() * 4) as u64;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            byte_offset: offset,
            byte_len,
        });
        offset += byte_len;
    }
    let header = Header {
        model_type: model_type.into(),
        config,
        tensors: entries,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header_bytes.len() + offset as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parses and validates the raw container layout: magic, version, header
/// bounds, then tensor entries against the payload (offsets in order,
/// non-overlapping, sizes matching shapes, payload fully accounted for).
fn read_container(bytes: &[u8]) -> Result<(Header, Vec<Tensor<f32>>), ContainerError> {
    if bytes.len() < 16 {
        return format_err(format!("file too short ({} bytes)", bytes.len()));
    }
    if bytes[0..4] != MAGIC {
        return format_err(format!("bad magic {:02x?}", &bytes[0..4]));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return format_err(format!(
            "unsupported format version {version} (this build reads {FORMAT_VERSION})"
        ));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len());
    let Some(payload_start) = payload_start else {
        return format_err(format!("header length {header_len} exceeds file size"));
    };
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])?;
    let payload = &bytes[payload_start..];

    let mut expected_offset = 0u64;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        if e.dtype != "f32" {
            return format_err(format!("tensor {}: unsupported dtype {}", e.name, e.dtype));
        }
        if e.byte_offset != expected_offset {
            return format_err(format!(
                "tensor {}: offset {} overlaps or leaves a gap (expected {})",
                e.name, e.byte_offset, expected_offset
            ));
        }
        let numel: usize = e.shape.iter().product();
        if e.byte_len != (numel * 4) as u64 {
            return format_err(format!(
                "tensor {}: byte_len {} does not match shape {:?}",
                e.name, e.byte_len, e.shape
            ));
        }
        let start = e.byte_offset as usize;
        let end = start + e.byte_len as usize;
        if end > payload.len() {
            return format_err(format!(
                "tensor {}: payload truncated ({} bytes needed, {} present)",
                e.name,
                end,
                payload.len()
            ));
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(e.shape.clone(), data)
            .map_err(|err| ContainerError::Format(format!("tensor {}: {err}", e.name)))?;
        tensors.push(t);
        expected_offset = end as u64;
    }
    if expected_offset != payload.len() as u64 {
        return format_err(format!(
            "payload has {} trailing bytes not covered by the header",
            payload.len() as u64 - expected_offset
        ));
    }
    Ok((header, tensors))
}

fn check_names(
    entries: &[TensorEntry],
    expected: &[String],
) -> Result<(), ContainerError> {
    if entries.len() != expected.len() {
        return format_err(format!(
            "expected {} tensors, found {}",
            expected.len(),
            entries.len()
        ));
    }
    for (e, want) in entries.iter().zip(expected) {
        if &e.name != want {
            return format_err(format!("tensor name {} where {} was expected", e.name, want));
        }
    }
    Ok(())
}

fn field_from_tensors(
    config: FieldConfig,
    tensors: Vec<Tensor<f32>>,
) -> Result<FieldParams, ContainerError> {
    if tensors.len() % 2 != 0 {
        return format_err("field tensor count must be even");
    }
    let half = tensors.len() / 2;
    let mut it = tensors.into_iter();
    let coarse: Vec<_> = it.by_ref().take(half).collect();
    let fine: Vec<_> = it.collect();
    Ok(FieldParams {
        coarse: Mlp::from_params(&config, coarse)?,
        fine: Mlp::from_params(&config, fine)?,
        config,
    })
}

pub fn save_field(path: impl AsRef<Path>, params: &FieldParams) -> Result<(), ContainerError> {
    write_container(
        path.as_ref(),
        "field",
        serde_json::to_value(&params.config)?,
        &field_tensor_names(&params.config),
        &field_tensors(params),
    )
}

pub fn save_extractor(
    path: impl AsRef<Path>,
    params: &ExtractorParams,
) -> Result<(), ContainerError> {
    let names: Vec<String> = EXTRACTOR_TENSOR_NAMES.iter().map(|s| s.to_string()).collect();
    write_container(
        path.as_ref(),
        "extractor",
        serde_json::to_value(&params.config)?,
        &names,
        &params.params().iter().collect::<Vec<_>>(),
    )
}

pub fn save_bundle(path: impl AsRef<Path>, bundle: &StegoBundle) -> Result<(), ContainerError> {
    let config = BundleConfig {
        field: bundle.field.config.clone(),
        extractor: bundle.extractor.config.clone(),
        manifest: bundle.manifest.clone(),
    };
    let mut names: Vec<String> = field_tensor_names(&bundle.field.config)
        .into_iter()
        .map(|n| format!("field.{n}"))
        .collect();
    names.extend(
        EXTRACTOR_TENSOR_NAMES
            .iter()
            .map(|n| format!("extractor.{n}")),
    );
    let mut tensors = field_tensors(&bundle.field);
    tensors.extend(bundle.extractor.params());
    write_container(
        path.as_ref(),
        "bundle",
        serde_json::to_value(&config)?,
        &names,
        &tensors,
    )
}

pub fn load_model(path: impl AsRef<Path>) -> Result<LoadedModel, ContainerError> {
    let bytes = fs::read(path.as_ref())?;
    let (header, tensors) = read_container(&bytes)?;
    match header.model_type.as_str() {
        "field" => {
            let config: FieldConfig = serde_json::from_value(header.config)?;
            check_names(&header.tensors, &field_tensor_names(&config))?;
            Ok(LoadedModel::Field(field_from_tensors(config, tensors)?))
        }
        "extractor" => {
            let config: ExtractorConfig = serde_json::from_value(header.config)?;
            let names: Vec<String> = EXTRACTOR_TENSOR_NAMES.iter().map(|s| s.to_string()).collect();
            check_names(&header.tensors, &names)?;
            Ok(LoadedModel::Extractor(ExtractorParams::from_params(
                config, tensors,
            )?))
        }
        "bundle" => {
            let config: BundleConfig = serde_json::from_value(header.config)?;
            let mut names: Vec<String> = field_tensor_names(&config.field)
                .into_iter()
                .map(|n| format!("field.{n}"))
                .collect();
            names.extend(
                EXTRACTOR_TENSOR_NAMES
                    .iter()
                    .map(|n| format!("extractor.{n}")),
            );
            check_names(&header.tensors, &names)?;
            let field_count = names.len() - 8;
            let mut it = tensors.into_iter();
            let field_tensors: Vec<_> = it.by_ref().take(field_count).collect();
            let extractor_tensors: Vec<_> = it.collect();
            let bundle = StegoBundle {
                field: field_from_tensors(config.field, field_tensors)?,
                extractor: ExtractorParams::from_params(config.extractor, extractor_tensors)?,
                manifest: config.manifest,
            };
            bundle
                .validate()
                .map_err(|e| ContainerError::Format(e.to_string()))?;
            Ok(LoadedModel::Bundle(bundle))
        }
        other => format_err(format!("unknown model_type {other:?}")),
    }
}

pub fn load_field(path: impl AsRef<Path>) -> Result<FieldParams, ContainerError> {
    match load_model(path)? {
        LoadedModel::Field(f) => Ok(f),
        other => format_err(format!("expected a field container, found {}", other.kind())),
    }
}

pub fn load_extractor(path: impl AsRef<Path>) -> Result<ExtractorParams, ContainerError> {
    match load_model(path)? {
        LoadedModel::Extractor(e) => Ok(e),
        other => format_err(format!(
            "expected an extractor container, found {}",
            other.kind()
        )),
    }
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<StegoBundle, ContainerError> {
    match load_model(path)? {
        LoadedModel::Bundle(b) => Ok(b),
        other => format_err(format!("expected a bundle container, found {}", other.kind())),
    }
}

/// Writes the viewpoint key as human-readable JSON. Keys travel separately
/// from bundles by design; nothing in the container formats references them.
pub fn save_key(path: impl AsRef<Path>, key: &ViewKey) -> Result<(), ContainerError> {
    key.validate()?;
    let mut text = serde_json::to_string_pretty(key)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_key(path: impl AsRef<Path>) -> Result<ViewKey, ContainerError> {
    let text = fs::read_to_string(path)?;
    let key: ViewKey = serde_json::from_str(&text)?;
    key.validate()?;
    Ok(key)
}
