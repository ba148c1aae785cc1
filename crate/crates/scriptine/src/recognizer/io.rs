//! Model container format.
//!
//! Layout: the magic `SCRM1`, a length-prefixed JSON metadata block (spec
//! string verbatim, codec characters, input height, training counters),
//! then the named tensors as little-endian `f32` with explicit shape
//! headers — first the raw tensors, then the EMA shadow under an `ema.`
//! prefix. Round-trips are bit-exact.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use super::model::{build_tensors, Codec, ModelError, ModelParams, TrainMeta};
use crate::netspec::{format_spec, parse_spec};

const MAGIC: &[u8; 5] = b"SCRM1";

#[derive(Serialize, Deserialize)]
struct ContainerMeta {
    spec: String,
    codec: String,
    input_height: usize,
    samples_seen: u64,
    epochs: u32,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serialize a model to the container byte format.
pub fn model_to_bytes(model: &ModelParams<f32>) -> Vec<u8> {
    let meta = ContainerMeta {
        spec: format_spec(&model.spec),
        codec: model.codec.chars().iter().collect(),
        input_height: model.input_height,
        samples_seen: model.meta.samples_seen,
        epochs: model.meta.epochs,
    };
    let meta_json = serde_json::to_vec(&meta).expect("metadata serializes");

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, meta_json.len() as u32);
    out.extend_from_slice(&meta_json);

    let raw = model.tensors.tensors();
    let ema = model.ema.tensors();
    put_u32(&mut out, (raw.len() + ema.len()) as u32);
    let mut write_tensor = |name: &str, view: &ndarray::ArrayViewD<'_, f32>| {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(view.ndim() as u8);
        for &d in view.shape() {
            put_u32(&mut out, d as u32);
        }
        for v in view.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, view) in &raw {
        write_tensor(name, view);
    }
    for (name, view) in &ema {
        write_tensor(&format!("ema.{name}"), view);
    }
    out
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.data.len() {
            return Err(ModelError::Container("unexpected end of container".into()));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }
}

/// Deserialize a model from container bytes, validating names and shapes
/// against the spec-derived structure.
pub fn model_from_bytes(bytes: &[u8]) -> Result<ModelParams<f32>, ModelError> {
    let mut cur = Cursor { data: bytes, pos: 0 };
    if cur.take(MAGIC.len())? != MAGIC {
        return Err(ModelError::Container("bad magic, not a model container".into()));
    }
    let meta_len = cur.u32()? as usize;
    let meta: ContainerMeta = serde_json::from_slice(cur.take(meta_len)?)
        .map_err(|e| ModelError::Container(format!("metadata: {e}")))?;
    let spec = parse_spec(&meta.spec)
        .map_err(|e| ModelError::Container(format!("spec: {e}")))?;
    let codec = Codec::new(meta.codec.chars().collect())?;

    let tensor_count = cur.u32()? as usize;
    let mut tensors: BTreeMap<String, ndarray::ArrayD<f32>> = BTreeMap::new();
    for _ in 0..tensor_count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| ModelError::Container("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            values.push(f32::from_le_bytes(cur.take(4)?.try_into().unwrap()));
        }
        let array = ndarray::ArrayD::from_shape_vec(shape, values)
            .map_err(|e| ModelError::Container(format!("tensor {name}: {e}")))?;
        if tensors.insert(name.clone(), array).is_some() {
            return Err(ModelError::Container(format!("duplicate tensor {name}")));
        }
    }
    if cur.pos != bytes.len() {
        return Err(ModelError::Container("trailing bytes after tensors".into()));
    }

    let mut raw = build_tensors::<f32>(&spec, meta.input_height, codec.size(), None)?;
    let mut ema = build_tensors::<f32>(&spec, meta.input_height, codec.size(), None)?;
    let mut fill = |prefix: &str,
                    net: &mut super::model::NetTensors<f32>|
     -> Result<(), ModelError> {
        for (name, mut view) in net.tensors_mut() {
            let full = format!("{prefix}{name}");
            let stored = tensors
                .remove(&full)
                .ok_or_else(|| ModelError::Container(format!("missing tensor {full}")))?;
            if stored.shape() != view.shape() {
                return Err(ModelError::Container(format!(
                    "tensor {full}: shape {:?} does not match {:?}",
                    stored.shape(),
                    view.shape()
                )));
            }
            view.assign(&stored);
        }
        Ok(())
    };
    fill("", &mut raw)?;
    fill("ema.", &mut ema)?;
    if !tensors.is_empty() {
        let extra: Vec<String> = tensors.keys().cloned().collect();
        return Err(ModelError::Container(format!("unknown tensors: {extra:?}")));
    }

    Ok(ModelParams {
        spec,
        codec,
        input_height: meta.input_height,
        tensors: raw,
        ema,
        meta: TrainMeta { samples_seen: meta.samples_seen, epochs: meta.epochs },
    })
}

pub fn save_model(model: &ModelParams<f32>, path: &Path) -> Result<(), ModelError> {
    Ok(std::fs::write(path, model_to_bytes(model))?)
}

pub fn load_model(path: &Path) -> Result<ModelParams<f32>, ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    model_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::parse_spec;
    use crate::recognizer::model::instantiate;

    fn sample_model() -> ModelParams<f32> {
        let spec = parse_spec("conv=3:3x3,pool=2x2,lstm=5,dropout=0.25").unwrap();
        let codec = Codec::from_texts(["abc .æſ"]);
        let mut model = instantiate(
            &spec,
            16,
            codec,
            &mut crate::rng::keyed_stream(77, "io"),
        )
        .unwrap();
        model.meta.samples_seen = 12345;
        model.meta.epochs = 7;
        // Make raw and ema differ so the round-trip covers both.
        model.tensors.proj.b[0] = 0.5;
        model
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let model = sample_model();
        let bytes = model_to_bytes(&model);
        assert_eq!(&bytes[..5], b"SCRM1");
        let loaded = model_from_bytes(&bytes).unwrap();
        assert_eq!(loaded, model);
        assert_eq!(model_to_bytes(&loaded), bytes);
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.scrm");
        let model = sample_model();
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded, model);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = model_to_bytes(&sample_model());
        bytes[0] = b'X';
        assert!(matches!(model_from_bytes(&bytes), Err(ModelError::Container(_))));
    }

    #[test]
    fn truncated_container_rejected() {
        let bytes = model_to_bytes(&sample_model());
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(model_from_bytes(cut), Err(ModelError::Container(_))));
    }

    #[test]
    fn codec_order_preserved_verbatim() {
        let spec = parse_spec("lstm=2").unwrap();
        // Deliberately unsorted codec: container must not re-sort it.
        let codec = Codec::new(vec!['z', 'a', 'm']).unwrap();
        let model = instantiate::<f32>(
            &spec,
            8,
            codec,
            &mut crate::rng::keyed_stream(78, "io2"),
        )
        .unwrap();
        let loaded = model_from_bytes(&model_to_bytes(&model)).unwrap();
        assert_eq!(loaded.codec.chars(), &['z', 'a', 'm']);
    }
}
