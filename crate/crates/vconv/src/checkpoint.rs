//! Checkpoint container: a small binary file holding everything a
//! resumed run or a converter needs. Magic + u32 header length +
//! JSON header (configs, normalization statistics, step, RNG,
//! tensor directory) + f32 little-endian payload in directory order.
//!
//! Saving the result of a load reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vconv_core::{ModelConfig, TrainConfig, TrainState};

use crate::mel::MelConfig;
use crate::{Error, Result};

const MAGIC: &[u8; 6] = b"VCKPT\x01";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    train: TrainConfig,
    mel: MelConfig,
    norm_mean: Vec<f64>,
    norm_std: Vec<f64>,
    step: u64,
    rng: ChaCha8Rng,
    adam_t_model: u64,
    adam_t_cmi: u64,
    tensors: Vec<TensorMeta>,
}

/// Everything read back from disk.
pub struct Checkpoint {
    pub state: TrainState<f32>,
    pub mel: MelConfig,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
}

#[derive(Default)]
struct Section<'a> {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    data: Vec<&'a [f32]>,
}

fn sections(state: &TrainState<f32>) -> Vec<Section<'_>> {
    let mut out = Vec::new();
    for (prefix, set, opt) in [
        ("model", &state.model.params, &state.opt_model),
        ("cmi", &state.estimator.params, &state.opt_cmi),
    ] {
        let mut params = Section::default();
        let mut mom_m = Section::default();
        let mut mom_v = Section::default();
        for (i, (_, name, tensor)) in set.iter().enumerate() {
            params.names.push(format!("{prefix}/{name}"));
            params.shapes.push(tensor.shape().to_vec());
            params.data.push(tensor.data());
            mom_m.names.push(format!("adam_{prefix}.m/{name}"));
            mom_m.shapes.push(tensor.shape().to_vec());
            mom_m.data.push(&opt.m[i]);
            mom_v.names.push(format!("adam_{prefix}.v/{name}"));
            mom_v.shapes.push(tensor.shape().to_vec());
            mom_v.data.push(&opt.v[i]);
        }
        out.push(params);
        out.push(mom_m);
        out.push(mom_v);
    }
    out
}

pub fn save_checkpoint(
    path: &Path,
    state: &TrainState<f32>,
    mel: &MelConfig,
    norm_mean: &[f64],
    norm_std: &[f64],
) -> Result<()> {
    let secs = sections(state);
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for sec in &secs {
        for ((name, shape), data) in sec.names.iter().zip(&sec.shapes).zip(&sec.data) {
            tensors.push(TensorMeta {
                name: name.clone(),
                shape: shape.clone(),
            });
            for v in *data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = Header {
        version: VERSION,
        model: state.model.config.clone(),
        train: state.config.clone(),
        mel: mel.clone(),
        norm_mean: norm_mean.to_vec(),
        norm_std: norm_std.to_vec(),
        step: state.step,
        rng: state.rng.clone(),
        adam_t_model: state.opt_model.t,
        adam_t_cmi: state.opt_cmi.t,
        tensors,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(10 + header_json.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)".into()));
    }
    let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    if bytes.len() < 10 + header_len {
        return Err(corrupt("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[10..10 + header_len])
        .map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    if header.version != VERSION {
        return Err(corrupt(format!("unsupported version {}", header.version)));
    }

    let mut state = TrainState::<f32>::new(header.model.clone(), header.train.clone())
        .map_err(Error::Core)?;

    // The directory must be exactly what this build would write for
    // these configs; anything else means the file and header disagree.
    let expected: Vec<TensorMeta> = {
        let secs = sections(&state);
        secs.iter()
            .flat_map(|s| {
                s.names.iter().zip(&s.shapes).map(|(n, sh)| TensorMeta {
                    name: n.clone(),
                    shape: sh.clone(),
                })
            })
            .collect()
    };
    if expected.len() != header.tensors.len() {
        return Err(corrupt(format!(
            "directory lists {} tensors, configs imply {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    let mut total = 0usize;
    for (want, got) in expected.iter().zip(&header.tensors) {
        if want.name != got.name || want.shape != got.shape {
            return Err(corrupt(format!(
                "directory entry {} {:?} does not match expected {} {:?}",
                got.name, got.shape, want.name, want.shape
            )));
        }
        total += got.shape.iter().product::<usize>();
    }
    if bytes.len() != 10 + header_len + total * 4 {
        return Err(corrupt("payload size does not match the directory".into()));
    }

    fn take(bytes: &[u8], cursor: &mut usize, len: usize) -> Vec<f32> {
        let out: Vec<f32> = bytes[*cursor..*cursor + len * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *cursor += len * 4;
        out
    }
    let mut cursor = 10 + header_len;
    for half in 0..2 {
        let (set, opt) = if half == 0 {
            (&mut state.model.params, &mut state.opt_model)
        } else {
            (&mut state.estimator.params, &mut state.opt_cmi)
        };
        let ids: Vec<_> = set.iter().map(|(id, _, t)| (id, t.data().len())).collect();
        for &(id, len) in &ids {
            let data = take(&bytes, &mut cursor, len);
            set.get_mut(id).data_mut().copy_from_slice(&data);
        }
        for (i, &(_, len)) in ids.iter().enumerate() {
            opt.m[i] = take(&bytes, &mut cursor, len);
        }
        for (i, &(_, len)) in ids.iter().enumerate() {
            opt.v[i] = take(&bytes, &mut cursor, len);
        }
    }

    state.step = header.step;
    state.rng = header.rng;
    state.opt_model.t = header.adam_t_model;
    state.opt_cmi.t = header.adam_t_cmi;

    Ok(Checkpoint {
        state,
        mel: header.mel,
        norm_mean: header.norm_mean,
        norm_std: header.norm_std,
    })
}
