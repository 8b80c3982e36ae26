//! Single-document JSON checkpoints. Every tensor is stored as its shape
//! plus a base64 string of little-endian `f64` bytes, so values round-trip
//! bit for bit. The backbone is not stored; it is rebuilt from the seed.

use std::collections::HashSet;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use resprompt_core::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::model::ModelState;
use crate::train::{Experiment, History, LearnerState};

pub const FORMAT_VERSION: u32 = 1;

const BUFFER_KEY: &str = "f64le";

#[derive(Serialize, Deserialize)]
struct Envelope {
    format: String,
    version: u32,
    config_hash: String,
    seed: u64,
    state: Value,
}

const FORMAT_NAME: &str = "resprompt-checkpoint";

/// Exact ChaCha state as seed, stream id and word position.
pub mod rng_serde {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct RngState {
        seed: String,
        stream: u64,
        word_pos: String,
    }

    pub fn serialize<S: Serializer>(rng: &ChaCha8Rng, s: S) -> Result<S::Ok, S::Error> {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ChaCha8Rng, D::Error> {
        let st = RngState::deserialize(d)?;
        if st.seed.len() != 64 || !st.seed.is_ascii() {
            return Err(D::Error::custom("rng seed must be 64 hex digits"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&st.seed[2 * i..2 * i + 2], 16).map_err(D::Error::custom)?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(st.stream);
        rng.set_word_pos(st.word_pos.parse().map_err(D::Error::custom)?);
        Ok(rng)
    }
}

fn is_tensor(m: &Map<String, Value>) -> bool {
    m.len() == 2 && m.get("shape").is_some_and(Value::is_array) && m.get("data").is_some_and(Value::is_array)
}

/// Replaces every `{shape, data}` object with `{shape, f64le}`.
fn pack(v: &mut Value) -> Result<()> {
    match v {
        Value::Object(m) if is_tensor(m) => {
            let data = m.remove("data").expect("checked");
            let mut bytes = Vec::new();
            for x in data.as_array().expect("checked") {
                let x = x
                    .as_f64()
                    .ok_or_else(|| HarnessError::Checkpoint(format!("non-numeric tensor entry {x}")))?;
                bytes.extend_from_slice(&x.to_le_bytes());
            }
            m.insert(BUFFER_KEY.into(), Value::String(STANDARD.encode(bytes)));
        }
        Value::Object(m) => m.values_mut().try_for_each(pack)?,
        Value::Array(a) => a.iter_mut().try_for_each(pack)?,
        _ => {}
    }
    Ok(())
}

fn decode_buffer(s: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(s)
        .map_err(|e| HarnessError::Checkpoint(format!("bad tensor buffer: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(HarnessError::Checkpoint(format!(
            "tensor buffer of {} bytes",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

fn is_packed(m: &Map<String, Value>) -> bool {
    m.len() == 2 && m.contains_key("shape") && m.get(BUFFER_KEY).is_some_and(Value::is_string)
}

fn unpack(v: &mut Value) -> Result<()> {
    match v {
        Value::Object(m) if is_packed(m) => {
            let data = decode_buffer(m.remove(BUFFER_KEY).expect("checked").as_str().expect("checked"))?;
            let nums = data
                .into_iter()
                .map(|x| {
                    serde_json::Number::from_f64(x)
                        .map(Value::Number)
                        .ok_or_else(|| HarnessError::Checkpoint(format!("non-finite tensor value {x}")))
                })
                .collect::<Result<Vec<_>>>()?;
            m.insert("data".into(), Value::Array(nums));
        }
        Value::Object(m) => m.values_mut().try_for_each(unpack)?,
        Value::Array(a) => a.iter_mut().try_for_each(unpack)?,
        _ => {}
    }
    Ok(())
}

/// Every tensor in a packed state, decoded.
fn packed_tensors(v: &Value, out: &mut Vec<Tensor>) -> Result<()> {
    match v {
        Value::Object(m) if is_packed(m) => {
            let shape: Vec<usize> = serde_json::from_value(m["shape"].clone())?;
            let data = decode_buffer(m[BUFFER_KEY].as_str().expect("checked"))?;
            out.push(Tensor::new(shape, data).map_err(|e| HarnessError::Checkpoint(e.to_string()))?);
        }
        Value::Object(m) => m.values().try_for_each(|x| packed_tensors(x, out))?,
        Value::Array(a) => a.iter().try_for_each(|x| packed_tensors(x, out))?,
        _ => {}
    }
    Ok(())
}

/// Everything needed to continue an experiment where it stopped.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct Checkpoint {
    pub state: LearnerState,
    pub history: History,
    /// Model state at the end of every completed stage.
    pub snapshots: Vec<ModelState>,
}

#[derive(Serialize)]
struct CheckpointRef<'a> {
    state: &'a LearnerState,
    history: &'a History,
    snapshots: &'a [ModelState],
}

pub fn save_checkpoint(exp: &Experiment<'_>, path: &Path) -> Result<()> {
    let (cfg, seed) = (&exp.cfg, exp.seed);
    let mut value = serde_json::to_value(CheckpointRef {
        state: &exp.state,
        history: &exp.history,
        snapshots: &exp.snapshots,
    })?;
    pack(&mut value)?;
    let env = Envelope {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        config_hash: cfg.hash(),
        seed,
        state: value,
    };
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_vec(&env)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_envelope(path: &Path) -> Result<Envelope> {
    let bytes = std::fs::read(path)?;
    let env: Envelope = serde_json::from_slice(&bytes)
        .map_err(|e| HarnessError::Checkpoint(format!("corrupt checkpoint {}: {e}", path.display())))?;
    if env.format != FORMAT_NAME {
        return Err(HarnessError::Checkpoint(format!(
            "{} is not a checkpoint",
            path.display()
        )));
    }
    if env.version != FORMAT_VERSION {
        return Err(HarnessError::Checkpoint(format!(
            "checkpoint format version {} is not supported (expected {FORMAT_VERSION})",
            env.version
        )));
    }
    Ok(env)
}

fn validate_pool(model: &ModelState) -> Result<()> {
    let pool = &model.pool;
    resprompt_core::routing::PromptPool::from_parts(
        pool.keys.clone(),
        pool.values.clone(),
        pool.frozen().to_vec(),
        pool.active().to_vec(),
    )
    .map_err(|e| HarnessError::Checkpoint(format!("invalid prompt pool: {e}")))?;
    Ok(())
}

/// Loads a checkpoint written for exactly this `(cfg, seed)`.
pub fn load_checkpoint(path: &Path, cfg: &ExperimentConfig, seed: u64) -> Result<Checkpoint> {
    let mut env = read_envelope(path)?;
    if env.config_hash != cfg.hash() {
        return Err(HarnessError::Checkpoint(format!(
            "checkpoint was written for config {}, not {}",
            env.config_hash,
            cfg.hash()
        )));
    }
    if env.seed != seed {
        return Err(HarnessError::Checkpoint(format!(
            "checkpoint seed {} differs from {seed}",
            env.seed
        )));
    }
    unpack(&mut env.state)?;
    let ckpt: Checkpoint = serde_json::from_value(env.state)
        .map_err(|e| HarnessError::Checkpoint(format!("corrupt checkpoint state: {e}")))?;
    validate_pool(&ckpt.state.model)?;
    ckpt.snapshots.iter().try_for_each(validate_pool)?;
    Ok(ckpt)
}

/// Outcome of scanning a checkpoint for stored data.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Audit {
    pub tensors: usize,
    pub floats: usize,
    /// Tensor rows equal to one of the forbidden rows.
    pub matches: usize,
}

/// Looks for any row of `forbidden` (raw inputs, raw tokens, backbone
/// features) stored verbatim as a tensor row in the checkpoint.
pub fn audit_checkpoint(path: &Path, forbidden: &[&Tensor]) -> Result<Audit> {
    let env = read_envelope(path)?;
    let mut tensors = Vec::new();
    packed_tensors(&env.state, &mut tensors)?;
    let key = |row: &[f64]| row.iter().map(|x| x.to_bits()).collect::<Vec<u64>>();
    let banned: HashSet<Vec<u64>> = forbidden
        .iter()
        .flat_map(|t| (0..t.rows()).map(|r| key(t.row(r))))
        .collect();
    let widths: HashSet<usize> = forbidden.iter().map(|t| t.cols()).collect();
    let mut matches = 0;
    for t in &tensors {
        for &w in &widths {
            if w > 0 && t.len() % w == 0 {
                matches += t.data().chunks_exact(w).filter(|c| banned.contains(&key(c))).count();
            }
        }
    }
    Ok(Audit {
        tensors: tensors.len(),
        floats: tensors.iter().map(Tensor::len).sum(),
        matches,
    })
}
