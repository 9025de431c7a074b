//! Single-file checkpoint container: a human-readable header describing the
//! config, tensor shapes, and payload digest, followed by the raw
//! little-endian f64 payload. Numerics round-trip bit-exactly; the digest
//! and format version are verified on load.

use std::collections::HashMap;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::attention::CachedState;
use crate::error::{DmanError, Result};
use crate::matrix::Matrix;
use crate::memory::MemoryState;
use crate::model::{Adam, ModelConfig, ModelParams, UserState, Variant};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "DMAN-CHECKPOINT";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub adam: Option<Adam>,
    pub user_states: Vec<(u32, UserState)>,
}

struct TensorDecl {
    name: String,
    rows: usize,
    cols: usize,
}

fn config_lines(cfg: &ModelConfig) -> String {
    format!(
        "embed_dim={}\nwindow_t={}\nmemory_slots={}\nlayers={}\nneg_samples={}\n\
         routing_iters={}\nattention_scale={}\nvariant={}\nlr={}\nbatch_size={}\n\
         epochs={}\nseed={}\n",
        cfg.embed_dim,
        cfg.window,
        cfg.memory_slots,
        cfg.layers,
        cfg.neg_samples,
        cfg.routing_iters,
        cfg.attention_scale,
        cfg.variant.as_str(),
        cfg.lr,
        cfg.batch_size,
        cfg.epochs,
        cfg.seed,
    )
}

/// Tensors in serialization order: model params, then optional Adam
/// moments, then optional user states.
fn tensor_list(ckpt: &Checkpoint) -> Vec<(String, Matrix)> {
    let mut out: Vec<(String, Matrix)> = vec![("embedding".into(), ckpt.params.embedding.clone())];
    for (name, t) in ckpt.params.dense_tensors() {
        out.push((name, t.clone()));
    }
    if let Some(adam) = &ckpt.adam {
        out.push(("adam/m/embedding".into(), adam.m_embedding.clone()));
        out.push(("adam/v/embedding".into(), adam.v_embedding.clone()));
        for (i, (name, _)) in ckpt.params.dense_tensors().iter().enumerate() {
            out.push((format!("adam/m/{name}"), adam.m_dense[i].clone()));
            out.push((format!("adam/v/{name}"), adam.v_dense[i].clone()));
        }
    }
    for (user, state) in &ckpt.user_states {
        for (l, m) in state.memory.levels.iter().enumerate() {
            out.push((format!("user{user}/mem{l}"), m.clone()));
        }
        if let Some(cache) = &state.cache {
            for (l, m) in cache.levels.iter().enumerate() {
                out.push((format!("user{user}/cache{l}"), m.clone()));
            }
        }
    }
    out
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tensors = tensor_list(ckpt);
    let mut payload = Vec::new();
    for (_, t) in &tensors {
        for v in t.as_slice() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = hex_digest(&payload);

    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&format!("format_version={FORMAT_VERSION}\n"));
    header.push_str(&config_lines(&ckpt.config));
    if let Some(adam) = &ckpt.adam {
        header.push_str(&format!(
            "adam_step_main={}\nadam_step_routing={}\nadam_lr={}\n",
            adam.step_main, adam.step_routing, adam.lr
        ));
    }
    for (user, state) in &ckpt.user_states {
        let (has_cache, cache_seg, cache_levels) = match &state.cache {
            Some(c) => (1, c.segment_index, c.levels.len()),
            None => (0, 0, 0),
        };
        header.push_str(&format!(
            "user={user} next_segment={} segments_fused={} has_cache={has_cache} \
             cache_segment_index={cache_seg} cache_levels={cache_levels}\n",
            state.next_segment, state.memory.segments_fused,
        ));
    }
    for (name, t) in &tensors {
        header.push_str(&format!("tensor={name} rows={} cols={}\n", t.rows(), t.cols()));
    }
    header.push_str(&format!("payload_sha256={digest}\n"));
    header.push_str("end_header\n");

    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(header.as_bytes())?;
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

fn hex_digest(payload: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(payload);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

fn header_err(path: &Path, msg: impl Into<String>) -> DmanError {
    DmanError::Parse {
        path: path.display().to_string(),
        line: 0,
        msg: msg.into(),
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let end_marker = b"end_header\n";
    let header_end = bytes
        .windows(end_marker.len())
        .position(|w| w == end_marker)
        .ok_or_else(|| header_err(path, "missing end_header marker"))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| header_err(path, "non-utf8 header"))?;
    let payload = &bytes[header_end + end_marker.len()..];

    let mut kv: HashMap<&str, &str> = HashMap::new();
    let mut tensors: Vec<TensorDecl> = Vec::new();
    let mut users: Vec<(u32, usize, usize, bool, usize)> = Vec::new();
    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(header_err(path, "not a checkpoint file"));
    }
    for line in lines {
        if let Some(rest) = line.strip_prefix("tensor=") {
            let mut parts = rest.split_whitespace();
            let name = parts.next().unwrap_or_default().to_string();
            let rows = parse_kv_field(parts.next(), "rows", path)?;
            let cols = parse_kv_field(parts.next(), "cols", path)?;
            tensors.push(TensorDecl { name, rows, cols });
        } else if let Some(rest) = line.strip_prefix("user=") {
            let mut parts = rest.split_whitespace();
            let user: u32 = parts
                .next()
                .unwrap_or_default()
                .parse()
                .map_err(|_| header_err(path, "bad user id"))?;
            let next_segment = parse_kv_field(parts.next(), "next_segment", path)?;
            let segments_fused = parse_kv_field(parts.next(), "segments_fused", path)?;
            let has_cache: usize = parse_kv_field(parts.next(), "has_cache", path)?;
            let cache_seg = parse_kv_field(parts.next(), "cache_segment_index", path)?;
            let _cache_levels: usize = parse_kv_field(parts.next(), "cache_levels", path)?;
            users.push((user, next_segment, segments_fused, has_cache == 1, cache_seg));
        } else if let Some((k, v)) = line.split_once('=') {
            kv.insert(k, v);
        }
    }

    let version: u32 = kv
        .get("format_version")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| header_err(path, "missing format_version"))?;
    if version != FORMAT_VERSION {
        return Err(DmanError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }

    let expected_digest = kv
        .get("payload_sha256")
        .ok_or_else(|| header_err(path, "missing payload digest"))?;
    let actual = hex_digest(payload);
    if actual != *expected_digest {
        return Err(DmanError::DigestMismatch {
            expected: expected_digest.to_string(),
            actual,
        });
    }

    let get = |key: &str| -> Result<&str> {
        kv.get(key)
            .copied()
            .ok_or_else(|| header_err(path, format!("missing config key {key}")))
    };
    let config = ModelConfig {
        embed_dim: parse_num(get("embed_dim")?, path)?,
        window: parse_num(get("window_t")?, path)?,
        memory_slots: parse_num(get("memory_slots")?, path)?,
        layers: parse_num(get("layers")?, path)?,
        neg_samples: parse_num(get("neg_samples")?, path)?,
        routing_iters: parse_num(get("routing_iters")?, path)?,
        attention_scale: get("attention_scale")? == "true",
        variant: Variant::parse(get("variant")?)?,
        lr: get("lr")?
            .parse()
            .map_err(|_| header_err(path, "bad lr"))?,
        batch_size: parse_num(get("batch_size")?, path)?,
        epochs: parse_num(get("epochs")?, path)?,
        seed: get("seed")?
            .parse()
            .map_err(|_| header_err(path, "bad seed"))?,
    };

    // slice the payload into matrices by declaration order
    let mut mats: HashMap<String, Matrix> = HashMap::new();
    let mut offset = 0usize;
    for decl in &tensors {
        let count = decl.rows * decl.cols;
        let need = count * 8;
        if offset + need > payload.len() {
            return Err(header_err(path, "payload shorter than declared tensors"));
        }
        let data: Vec<f64> = payload[offset..offset + need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += need;
        mats.insert(
            decl.name.clone(),
            Matrix::from_vec(decl.rows, decl.cols, data)?,
        );
    }

    let take = |mats: &mut HashMap<String, Matrix>, name: &str| -> Result<Matrix> {
        mats.remove(name)
            .ok_or_else(|| DmanError::MissingTensor(name.to_string()))
    };

    let embedding = take(&mut mats, "embedding")?;
    let vocab = embedding.rows();
    let mut params = ModelParams::init(&config, vocab);
    params.embedding = embedding;
    for (name, tensor) in params.dense_tensors_mut() {
        *tensor = take(&mut mats, &name)?;
    }

    let adam = if kv.contains_key("adam_step_main") {
        let mut adam = Adam::new(
            &params,
            kv.get("adam_lr")
                .and_then(|v| v.parse().ok())
                .unwrap_or(config.lr),
        );
        adam.step_main = kv
            .get("adam_step_main")
            .and_then(|v| v.parse().ok())
            .unwrap_or(0);
        adam.step_routing = kv
            .get("adam_step_routing")
            .and_then(|v| v.parse().ok())
            .unwrap_or(0);
        adam.m_embedding = take(&mut mats, "adam/m/embedding")?;
        adam.v_embedding = take(&mut mats, "adam/v/embedding")?;
        for (i, (name, _)) in params.dense_tensors().iter().enumerate() {
            adam.m_dense[i] = take(&mut mats, &format!("adam/m/{name}"))?;
            adam.v_dense[i] = take(&mut mats, &format!("adam/v/{name}"))?;
        }
        Some(adam)
    } else {
        None
    };

    let mut user_states = Vec::new();
    for (user, next_segment, segments_fused, has_cache, cache_seg) in users {
        let mut levels = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            levels.push(take(&mut mats, &format!("user{user}/mem{l}"))?);
        }
        let cache = if has_cache {
            let mut cache_levels = Vec::with_capacity(config.layers + 1);
            for l in 0..=config.layers {
                cache_levels.push(take(&mut mats, &format!("user{user}/cache{l}"))?);
            }
            Some(CachedState {
                levels: cache_levels,
                segment_index: cache_seg,
            })
        } else {
            None
        };
        user_states.push((
            user,
            UserState {
                memory: MemoryState {
                    levels,
                    segments_fused,
                },
                cache,
                next_segment,
            },
        ));
    }

    Ok(Checkpoint {
        config,
        params,
        adam,
        user_states,
    })
}

fn parse_kv_field<T: std::str::FromStr>(
    field: Option<&str>,
    key: &str,
    path: &Path,
) -> Result<T> {
    field
        .and_then(|f| f.strip_prefix(&format!("{key}=")))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| header_err(path, format!("bad or missing field {key}")))
}

fn parse_num(v: &str, path: &Path) -> Result<usize> {
    v.parse()
        .map_err(|_| header_err(path, format!("bad numeric value `{v}`")))
}
