//! Checkpoint container:
//!
//! ```text
//! "BOXQ1" | u32 LE config length | config text (key=value lines)
//!         | parameters, little-endian, layout order | u64 LE FNV-1a of the parameter bytes
//! ```
//!
//! Network fields use the `net.` prefix; callers may add other keys.

use std::collections::BTreeMap;
use std::path::Path;

use super::{NetConfig, Params, Precision, QNetError, QNetwork, Result, Scalar};

const MAGIC: &[u8; 5] = b"BOXQ1";

/// Extra key=value pairs stored alongside the network.
pub type Metadata = BTreeMap<String, String>;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn bad(msg: impl Into<String>) -> QNetError {
    QNetError::Checkpoint(msg.into())
}

fn config_entries(cfg: &NetConfig) -> Vec<(String, String)> {
    let precision = match cfg.precision {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    };
    let channels: Vec<String> = cfg.conv_channels.iter().map(|c| c.to_string()).collect();
    [
        ("d_model", cfg.d_model.to_string()),
        ("n_heads", cfg.n_heads.to_string()),
        ("ffm_layers", cfg.ffm_layers.to_string()),
        ("agent_layers", cfg.agent_layers.to_string()),
        ("conv_channels", channels.join(",")),
        ("precision", precision.to_string()),
        ("ff_mult", cfg.ff_mult.to_string()),
        ("bg_h", cfg.bg_h.to_string()),
        ("bg_w", cfg.bg_w.to_string()),
        ("fg_h", cfg.fg_h.to_string()),
        ("fg_w", cfg.fg_w.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (format!("net.{k}"), v))
    .collect()
}

fn parse_config(map: &Metadata) -> Result<NetConfig> {
    let get = |k: &str| {
        map.get(&format!("net.{k}"))
            .ok_or_else(|| bad(format!("config block lacks net.{k}")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| bad(format!("net.{k} is not a count")))
    };
    let precision = match get("precision")?.as_str() {
        "f32" => Precision::F32,
        "f64" => Precision::F64,
        other => return Err(bad(format!("unknown precision {other}"))),
    };
    let conv_channels = get("conv_channels")?
        .split(',')
        .map(|s| s.parse().map_err(|_| bad("net.conv_channels is malformed")))
        .collect::<Result<Vec<usize>>>()?;
    Ok(NetConfig {
        d_model: num("d_model")?,
        n_heads: num("n_heads")?,
        ffm_layers: num("ffm_layers")?,
        agent_layers: num("agent_layers")?,
        conv_channels,
        precision,
        ff_mult: num("ff_mult")?,
        bg_h: num("bg_h")?,
        bg_w: num("bg_w")?,
        fg_h: num("fg_h")?,
        fg_w: num("fg_w")?,
    })
}

pub fn write_checkpoint(net: &QNetwork, meta: &Metadata) -> Result<Vec<u8>> {
    let mut text = String::new();
    let entries = config_entries(net.config());
    for (k, v) in entries.iter().map(|(k, v)| (k, v)).chain(meta.iter()) {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(QNetError::InvalidArgument(format!("unstorable metadata key {k:?}")));
        }
        text.push_str(&format!("{k}={v}\n"));
    }
    let mut payload = Vec::with_capacity(net.params().len() * 8);
    match net.params() {
        Params::F32(p) => p.iter().for_each(|v| v.put_le(&mut payload)),
        Params::F64(p) => p.iter().for_each(|v| v.put_le(&mut payload)),
    }
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + text.len() + payload.len() + 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&fnv1a(&payload).to_le_bytes());
    Ok(out)
}

/// Parses a checkpoint, returning the network and the non-network metadata.
pub fn read_checkpoint(bytes: &[u8]) -> Result<(QNetwork, Metadata)> {
    if bytes.len() < MAGIC.len() + 4 + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("missing BOXQ1 magic"));
    }
    let mut pos = MAGIC.len();
    let text_len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")) as usize;
    pos += 4;
    let text = bytes
        .get(pos..pos + text_len)
        .ok_or_else(|| bad("truncated config block"))?;
    pos += text_len;
    let text = std::str::from_utf8(text).map_err(|_| bad("config block is not UTF-8"))?;
    let mut map = Metadata::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("config line without '=': {line:?}")))?;
        map.insert(k.to_string(), v.to_string());
    }
    let cfg = parse_config(&map)?;
    cfg.validate()?;
    let count = QNetwork::param_count(&cfg)?;
    let width = match cfg.precision {
        Precision::F32 => f32::BYTES,
        Precision::F64 => f64::BYTES,
    };
    let payload_len = count * width;
    if bytes.len() != pos + payload_len + 8 {
        return Err(bad(format!(
            "expected {count} parameters ({payload_len} bytes) plus checksum, file has {} bytes after the header",
            bytes.len() - pos
        )));
    }
    let payload = &bytes[pos..pos + payload_len];
    let stored = u64::from_le_bytes(bytes[pos + payload_len..].try_into().expect("8 bytes"));
    if stored != fnv1a(payload) {
        return Err(bad("checksum mismatch"));
    }
    let params = match cfg.precision {
        Precision::F32 => Params::F32(payload.chunks_exact(4).map(f32::get_le).collect()),
        Precision::F64 => Params::F64(payload.chunks_exact(8).map(f64::get_le).collect()),
    };
    if let Some(i) = (0..params.len()).find(|&i| !params.get(i).is_finite()) {
        return Err(bad(format!("parameter {i} is not finite")));
    }
    map.retain(|k, _| !k.starts_with("net."));
    Ok((QNetwork::from_params(cfg, params)?, map))
}

pub fn save_checkpoint(net: &QNetwork, meta: &Metadata, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_checkpoint(net, meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(QNetwork, Metadata)> {
    read_checkpoint(&std::fs::read(path)?)
}
