//! Text serialization shared by dataset files, run logs, and config files:
//! 17-significant-digit float formatting (exact f64 round-trip), flat
//! `key=value` config files with dotted keys, a small checksum, and
//! deterministic sub-seed derivation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Format a float with 17 significant digits. 17 decimal digits uniquely
/// identify an f64, so `parse_f64(fmt_f64(x)) == x` bit-for-bit.
pub fn fmt_f64(x: f64) -> String {
    format!("{:.16e}", x)
}

pub fn parse_f64(s: &str) -> Result<f64, String> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| format!("bad float {s:?}: {e}"))
}

pub fn parse_usize(s: &str) -> Result<usize, String> {
    s.trim()
        .parse::<usize>()
        .map_err(|e| format!("bad integer {s:?}: {e}"))
}

pub fn parse_u64(s: &str) -> Result<u64, String> {
    s.trim()
        .parse::<u64>()
        .map_err(|e| format!("bad integer {s:?}: {e}"))
}

/// Join floats with commas at full precision.
pub fn fmt_row(values: &[f64]) -> String {
    let mut out = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{}", fmt_f64(*v));
    }
    out
}

pub fn parse_row(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').map(parse_f64).collect()
}

/// FNV-1a 64-bit hash. Used both as a dataset content checksum and as the
/// mixer for sub-seed derivation; not cryptographic, just stable.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a labeled sub-seed from a top-level seed. Every random stream in a
/// run (data, model init, shuffling, pairs, ...) gets its own label so the
/// streams are independent yet fully determined by the one user-facing seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    splitmix64(seed ^ fnv1a64(label.as_bytes()))
}

/// Parse a flat `key=value` config file. Keys are dotted paths such as
/// `train.lr`; blank lines and lines starting with `#` are ignored.
pub fn parse_flat_config(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("line {}: expected key=value, got {raw:?}", lineno + 1));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

/// Serialize a flat config map, keys sorted, with a leading comment line.
pub fn write_flat_config(header: &str, map: &BTreeMap<String, String>) -> String {
    let mut out = format!("# {header}\n");
    for (k, v) in map {
        let _ = writeln!(out, "{k}={v}");
    }
    out
}
