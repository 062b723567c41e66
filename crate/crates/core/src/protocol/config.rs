//! Server configuration files.
//!
//! One `key = value` pair per line; `#` starts a comment. Keys:
//!
//! | key            | meaning                                                        |
//! |----------------|----------------------------------------------------------------|
//! | `server_id`    | index of this server in `servers` (required)                   |
//! | `servers`      | comma-separated `host:port` of every server, in id order       |
//! | `listen`       | bind address; defaults to `servers[server_id]`                 |
//! | `global`       | global domain extents, e.g. `4096x2048`                        |
//! | `block`        | distribution block extents; default derived from `global`      |
//! | `tier`         | `heap`, `mmap:<path>`, `delayed:<op_us>:<mib_us>[:inner]`, ... |
//! | `capacity`     | tier capacity, with optional `K`/`M`/`G` suffix (binary)       |
//! | `workers`      | concurrent request executions; default = available CPUs        |
//! | `max_versions` | versions retained per variable before the oldest is evicted    |

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::directory::{DistGrid, DEFAULT_MAX_VERSIONS};
use crate::geometry::NDBox;
use crate::tier::{TierConfig, TierSpec};

use super::server::ServerConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("invalid value for `{key}`: {msg}")]
    Invalid { key: String, msg: String },
}

/// Parses `1048576`, `512K`, `64MiB`, `2G`, ... Suffixes are powers of 1024.
pub fn parse_size(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    let (num, suffix) = s.split_at(split);
    let n: u64 = num.parse().map_err(|_| format!("`{s}` is not a size"))?;
    let mult: u64 = match suffix.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 1,
        "k" | "kb" | "kib" => 1 << 10,
        "m" | "mb" | "mib" => 1 << 20,
        "g" | "gb" | "gib" => 1 << 30,
        "t" | "tb" | "tib" => 1 << 40,
        other => return Err(format!("unknown size suffix `{other}`")),
    };
    n.checked_mul(mult).ok_or_else(|| format!("`{s}` overflows"))
}

/// Parses `4096x2048` into extents.
pub fn parse_extents(s: &str) -> Result<Vec<u64>, String> {
    s.split(['x', 'X'])
        .map(|p| p.trim().parse::<u64>().map_err(|_| format!("`{s}` is not an extent list")))
        .collect()
}

pub fn format_extents(e: &[u64]) -> String {
    e.iter().map(u64::to_string).collect::<Vec<_>>().join("x")
}

fn parse_kv(text: &str) -> Result<HashMap<String, String>, ConfigError> {
    let mut map = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        let k = k.trim().to_string();
        if map.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                msg: format!("duplicate key `{k}`"),
            });
        }
    }
    Ok(map)
}

fn invalid(key: &str, msg: impl ToString) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        msg: msg.to_string(),
    }
}

impl ServerConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_str(&std::fs::read_to_string(path)?)
    }

    /// Renders the config in the file format read by [`ServerConfig::from_file`].
    pub fn to_config_string(&self, tier: &TierSpec) -> String {
        let mut s = String::new();
        s += &format!("server_id = {}\n", self.server_id);
        s += &format!("servers = {}\n", self.servers.join(","));
        if let Some(l) = &self.listen {
            s += &format!("listen = {l}\n");
        }
        s += &format!("global = {}\n", format_extents(&self.grid.global().extents()));
        s += &format!("block = {}\n", format_extents(self.grid.block_extent()));
        s += &format!("tier = {tier}\n");
        s += &format!("capacity = {}\n", self.tier.capacity_bytes);
        s += &format!("workers = {}\n", self.workers);
        s += &format!("max_versions = {}\n", self.max_versions);
        s
    }
}

impl FromStr for ServerConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, ConfigError> {
        let mut kv = parse_kv(text)?;
        let known = [
            "server_id",
            "servers",
            "listen",
            "global",
            "block",
            "tier",
            "capacity",
            "workers",
            "max_versions",
        ];
        if let Some(k) = kv.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(invalid(k, "unknown key"));
        }
        let server_id: u32 = kv
            .remove("server_id")
            .ok_or(ConfigError::Missing("server_id"))?
            .parse()
            .map_err(|e| invalid("server_id", e))?;
        let servers: Vec<String> = kv
            .remove("servers")
            .ok_or(ConfigError::Missing("servers"))?
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        if servers.is_empty() {
            return Err(invalid("servers", "empty server list"));
        }
        if server_id as usize >= servers.len() {
            return Err(invalid(
                "server_id",
                format!("{server_id} out of range for {} servers", servers.len()),
            ));
        }
        let global = parse_extents(&kv.remove("global").ok_or(ConfigError::Missing("global"))?)
            .map_err(|e| invalid("global", e))?;
        let global = NDBox::from_extents(&global).map_err(|e| invalid("global", e))?;
        let n = servers.len() as u32;
        let grid = match kv.remove("block") {
            Some(b) => {
                let block = parse_extents(&b).map_err(|e| invalid("block", e))?;
                DistGrid::new(global, block, n)
            }
            None => DistGrid::with_default_blocks(global, n),
        }
        .map_err(|e| invalid("block", e))?;
        let capacity = match kv.remove("capacity") {
            Some(c) => parse_size(&c).map_err(|e| invalid("capacity", e))?,
            None => 1 << 30,
        };
        let tier_spec: TierSpec = kv
            .remove("tier")
            .unwrap_or_else(|| "heap".into())
            .parse()
            .map_err(|e| invalid("tier", e))?;
        let tier: TierConfig = tier_spec
            .into_config(capacity)
            .map_err(|e| invalid("tier", e))?;
        let workers = match kv.remove("workers") {
            Some(w) => w.parse().map_err(|e| invalid("workers", e))?,
            None => super::server::default_workers(),
        };
        if workers == 0 {
            return Err(invalid("workers", "must be at least 1"));
        }
        let max_versions = match kv.remove("max_versions") {
            Some(m) => m.parse().map_err(|e| invalid("max_versions", e))?,
            None => DEFAULT_MAX_VERSIONS,
        };
        let mut cfg = ServerConfig::new(server_id, servers, grid, tier);
        cfg.listen = kv.remove("listen");
        cfg.workers = workers;
        cfg.max_versions = max_versions;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tier::TierKind;

    #[test]
    fn sizes() {
        assert_eq!(parse_size("4096").unwrap(), 4096);
        assert_eq!(parse_size("4K").unwrap(), 4096);
        assert_eq!(parse_size("64MiB").unwrap(), 64 << 20);
        assert_eq!(parse_size("2g").unwrap(), 2 << 30);
        assert!(parse_size("12Q").is_err());
        assert!(parse_size("").is_err());
    }

    #[test]
    fn parses_full_file() {
        let text = "\
# two-server cluster
server_id = 1
servers = 127.0.0.1:7000, 127.0.0.1:7001
global = 1024x512
block = 128x128   # 8x4 blocks
tier = delayed:fast:mmap:/tmp/x.tier
capacity = 256M
workers = 3
max_versions = 4
";
        let cfg: ServerConfig = text.parse().unwrap();
        assert_eq!(cfg.server_id, 1);
        assert_eq!(cfg.listen_addr(), "127.0.0.1:7001");
        assert_eq!(cfg.grid.blocks_per_dim(), vec![8, 4]);
        assert_eq!(cfg.tier.capacity_bytes, 256 << 20);
        assert_eq!(cfg.tier.kind, TierKind::Delayed(Box::new(TierKind::MmapFile)));
        assert_eq!(cfg.workers, 3);
        assert_eq!(cfg.max_versions, 4);
        let again: ServerConfig = cfg
            .to_config_string(&"delayed:fast:mmap:/tmp/x.tier".parse().unwrap())
            .parse()
            .unwrap();
        assert_eq!(again.grid, cfg.grid);
        assert_eq!(again.tier, cfg.tier);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(matches!("servers = a:1".parse::<ServerConfig>(), Err(ConfigError::Missing("server_id"))));
        assert!(matches!(
            "server_id = 2\nservers = a:1\nglobal = 8".parse::<ServerConfig>(),
            Err(ConfigError::Invalid { .. })
        ));
        assert!(matches!(
            "server_id = 0\nservers = a:1\nglobal = 8\nbogus = 1".parse::<ServerConfig>(),
            Err(ConfigError::Invalid { .. })
        ));
        assert!(matches!("nonsense".parse::<ServerConfig>(), Err(ConfigError::Syntax { line: 1, .. })));
    }
}
