use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use selectp::{Error, Result};

pub const OUT_ROOT_VAR: &str = "SELECTP_OUT";

/// Layers a config file section under the explicitly given flags and
/// deserializes the result. A config file may hold the parameters
/// directly or under a key named after the command (as manifests do).
pub fn resolve<P: DeserializeOwned, F: Serialize>(command: &str, file: Option<&Path>, flags: &F) -> Result<P> {
    let mut base = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let v: Value = serde_json::from_str(&text)?;
            match v {
                Value::Object(mut m) => match m.remove(command) {
                    Some(Value::Object(section)) => section,
                    _ => m,
                },
                _ => return Err(Error::config("config", "config file must hold a JSON object")),
            }
        }
        None => Map::new(),
    };
    base.remove("command");
    if let Value::Object(over) = serde_json::to_value(flags)? {
        for (k, v) in over {
            if !v.is_null() {
                base.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(base)).map_err(|e| Error::config("config", e.to_string()))
}

/// Fully resolved parameters written next to a command's outputs.
pub fn write_manifest<P: Serialize>(dir: &Path, command: &str, params: &P) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut m = Map::new();
    m.insert("command".into(), Value::String(command.into()));
    m.insert("version".into(), Value::String(env!("CARGO_PKG_VERSION").into()));
    m.insert(command.into(), serde_json::to_value(params)?);
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&Value::Object(m))?).map_err(|e| Error::io(&path, e))
}

/// `explicit`, else `$SELECTP_OUT/<command>`, else `runs/<command>`.
pub fn out_dir(explicit: Option<&PathBuf>, command: &str) -> PathBuf {
    explicit.cloned().unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ROOT_VAR)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        root.join(command)
    })
}

pub fn require<'a>(field: &str, v: &'a Option<PathBuf>) -> Result<&'a PathBuf> {
    v.as_ref().ok_or_else(|| Error::config(field, "is required"))
}
