//! `--config <file>`: a JSON object whose keys are long flag names
//! (`keep-last` or `keep_last`). Flags given on the command line win.

use ckpt_core::Error;
use serde_json::Value;

fn config_path(args: &[String]) -> Result<Option<String>, Error> {
    for (i, a) in args.iter().enumerate() {
        if let Some(v) = a.strip_prefix("--config=") {
            return Ok(Some(v.to_string()));
        }
        if a == "--config" {
            return args.get(i + 1).cloned().map(Some).ok_or_else(|| Error::InvalidOption("--config needs a file".into()));
        }
    }
    Ok(None)
}

fn scalar(key: &str, v: &Value) -> Result<String, Error> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        other => Err(Error::InvalidOption(format!("config key {key:?}: unsupported value {other}"))),
    }
}

/// Appends flags from the config file that are absent from `args`.
pub fn expand(mut args: Vec<String>) -> Result<Vec<String>, Error> {
    let Some(path) = config_path(&args)? else { return Ok(args) };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::InvalidOption(format!("config {path}: {e}")))?;
    let doc: serde_json::Map<String, Value> =
        serde_json::from_str(&text).map_err(|e| Error::InvalidOption(format!("config {path}: {e}")))?;
    let mut extra = vec![];
    for (key, value) in doc {
        let flag = format!("--{}", key.replace('_', "-"));
        if flag == "--config" || args.iter().any(|a| *a == flag || a.starts_with(&format!("{flag}="))) {
            continue;
        }
        match &value {
            Value::Bool(true) => extra.push(flag),
            Value::Bool(false) | Value::Null => {}
            Value::Array(items) => {
                for item in items {
                    extra.push(format!("{flag}={}", scalar(&key, item)?));
                }
            }
            v => extra.push(format!("{flag}={}", scalar(&key, v)?)),
        }
    }
    args.extend(extra);
    Ok(args)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_line_wins() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.json");
        std::fs::write(&f, r#"{"processes": 4, "keep_last": 2, "sweep-tmp": true, "json": false, "crash": ["1@2", "0@5"]}"#).unwrap();
        let args: Vec<String> = ["ckpt", "gc", "root", "--processes", "2", "--config", f.to_str().unwrap()].map(String::from).to_vec();
        let out = expand(args).unwrap();
        assert_eq!(&out[7..], ["--crash=1@2", "--crash=0@5", "--keep-last=2", "--sweep-tmp"]);
    }

    #[test]
    fn no_config_is_identity() {
        let args: Vec<String> = vec!["ckpt".into(), "inspect".into(), "x".into()];
        assert_eq!(expand(args.clone()).unwrap(), args);
    }
}
