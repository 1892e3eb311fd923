use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use drivesense::Result;

/// `# config: {...}` header line carried by every CSV artifact.
pub fn config_line(config: &serde_json::Value) -> Result<String> {
    Ok(format!("# config: {}\n", serde_json::to_string(config)?))
}

/// CSV artifact with a config header line.
pub fn csv_bytes(
    config: &serde_json::Value,
    header: &[String],
    rows: &[Vec<String>],
) -> Result<Vec<u8>> {
    let mut buf = config_line(config)?.into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
    }
    Ok(buf)
}

/// JSON artifact `{"config": ..., <fields of body>}`.
pub fn json_bytes<T: Serialize>(config: &serde_json::Value, body: &T) -> Result<Vec<u8>> {
    let mut obj = serde_json::Map::new();
    obj.insert("config".into(), config.clone());
    match serde_json::to_value(body)? {
        serde_json::Value::Object(m) => obj.extend(m),
        other => {
            obj.insert("result".into(), other);
        }
    }
    let mut text = serde_json::to_string_pretty(&serde_json::Value::Object(obj))?;
    text.push('\n');
    Ok(text.into_bytes())
}

/// Writes to `path`, or stdout when there is none.
pub fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(p, bytes)?;
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes)?;
            out.flush()?;
        }
    }
    Ok(())
}

pub fn num(v: f64) -> String {
    v.to_string()
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}
