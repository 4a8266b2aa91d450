//! Artifact writers. Every file carries the format version and the config
//! echo of the run that produced it.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use crate::CliResult;

pub const FORMAT_VERSION: u32 = 1;

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// `{format_version, config, <key>: payload}` as pretty JSON.
pub fn write_json(path: &Path, config: &Value, key: &str, payload: &impl Serialize) -> CliResult<()> {
    let doc = json!({
        "format_version": FORMAT_VERSION,
        "config": config,
        key: payload,
    });
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, &doc)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// A CSV writer whose first line is a `#` comment with the echo.
pub fn csv_writer(path: &Path, config: &Value) -> CliResult<csv::Writer<BufWriter<File>>> {
    let mut w = create(path)?;
    writeln!(w, "# brewclip format_version={FORMAT_VERSION} config={config}")?;
    Ok(csv::Writer::from_writer(w))
}

