//! Flat weight files: raw little-endian f32 (`.f32`, `.bin`) or one value per line (`.txt`).

use std::fs;
use std::path::Path;

use dkm::{DkmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Raw,
    Text,
}

fn format_of(path: &Path) -> Result<Format> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("f32" | "bin") => Ok(Format::Raw),
        Some("txt") => Ok(Format::Text),
        _ => Err(DkmError::Parameter(format!(
            "{}: unknown weight file extension (use .f32, .bin or .txt)",
            path.display()
        ))),
    }
}

/// Attaches the path to an io error.
pub fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> DkmError + '_ {
    move |e| DkmError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn read(path: &Path) -> Result<Vec<f32>> {
    let format = format_of(path)?;
    let values = match format {
        Format::Raw => {
            let bytes = fs::read(path).map_err(io_at(path))?;
            if bytes.len() % 4 != 0 {
                return Err(DkmError::Parameter(format!(
                    "{}: {} bytes is not a whole number of f32 values",
                    path.display(),
                    bytes.len()
                )));
            }
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
        }
        Format::Text => {
            let text = fs::read_to_string(path).map_err(io_at(path))?;
            let mut out = Vec::new();
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let v: f32 = line
                    .parse()
                    .map_err(|e| DkmError::Parameter(format!("{}:{}: {e}: {line:?}", path.display(), n + 1)))?;
                out.push(v);
            }
            out
        }
    };
    if values.is_empty() {
        return Err(DkmError::Parameter(format!("{}: no weights", path.display())));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(DkmError::Numeric(format!("{}: weight {i} is not finite", path.display())));
    }
    Ok(values)
}

pub fn write(path: &Path, values: &[f32]) -> Result<()> {
    let out = match format_of(path)? {
        Format::Raw => values.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>(),
        // `{:?}` on f32 prints the shortest string that parses back to the same bits
        Format::Text => values.iter().map(|v| format!("{v:?}\n")).collect::<String>().into_bytes(),
    };
    fs::write(path, out).map_err(io_at(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_formats_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let values = vec![0.1f32, -3.5e-8, 1e30, 0.0, 7.0];
        for name in ["w.f32", "w.bin", "w.txt"] {
            let p = dir.path().join(name);
            write(&p, &values).unwrap();
            assert_eq!(read(&p).unwrap(), values);
        }
    }

    #[test]
    fn rejects_unknown_extension_and_bad_text() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read(&dir.path().join("w.npy")).is_err());
        let p = dir.path().join("bad.txt");
        fs::write(&p, "1.0\nabc\n").unwrap();
        let err = read(&p).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }
}
