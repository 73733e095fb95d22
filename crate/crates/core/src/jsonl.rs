//! Line-delimited JSON helpers shared by every stage.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> JsonlError + '_ {
    move |source| JsonlError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads every non-blank line of `path` as a `T`.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|source| JsonlError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        out.push(value);
    }
    Ok(out)
}

/// Like [`read_jsonl`] but drops a trailing line that fails to parse, which
/// is what an interrupted append leaves behind. Returns the parsed records
/// and the byte length of the intact prefix.
pub fn read_jsonl_prefix<T: DeserializeOwned>(path: &Path) -> Result<(Vec<T>, u64), JsonlError> {
    let data = std::fs::read(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    let mut good = 0u64;
    let mut offset = 0usize;
    let mut line_no = 0;
    while offset < data.len() {
        line_no += 1;
        let end = data[offset..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|p| offset + p);
        let Some(end) = end else {
            // No terminating newline: torn write.
            break;
        };
        let line = &data[offset..end];
        if !line.iter().all(u8::is_ascii_whitespace) {
            match serde_json::from_slice(line) {
                Ok(v) => out.push(v),
                Err(source) if end + 1 >= data.len() => {
                    log::warn!("{}:{line_no}: dropping torn line ({source})", path.display());
                    break;
                }
                Err(source) => {
                    return Err(JsonlError::Parse {
                        path: path.to_path_buf(),
                        line: line_no,
                        source,
                    })
                }
            }
        }
        offset = end + 1;
        good = offset as u64;
    }
    Ok((out, good))
}

/// Writes `records` to `path`, one compact JSON object per line.
pub fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    records: impl IntoIterator<Item = &'a T>,
) -> Result<(), JsonlError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for record in records {
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Append-only JSONL writer. Each `append` call is flushed as a unit.
pub struct JsonlAppender {
    path: PathBuf,
    file: File,
}

impl JsonlAppender {
    /// Opens `path` for appending after truncating it to `keep_bytes`.
    pub fn open(path: &Path, keep_bytes: u64) -> Result<Self, JsonlError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        file.set_len(keep_bytes).map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append<'a, T: Serialize + 'a>(
        &mut self,
        records: impl IntoIterator<Item = &'a T>,
    ) -> Result<(), JsonlError> {
        let mut buf = Vec::new();
        for record in records {
            serde_json::to_writer(&mut buf, record)?;
            buf.push(b'\n');
        }
        self.file.write_all(&buf).map_err(io_err(&self.path))?;
        self.file.flush().map_err(io_err(&self.path))
    }
}

/// Writes pretty JSON followed by a newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), JsonlError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, JsonlError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| JsonlError::Parse {
        path: path.to_path_buf(),
        line: 0,
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Row {
        id: u32,
    }

    #[test]
    fn round_trip_and_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.jsonl");
        write_jsonl(&path, &[Row { id: 1 }, Row { id: 2 }]).unwrap();
        assert_eq!(read_jsonl::<Row>(&path).unwrap(), vec![Row { id: 1 }, Row { id: 2 }]);

        let mut bytes = std::fs::read(&path).unwrap();
        let intact = bytes.len() as u64;
        bytes.extend_from_slice(b"{\"id\": 3");
        std::fs::write(&path, &bytes).unwrap();
        let (rows, good) = read_jsonl_prefix::<Row>(&path).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(good, intact);

        let mut app = JsonlAppender::open(&path, good).unwrap();
        app.append(&[Row { id: 3 }]).unwrap();
        assert_eq!(read_jsonl::<Row>(&path).unwrap().len(), 3);
    }

    #[test]
    fn parse_error_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"id\":1}\nnot json\n{\"id\":2}\n").unwrap();
        match read_jsonl::<Row>(&path) {
            Err(JsonlError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
