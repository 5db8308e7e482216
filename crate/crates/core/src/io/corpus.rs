use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Deserialize)]
struct DocumentLine {
    document: String,
}

/// Lazily yields one document per non-blank line across one or more files.
///
/// Files ending in `.jsonl` hold `{"document": ...}` objects; anything else
/// is plain text. Only the current line is held in memory.
pub struct CorpusStream {
    files: std::vec::IntoIter<PathBuf>,
    current: Option<OpenFile>,
    buf: Vec<u8>,
    documents: u64,
    bytes: u64,
}

struct OpenFile {
    path: PathBuf,
    reader: BufReader<File>,
    jsonl: bool,
    line: u64,
    offset: usize,
}

/// Stream a file, or every regular file under a directory in sorted path
/// order.
pub fn stream_corpus(path: impl AsRef<Path>) -> Result<CorpusStream> {
    let path = path.as_ref();
    let meta = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
    let files = if meta.is_dir() {
        let mut files = Vec::new();
        for entry in walkdir::WalkDir::new(path).sort_by_file_name() {
            let entry = entry.map_err(|e| {
                let p = e.path().unwrap_or(path).to_path_buf();
                Error::io(p, e.into())
            })?;
            if entry.file_type().is_file() {
                files.push(entry.into_path());
            }
        }
        files
    } else {
        vec![path.to_path_buf()]
    };
    Ok(CorpusStream {
        files: files.into_iter(),
        current: None,
        buf: Vec::with_capacity(1 << 12),
        documents: 0,
        bytes: 0,
    })
}

impl CorpusStream {
    /// Documents yielded so far.
    pub fn documents(&self) -> u64 {
        self.documents
    }

    /// Bytes read so far, including skipped lines.
    pub fn bytes_read(&self) -> u64 {
        self.bytes
    }

    fn open_next(&mut self) -> Option<Result<()>> {
        let path = self.files.next()?;
        let jsonl = path.extension().is_some_and(|e| e == "jsonl");
        Some(match File::open(&path) {
            Ok(f) => {
                self.current = Some(OpenFile {
                    path,
                    reader: BufReader::with_capacity(1 << 16, f),
                    jsonl,
                    line: 0,
                    offset: 0,
                });
                Ok(())
            }
            Err(e) => Err(Error::io(path, e)),
        })
    }
}

impl Iterator for CorpusStream {
    type Item = Result<String>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let Some(file) = self.current.as_mut() else {
                if let Err(e) = self.open_next()? {
                    return Some(Err(e));
                }
                continue;
            };
            self.buf.clear();
            let n = match file.reader.read_until(b'\n', &mut self.buf) {
                Ok(0) => {
                    self.current = None;
                    continue;
                }
                Ok(n) => n,
                Err(e) => return Some(Err(Error::io(&file.path, e))),
            };
            file.line += 1;
            let start = file.offset;
            file.offset += n;
            self.bytes += n as u64;

            let skip = if file.line == 1 && self.buf.starts_with(b"\xEF\xBB\xBF") { 3 } else { 0 };
            let text = match std::str::from_utf8(&self.buf[skip..]) {
                Ok(t) => t,
                Err(e) => {
                    let err = Error::Decode {
                        path: file.path.clone(),
                        line: file.line,
                        offset: start + skip + e.valid_up_to(),
                    };
                    self.current = None;
                    self.files = Vec::new().into_iter();
                    return Some(Err(err));
                }
            };
            let text = text.trim_end_matches(['\n', '\r']);
            if text.trim().is_empty() {
                continue;
            }
            let doc = if file.jsonl {
                match serde_json::from_str::<DocumentLine>(text) {
                    Ok(d) => d.document,
                    Err(e) => {
                        return Some(Err(Error::Validation(format!(
                            "{}:{}: {e}",
                            file.path.display(),
                            file.line
                        ))))
                    }
                }
            } else {
                text.to_owned()
            };
            if doc.trim().is_empty() {
                continue;
            }
            self.documents += 1;
            return Some(Ok(doc));
        }
    }
}
