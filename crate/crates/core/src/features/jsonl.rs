use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::Request;

/// What to do with a line that fails to parse or validate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ErrorPolicy {
    #[default]
    FailFast,
    SkipAndCount,
}

/// Streams requests from JSON lines, one request per non-blank line.
pub struct JsonlReader<R> {
    lines: std::io::Lines<R>,
    line_no: usize,
    policy: ErrorPolicy,
    skipped: usize,
    done: bool,
}

impl<R: BufRead> JsonlReader<R> {
    pub fn new(reader: R, policy: ErrorPolicy) -> Self {
        Self {
            lines: reader.lines(),
            line_no: 0,
            policy,
            skipped: 0,
            done: false,
        }
    }

    /// Lines dropped under [`ErrorPolicy::SkipAndCount`].
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    fn parse(&self, line: &str) -> Result<Request> {
        let at = |message: String| Error::Record {
            line: self.line_no,
            message,
        };
        let req: Request = serde_json::from_str(line).map_err(|e| at(e.to_string()))?;
        req.validate().map_err(|e| match e {
            Error::Record { message, .. } => at(message),
            other => other,
        })?;
        Ok(req)
    }
}

impl<R: BufRead> Iterator for JsonlReader<R> {
    type Item = Result<Request>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.done {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => {
                    self.done = true;
                    return Some(Err(e.into()));
                }
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            match self.parse(&line) {
                Ok(r) => return Some(Ok(r)),
                Err(e) => match self.policy {
                    ErrorPolicy::FailFast => {
                        self.done = true;
                        return Some(Err(e));
                    }
                    ErrorPolicy::SkipAndCount => {
                        log::warn!("skipping record: {e}");
                        self.skipped += 1;
                    }
                },
            }
        }
        None
    }
}

pub fn load_jsonl(path: impl AsRef<Path>, policy: ErrorPolicy) -> Result<JsonlReader<BufReader<File>>> {
    let f = File::open(path)?;
    Ok(JsonlReader::new(BufReader::new(f), policy))
}

/// Loads every request, failing on the first bad line.
pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Request>> {
    load_jsonl(path, ErrorPolicy::FailFast)?.collect()
}

pub fn write_jsonl<'a, W: Write>(
    mut out: W,
    requests: impl IntoIterator<Item = &'a Request>,
) -> Result<()> {
    for r in requests {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
