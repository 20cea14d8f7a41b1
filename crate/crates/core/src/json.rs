//! JSON helpers for model and partition files.
//!
//! Floats in persisted files are written with 17 significant digits
//! (`d.dddddddddddddddde±x`), which round-trips every finite `f64` exactly.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::ser::Formatter;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default)]
pub struct SeventeenDigits;

impl SeventeenDigits {
    // serde_json writes non-finite floats as `null` before reaching the
    // formatter; callers validate finiteness.
    fn write_float<W: ?Sized + Write>(writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{:.16e}", value)
    }
}

impl Formatter for SeventeenDigits {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        Self::write_float(writer, value)
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        Self::write_float(writer, value as f64)
    }
}

pub fn to_string_17<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SeventeenDigits);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

pub fn write_17<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = to_string_17(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_value(path: &Path) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Check a top-level `"version"` field before any schema parsing.
pub fn check_version(value: &serde_json::Value, expected: u64) -> Result<()> {
    match value.get("version") {
        Some(v) => match v.as_u64() {
            Some(found) if found == expected => Ok(()),
            Some(found) => Err(Error::Version { found, expected }),
            None => Err(Error::schema("$.version", "expected an unsigned integer")),
        },
        None => Err(Error::schema("$.version", "missing")),
    }
}
