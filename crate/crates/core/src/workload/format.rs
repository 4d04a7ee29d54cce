//! Trace file formats.
//!
//! Text grammar, one event per line (`#` starts a comment):
//!
//! ```text
//! event := tid ' ' op
//! op    := 'R' addr | 'W' addr value | 'PB' kid | 'PE'
//!        | 'SY' ('acq' | 'rel' | 'fence') addr | 'AL' base len | 'CP' cycles
//! ```
//!
//! `tid`, `kid` and `cycles` are decimal; `addr`, `value`, `base` and `len`
//! are hexadecimal with an optional `0x` prefix.
//!
//! The binary form is `b"LPTR"`, a little-endian `u32` version, a `u64`
//! event count, then per event an opcode byte, a `u32` thread id and the
//! operands as `u64`s.

use std::fmt::Write as _;
use std::path::Path;

use super::{EventKind, SyncKind, Trace, TraceEvent};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LPTR";
const VERSION: u32 = 1;

pub fn serialize_trace(trace: &Trace) -> String {
    let mut out = String::with_capacity(trace.len() * 16);
    for e in &trace.events {
        let t = e.thread;
        let _ = match e.kind {
            EventKind::Read(a) => writeln!(out, "{t} R {a:x}"),
            EventKind::Write(a, v) => writeln!(out, "{t} W {a:x} {v:x}"),
            EventKind::PimBegin(k) => writeln!(out, "{t} PB {k}"),
            EventKind::PimEnd => writeln!(out, "{t} PE"),
            EventKind::Sync(kind, a) => writeln!(out, "{t} SY {} {a:x}", kind.mnemonic()),
            EventKind::AllocPim(b, l) => writeln!(out, "{t} AL {b:x} {l:x}"),
            EventKind::Compute(c) => writeln!(out, "{t} CP {c}"),
        };
    }
    out
}

fn hex(tok: &str) -> std::result::Result<u64, String> {
    let t = tok.strip_prefix("0x").or_else(|| tok.strip_prefix("0X")).unwrap_or(tok);
    u64::from_str_radix(t, 16).map_err(|e| format!("bad hex `{tok}`: {e}"))
}

fn dec<T: std::str::FromStr>(tok: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    tok.parse::<T>().map_err(|e| format!("bad number `{tok}`: {e}"))
}

fn parse_line(line: &str) -> std::result::Result<Option<TraceEvent>, String> {
    let body = line.split('#').next().unwrap_or("").trim();
    if body.is_empty() {
        return Ok(None);
    }
    let toks: Vec<&str> = body.split_whitespace().collect();
    let arity = |n: usize| {
        if toks.len() == n {
            Ok(())
        } else {
            Err(format!("expected {} operands for `{}`, found {}", n - 2, toks.get(1).unwrap_or(&""), toks.len() - 2))
        }
    };
    if toks.len() < 2 {
        return Err("expected `tid op ...`".into());
    }
    let thread: u32 = dec(toks[0])?;
    let kind = match toks[1] {
        "R" => {
            arity(3)?;
            EventKind::Read(hex(toks[2])?)
        }
        "W" => {
            arity(4)?;
            EventKind::Write(hex(toks[2])?, hex(toks[3])?)
        }
        "PB" => {
            arity(3)?;
            EventKind::PimBegin(dec(toks[2])?)
        }
        "PE" => {
            arity(2)?;
            EventKind::PimEnd
        }
        "SY" => {
            arity(4)?;
            let kind = match toks[2] {
                "acq" => SyncKind::Acquire,
                "rel" => SyncKind::Release,
                "fence" => SyncKind::Fence,
                other => return Err(format!("unknown sync kind `{other}`")),
            };
            EventKind::Sync(kind, hex(toks[3])?)
        }
        "AL" => {
            arity(4)?;
            EventKind::AllocPim(hex(toks[2])?, hex(toks[3])?)
        }
        "CP" => {
            arity(3)?;
            EventKind::Compute(dec(toks[2])?)
        }
        other => return Err(format!("unknown op `{other}`")),
    };
    Ok(Some(TraceEvent { thread, kind }))
}

/// Parse the text format. The result is structurally validated.
pub fn parse_trace(text: &str) -> Result<Trace> {
    let mut events = Vec::new();
    for (i, line) in text.lines().enumerate() {
        match parse_line(line) {
            Ok(Some(e)) => events.push(e),
            Ok(None) => {}
            Err(message) => return Err(Error::Parse { line: i + 1, message }),
        }
    }
    let trace = Trace::new(events);
    trace.validate()?;
    Ok(trace)
}

pub fn serialize_binary(trace: &Trace) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + trace.len() * 21);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(trace.len() as u64).to_le_bytes());
    for e in &trace.events {
        let (op, args): (u8, Vec<u64>) = match e.kind {
            EventKind::Read(a) => (0, vec![a]),
            EventKind::Write(a, v) => (1, vec![a, v]),
            EventKind::PimBegin(k) => (2, vec![u64::from(k)]),
            EventKind::PimEnd => (3, vec![]),
            EventKind::Sync(SyncKind::Acquire, a) => (4, vec![a]),
            EventKind::Sync(SyncKind::Release, a) => (5, vec![a]),
            EventKind::Sync(SyncKind::Fence, a) => (6, vec![a]),
            EventKind::AllocPim(b, l) => (7, vec![b, l]),
            EventKind::Compute(c) => (8, vec![c]),
        };
        out.push(op);
        out.extend_from_slice(&e.thread.to_le_bytes());
        for a in args {
            out.extend_from_slice(&a.to_le_bytes());
        }
    }
    out
}

pub fn parse_binary(bytes: &[u8]) -> Result<Trace> {
    let mut pos = 0usize;
    let bad = |pos: usize, msg: &str| Error::Parse { line: pos, message: format!("binary trace: {msg}") };
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad(pos, "truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(bad(0, "bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(4, "unsupported version"));
    }
    let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
    let mut events = Vec::with_capacity(count.min(1 << 24) as usize);
    for _ in 0..count {
        let op = take(1)?[0];
        let thread = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        let mut arg = || -> Result<u64> { Ok(u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"))) };
        let kind = match op {
            0 => EventKind::Read(arg()?),
            1 => EventKind::Write(arg()?, arg()?),
            2 => EventKind::PimBegin(u32::try_from(arg()?).map_err(|_| bad(0, "kernel id overflow"))?),
            3 => EventKind::PimEnd,
            4 => EventKind::Sync(SyncKind::Acquire, arg()?),
            5 => EventKind::Sync(SyncKind::Release, arg()?),
            6 => EventKind::Sync(SyncKind::Fence, arg()?),
            7 => EventKind::AllocPim(arg()?, arg()?),
            8 => EventKind::Compute(arg()?),
            _ => return Err(bad(0, "unknown opcode")),
        };
        events.push(TraceEvent { thread, kind });
    }
    let trace = Trace::new(events);
    trace.validate()?;
    Ok(trace)
}

/// Read a trace, choosing the format from the file's magic bytes.
pub fn read_trace_file(path: &Path) -> Result<Trace> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(MAGIC) {
        parse_binary(&bytes)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::Parse { line: 0, message: "trace is not UTF-8".into() })?;
        parse_trace(&text)
    }
}

pub fn write_trace_file(path: &Path, trace: &Trace, binary: bool) -> Result<()> {
    let res = if binary {
        std::fs::write(path, serialize_binary(trace))
    } else {
        std::fs::write(path, serialize_trace(trace))
    };
    res.map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file() {
        assert!(parse_trace("").unwrap().is_empty());
        assert!(parse_trace("# just a comment\n\n").unwrap().is_empty());
    }

    #[test]
    fn every_op_parses() {
        let text = "0 AL 0x1000 1000\n0 W 1000 ff\n1 PB 3\n1 R 1008\n1 SY fence 1000\n1 PE\n0 SY acq 1010\n0 SY rel 1010\n0 CP 25\n";
        let t = parse_trace(text).unwrap();
        assert_eq!(t.len(), 9);
        assert_eq!(t.events[1].kind, EventKind::Write(0x1000, 0xff));
        assert_eq!(serialize_trace(&t), text.replace("0x1000", "1000"));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse_trace("0 R 40\n0 X 40\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(matches!(parse_trace("0 W 40\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_trace("0 PE\n"), Err(Error::Trace(_))));
        assert!(matches!(parse_trace("zz R 40\n"), Err(Error::Parse { .. })));
    }

    #[test]
    fn binary_rejects_garbage() {
        assert!(parse_binary(b"nope").is_err());
        assert!(parse_binary(b"LPTR\x01\0\0\0\x05\0\0\0\0\0\0\0").is_err());
    }
}
