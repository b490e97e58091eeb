//! Access traces and their line-oriented text form.
//!
//! One access per line: `asid op va [data]`, all fields hex. `op` is `r`
//! (read), `w` (write `data`) or `m` (read, add `data`, write back).
//! Data accesses are 8-byte words at 8-byte aligned addresses.

use std::fmt;

use sha2::{Digest, Sha256};

use crate::addressing::{parse_hex, Asid, ParseError, VirtualAddress};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum Op {
    Read,
    Write(u64),
    Modify(u64),
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct Access {
    pub asid: Asid,
    pub va: VirtualAddress,
    pub op: Op,
}

impl Access {
    pub fn read(asid: Asid, va: VirtualAddress) -> Self {
        Self { asid, va, op: Op::Read }
    }

    pub fn write(asid: Asid, va: VirtualAddress, value: u64) -> Self {
        Self {
            asid,
            va,
            op: Op::Write(value),
        }
    }

    pub fn modify(asid: Asid, va: VirtualAddress, delta: u64) -> Self {
        Self {
            asid,
            va,
            op: Op::Modify(delta),
        }
    }

    fn digest_into(&self, h: &mut Sha256) {
        let (tag, data) = match self.op {
            Op::Read => (0u8, 0),
            Op::Write(v) => (1, v),
            Op::Modify(v) => (2, v),
        };
        h.update(self.asid.to_le_bytes());
        h.update(self.va.value().to_le_bytes());
        h.update([tag]);
        h.update(data.to_le_bytes());
    }
}

impl fmt::Display for Access {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.op {
            Op::Read => write!(f, "{:x} r {:#x}", self.asid, self.va.value()),
            Op::Write(v) => write!(f, "{:x} w {:#x} {:#x}", self.asid, self.va.value(), v),
            Op::Modify(v) => write!(f, "{:x} m {:#x} {:#x}", self.asid, self.va.value(), v),
        }
    }
}

/// Incremental fingerprint of an access sequence.
#[derive(Clone, Default)]
pub struct TraceDigest {
    hasher: Sha256,
    len: u64,
}

impl TraceDigest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, a: &Access) {
        a.digest_into(&mut self.hasher);
        self.len += 1;
    }

    pub fn finish(self) -> u64 {
        let out = self.hasher.finalize();
        u64::from_le_bytes(out[..8].try_into().unwrap())
    }

    pub fn of<'a>(trace: impl IntoIterator<Item = &'a Access>) -> u64 {
        let mut d = Self::new();
        trace.into_iter().for_each(|a| d.push(a));
        d.finish()
    }
}

pub fn parse_trace(text: &str) -> Result<Vec<Access>, ParseError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| ParseError { line: n + 1, message };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < 3 {
            return Err(err("expected `asid op va [data]`".into()));
        }
        let asid = parse_hex(f[0])
            .and_then(|a| Asid::try_from(a).ok())
            .ok_or_else(|| err(format!("bad asid `{}`", f[0])))?;
        let va = parse_hex(f[2])
            .and_then(|v| VirtualAddress::new(v).ok())
            .ok_or_else(|| err(format!("bad VA `{}`", f[2])))?;
        let data = || {
            f.get(3)
                .and_then(|d| parse_hex(d))
                .ok_or_else(|| err(format!("`{}` needs a data field", f[1])))
        };
        let op = match (f[1], f.len()) {
            ("r", 3) => Op::Read,
            ("w", 4) => Op::Write(data()?),
            ("m", 4) => Op::Modify(data()?),
            (op, _) => return Err(err(format!("bad op `{op}` or field count"))),
        };
        out.push(Access { asid, va, op });
    }
    Ok(out)
}

pub fn format_trace<'a>(trace: impl IntoIterator<Item = &'a Access>) -> String {
    let mut s = String::new();
    for a in trace {
        s.push_str(&a.to_string());
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_all_ops() {
        let t = parse_trace("# warmup\n1 r 0x1000\n1 w 1008 ff\n2 m 0x2000 0x1 # inc\n").unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t[1].op, Op::Write(0xff));
        assert_eq!(t[2].asid, 2);
        assert!(parse_trace("1 r").is_err());
        assert!(parse_trace("1 w 0x1000").is_err());
        assert!(parse_trace("1 r 0x1000 5").is_err());
        assert!(parse_trace("1 x 0x1000").is_err());
        assert!(parse_trace("1 r 0x8000000000").is_err());
    }

    #[test]
    fn digest_is_order_sensitive() {
        let va = VirtualAddress::new(0x1000).unwrap();
        let a = [Access::read(1, va), Access::write(1, va, 1)];
        let b = [a[1], a[0]];
        assert_ne!(TraceDigest::of(&a), TraceDigest::of(&b));
        assert_eq!(TraceDigest::of(&a), TraceDigest::of(&a));
    }

    fn access() -> impl Strategy<Value = Access> {
        (any::<u16>(), 0u64..(1 << 39), 0u8..3, any::<u64>()).prop_map(|(asid, va, op, d)| Access {
            asid,
            va: VirtualAddress::new(va).unwrap(),
            op: match op {
                0 => Op::Read,
                1 => Op::Write(d),
                _ => Op::Modify(d),
            },
        })
    }

    proptest! {
        #[test]
        fn text_round_trip(trace in proptest::collection::vec(access(), 0..50)) {
            prop_assert_eq!(parse_trace(&format_trace(&trace)).unwrap(), trace);
        }
    }
}
