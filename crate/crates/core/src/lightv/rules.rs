use crate::addressing::{
    parse_hex, Asid, AddressError, ParseError, Pfn, PteAttrs, VirtualAddress, PAGE_SHIFT, PAGE_SIZE, VA_BITS,
};

pub type RuleId = u32;

/// Redirect every page of `[start, end)` in one address space onto
/// consecutive frames starting at `replacement_base`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct RewriteRule {
    pub id: RuleId,
    pub asid: Asid,
    pub start: VirtualAddress,
    /// Exclusive; may be exactly 2^39.
    pub end: u64,
    pub replacement_base: Pfn,
    /// OR-ed into the original leaf attributes.
    pub attr_overrides: Option<PteAttrs>,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum RuleError {
    #[error("rule range {start:#x}..{end:#x} is empty, not page aligned or outside the VA space")]
    BadRange { start: u64, end: u64 },
    #[error(transparent)]
    Address(#[from] AddressError),
}

impl RewriteRule {
    pub fn new(
        id: RuleId,
        asid: Asid,
        start: u64,
        end: u64,
        replacement_base: u64,
        attr_overrides: Option<PteAttrs>,
    ) -> Result<Self, RuleError> {
        let bad = RuleError::BadRange { start, end };
        let aligned = start.is_multiple_of(PAGE_SIZE) && end.is_multiple_of(PAGE_SIZE);
        if end <= start || !aligned || end > 1 << VA_BITS {
            return Err(bad);
        }
        let rule = Self {
            id,
            asid,
            start: VirtualAddress::new(start)?,
            end,
            replacement_base: Pfn::new(replacement_base)?,
            attr_overrides,
        };
        rule.replacement_base.offset(rule.pages() - 1)?;
        Ok(rule)
    }

    fn end_raw(&self) -> u64 {
        self.end
    }

    pub fn pages(&self) -> u64 {
        (self.end_raw() - self.start.value()) >> PAGE_SHIFT
    }

    pub fn contains(&self, va: u64) -> bool {
        va >= self.start.value() && va < self.end_raw()
    }

    pub fn intersects(&self, lo: u64, hi: u64) -> bool {
        self.start.value() < hi && lo < self.end_raw()
    }

    pub fn overlaps(&self, other: &RewriteRule) -> bool {
        self.asid == other.asid && self.intersects(other.start.value(), other.end_raw())
    }

    /// Replacement frame for the page containing `va`.
    pub fn target_pfn(&self, va: u64) -> Pfn {
        debug_assert!(self.contains(va));
        Pfn::from_raw(self.replacement_base.value() + ((va - self.start.value()) >> PAGE_SHIFT))
    }

    pub fn page_vas(&self) -> impl Iterator<Item = VirtualAddress> + '_ {
        (self.start.value()..self.end_raw())
            .step_by(1 << PAGE_SHIFT)
            .map(|v| VirtualAddress::new(v).unwrap())
    }
}

/// One rule per line: `asid va_start va_end pfn_base [attr_overrides]`,
/// hex fields, `#` comments. Rule ids follow line order from 0.
pub fn parse_rules(text: &str) -> Result<Vec<RewriteRule>, ParseError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| ParseError { line: n + 1, message };
        let f: Vec<&str> = line.split_whitespace().collect();
        if !(4..=5).contains(&f.len()) {
            return Err(err(format!("expected 4 or 5 fields, found {}", f.len())));
        }
        let hex = |i: usize| parse_hex(f[i]).ok_or_else(|| err(format!("bad hex field `{}`", f[i])));
        let asid = Asid::try_from(hex(0)?).map_err(|_| err("asid out of range".into()))?;
        let overrides = match f.get(4) {
            Some(s) => Some(
                parse_hex(s)
                    .and_then(PteAttrs::from_bits)
                    .ok_or_else(|| err(format!("bad attribute override `{s}`")))?,
            ),
            None => None,
        };
        let rule = RewriteRule::new(out.len() as RuleId, asid, hex(1)?, hex(2)?, hex(3)?, overrides)
            .map_err(|e| err(e.to_string()))?;
        out.push(rule);
    }
    Ok(out)
}
