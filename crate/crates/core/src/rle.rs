//! Run-length encoded masks.
//!
//! Masks are flattened row-major (left to right, top to bottom) and encoded as
//! space-separated `start length` pairs with 1-indexed starts. Canonical
//! encodings have strictly increasing, non-adjacent runs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::BinaryMask;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RleError {
    #[error("odd number of tokens ({0}); runs come in start/length pairs")]
    OddTokenCount(usize),
    #[error("token {index} ({token:?}) is not a non-negative integer")]
    NotNumeric { index: usize, token: String },
    #[error("run #{pair} ({start} {length}) has zero length")]
    EmptyRun { pair: usize, start: u64, length: u64 },
    #[error("run #{pair} ({start} {length}) is outside 1..={total}")]
    OutOfRange {
        pair: usize,
        start: u64,
        length: u64,
        total: u64,
    },
    #[error("run #{pair} ({start} {length}) overlaps or precedes the previous run ending at {prev_end}")]
    Overlap {
        pair: usize,
        start: u64,
        length: u64,
        prev_end: u64,
    },
}

/// One run: `start` is 1-indexed, `length` ≥ 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Run {
    pub start: u64,
    pub length: u64,
}

impl Run {
    /// Last covered flat position (1-indexed, inclusive).
    pub fn end(&self) -> u64 {
        self.start + self.length - 1
    }
}

/// Encoded mask text.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RleString(String);

impl RleString {
    pub fn empty() -> Self {
        Self(String::new())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.trim().is_empty()
    }

    /// Splits the text into pairs without range checks.
    pub fn runs(&self) -> Result<Vec<Run>, RleError> {
        parse_pairs(&self.0)
    }

    /// Checks every invariant against a grid of `total` pixels.
    pub fn validate(&self, total: u64) -> Result<Vec<Run>, RleError> {
        let runs = self.runs()?;
        check_runs(&runs, total)?;
        Ok(runs)
    }
}

impl From<String> for RleString {
    fn from(s: String) -> Self {
        Self(s)
    }
}

impl From<&str> for RleString {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

impl FromStr for RleString {
    type Err = RleError;

    /// Parses and structurally checks the pairs (range checks need the mask size).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_pairs(s)?;
        Ok(Self(s.to_owned()))
    }
}

impl fmt::Display for RleString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn parse_pairs(text: &str) -> Result<Vec<Run>, RleError> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.len() % 2 != 0 {
        return Err(RleError::OddTokenCount(tokens.len()));
    }
    let num = |index: usize| -> Result<u64, RleError> {
        let token = tokens[index];
        if !token.bytes().all(|b| b.is_ascii_digit()) {
            return Err(RleError::NotNumeric {
                index,
                token: token.to_owned(),
            });
        }
        token.parse().map_err(|_| RleError::NotNumeric {
            index,
            token: token.to_owned(),
        })
    };
    (0..tokens.len() / 2)
        .map(|pair| {
            Ok(Run {
                start: num(2 * pair)?,
                length: num(2 * pair + 1)?,
            })
        })
        .collect()
}

fn check_runs(runs: &[Run], total: u64) -> Result<(), RleError> {
    let mut prev_end = 0u64;
    for (pair, r) in runs.iter().enumerate() {
        if r.length == 0 {
            return Err(RleError::EmptyRun {
                pair,
                start: r.start,
                length: r.length,
            });
        }
        if r.start == 0 || r.start.checked_add(r.length - 1).is_none_or(|end| end > total) {
            return Err(RleError::OutOfRange {
                pair,
                start: r.start,
                length: r.length,
                total,
            });
        }
        if r.start <= prev_end {
            return Err(RleError::Overlap {
                pair,
                start: r.start,
                length: r.length,
                prev_end,
            });
        }
        prev_end = r.end();
    }
    Ok(())
}

/// Strict decode: any malformed, out-of-range, or overlapping run is an error.
pub fn decode_rle(rle: &RleString, height: usize, width: usize) -> Result<BinaryMask, RleError> {
    let total = (height * width) as u64;
    let runs = rle.validate(total)?;
    let mut mask = BinaryMask::new_filled(height, width, false);
    let bits = mask.data_mut();
    for r in runs {
        bits[(r.start - 1) as usize..r.end() as usize].fill(true);
    }
    Ok(mask)
}

/// Lenient decode: clips runs that leave the grid and unions overlapping ones.
/// Token-level errors (odd count, non-numeric) still fail.
pub fn decode_rle_lenient(
    rle: &RleString,
    height: usize,
    width: usize,
) -> Result<BinaryMask, RleError> {
    let total = (height * width) as u64;
    let mut mask = BinaryMask::new_filled(height, width, false);
    let bits = mask.data_mut();
    let mut clipped = 0usize;
    for r in rle.runs()? {
        if r.length == 0 {
            continue;
        }
        let start = r.start.max(1);
        let end = r.start.saturating_add(r.length - 1).min(total);
        if start != r.start || end != r.start.saturating_add(r.length - 1) {
            clipped += 1;
        }
        if start <= end {
            bits[(start - 1) as usize..end as usize].fill(true);
        }
    }
    if clipped > 0 {
        log::warn!("lenient RLE decode clipped {clipped} run(s) to a {height}x{width} grid");
    }
    Ok(mask)
}

/// Canonical encoding: minimal sorted runs, empty string for an empty mask.
pub fn encode_rle(mask: &BinaryMask) -> RleString {
    let mut parts = Vec::new();
    let mut run_start: Option<usize> = None;
    let bits = mask.data();
    for (i, &b) in bits.iter().enumerate() {
        match (b, run_start) {
            (true, None) => run_start = Some(i),
            (false, Some(s)) => {
                parts.push(format!("{} {}", s + 1, i - s));
                run_start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = run_start {
        parts.push(format!("{} {}", s + 1, bits.len() - s));
    }
    RleString(parts.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_string_decodes_to_empty_mask() {
        let m = decode_rle(&"".into(), 4, 4).unwrap();
        assert_eq!(m.count_ones(), 0);
        assert_eq!(encode_rle(&m).as_str(), "");
    }

    #[test]
    fn hand_enumerated_example() {
        let m = decode_rle(&"1 2 7 1".into(), 2, 4).unwrap();
        let set: Vec<(usize, usize)> = (0..2)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .filter(|&(r, c)| m[(r, c)])
            .collect();
        assert_eq!(set, vec![(0, 0), (0, 1), (1, 2)]);
        assert_eq!(encode_rle(&m).as_str(), "1 2 7 1");
    }

    #[test]
    fn adjacent_runs_merge_on_reencode() {
        let m = decode_rle(&"1 2 3 2".into(), 2, 4).unwrap();
        assert_eq!(encode_rle(&m).as_str(), "1 4");
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let cases: &[(&str, fn(&RleError) -> bool)] = &[
            ("1 2 3", |e| matches!(e, RleError::OddTokenCount(3))),
            ("1 x", |e| matches!(e, RleError::NotNumeric { index: 1, .. })),
            ("-1 2", |e| matches!(e, RleError::NotNumeric { index: 0, .. })),
            ("0 2", |e| matches!(e, RleError::OutOfRange { pair: 0, .. })),
            ("7 3", |e| matches!(e, RleError::OutOfRange { pair: 0, .. })),
            ("1 3 2 2", |e| matches!(e, RleError::Overlap { pair: 1, .. })),
            ("5 1 1 1", |e| matches!(e, RleError::Overlap { pair: 1, .. })),
            ("1 0", |e| matches!(e, RleError::EmptyRun { pair: 0, .. })),
        ];
        for (text, check) in cases {
            let err = decode_rle(&(*text).into(), 2, 4).unwrap_err();
            assert!(check(&err), "{text:?} gave {err:?}");
        }
    }

    #[test]
    fn lenient_decode_clips() {
        let m = decode_rle_lenient(&"7 5".into(), 2, 4).unwrap();
        assert_eq!(encode_rle(&m).as_str(), "7 2");
        assert!(decode_rle_lenient(&"1".into(), 2, 4).is_err());
    }

    fn arb_mask() -> impl Strategy<Value = BinaryMask> {
        (1usize..=64, 1usize..=64).prop_flat_map(|(h, w)| {
            proptest::collection::vec(any::<bool>(), h * w)
                .prop_map(move |bits| BinaryMask::from_vec(h, w, bits).unwrap())
        })
    }

    proptest! {
        #[test]
        fn encode_then_decode_is_identity(m in arb_mask()) {
            let s = encode_rle(&m);
            let back = decode_rle(&s, m.height(), m.width()).unwrap();
            prop_assert_eq!(&back, &m);
            let total: u64 = s.runs().unwrap().iter().map(|r| r.length).sum();
            prop_assert_eq!(total as usize, m.count_ones());
            for w in s.runs().unwrap().windows(2) {
                prop_assert!(w[0].end() + 1 < w[1].start);
            }
        }
    }
}
