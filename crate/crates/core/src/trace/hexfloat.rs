// SPDX-License-Identifier: MIT OR Apache-2.0

//! C99-style hexadecimal floating point (`0x1.8p+1`), exact for every finite `f64`.

use serde::de::{self, Deserializer};
use serde::ser::{SerializeSeq, Serializer};
use serde::Deserialize;

const MANT_BITS: u32 = 52;
const MANT_MASK: u64 = (1 << MANT_BITS) - 1;
const EXP_BIAS: i32 = 1023;

/// Shortest hex-float spelling of a finite value; `None` for NaN or infinity.
pub fn format_hex(v: f64) -> Option<String> {
    if !v.is_finite() {
        return None;
    }
    let bits = v.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let exp_field = ((bits >> MANT_BITS) & 0x7ff) as i32;
    let mant = bits & MANT_MASK;
    if exp_field == 0 && mant == 0 {
        return Some(format!("{sign}0x0p+0"));
    }
    let (lead, exp) = if exp_field == 0 {
        (0, 1 - EXP_BIAS)
    } else {
        (1, exp_field - EXP_BIAS)
    };
    let digits = format!("{mant:013x}");
    let frac = digits.trim_end_matches('0');
    Some(if frac.is_empty() {
        format!("{sign}0x{lead}p{exp:+}")
    } else {
        format!("{sign}0x{lead}.{frac}p{exp:+}")
    })
}

/// Parse a hex float such as `0x1.8p+1`, `-0x0p+0` or Python's
/// `float.hex()` output. Values that would need rounding are rejected.
pub fn parse_hex(s: &str) -> Option<f64> {
    let (negative, rest) = match s.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let rest = rest.strip_prefix("0x").or_else(|| rest.strip_prefix("0X"))?;
    let (mantissa, exponent) = rest.split_once(['p', 'P'])?;
    let exp: i32 = exponent.parse().ok()?;
    let (lead, frac) = match mantissa.split_once('.') {
        Some((l, f)) => (l, f),
        None => (mantissa, ""),
    };
    let lead = match lead {
        "0" => 0u64,
        "1" => 1u64,
        _ => return None,
    };
    if frac.len() > 13 || !frac.chars().all(|c| c.is_ascii_hexdigit()) {
        return None;
    }
    let mut mant = 0u64;
    for (i, c) in frac.chars().enumerate() {
        let d = c.to_digit(16)? as u64;
        mant |= d << (4 * (12 - i));
    }
    let bits = if lead == 0 {
        if mant == 0 {
            0
        } else if exp == 1 - EXP_BIAS {
            mant
        } else {
            return None;
        }
    } else {
        let field = exp + EXP_BIAS;
        if !(1..=2046).contains(&field) {
            return None;
        }
        ((field as u64) << MANT_BITS) | mant
    };
    let sign = if negative { 1u64 << 63 } else { 0 };
    Some(f64::from_bits(sign | bits))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum HexOrNumber {
    Hex(String),
    Number(f64),
}

impl HexOrNumber {
    fn value<E: de::Error>(self) -> Result<f64, E> {
        match self {
            HexOrNumber::Number(v) => Ok(v),
            HexOrNumber::Hex(s) => parse_hex(&s).ok_or_else(|| E::custom(format!("invalid hex float {s:?}"))),
        }
    }
}

/// Serde adapter for `Vec<Vec<f64>>` stored as hex-float strings.
/// Plain JSON numbers are also accepted when reading.
pub mod matrix {
    use super::*;

    pub fn serialize<S: Serializer>(rows: &[Vec<f64>], serializer: S) -> Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(rows.len()))?;
        for row in rows {
            let encoded: Vec<String> = row
                .iter()
                .map(|v| format_hex(*v).ok_or_else(|| serde::ser::Error::custom("non-finite state value")))
                .collect::<Result<_, _>>()?;
            seq.serialize_element(&encoded)?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Vec<Vec<f64>>, D::Error> {
        let raw: Vec<Vec<HexOrNumber>> = Vec::deserialize(deserializer)?;
        raw.into_iter()
            .map(|row| row.into_iter().map(HexOrNumber::value).collect())
            .collect()
    }
}
