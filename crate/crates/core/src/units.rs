// SPDX-License-Identifier: Apache-2.0

//! Unit helpers: SI-suffixed number parsing and power conversions.

use crate::error::{Error, Result};

const PREFIXES: &[(&str, i32)] = &[
    ("G", 9),
    ("M", 6),
    ("k", 3),
    ("m", -3),
    ("u", -6),
    ("µ", -6),
    ("μ", -6),
    ("n", -9),
    ("p", -12),
];

const BASE_UNITS: &[&str] = &["Hz", "A", "s", "T", "m", "W", "V"];

/// Parses a number with an optional SI suffix (`3.9mA`, `7636.6MHz`, `34us`,
/// `275mT`) into base units.
///
/// The prefix is folded into the decimal exponent before the string is
/// handed to the float parser, so `7636.6MHz` yields exactly the same bits
/// as the literal `7636.6e6`. Bare numbers parse unchanged; `dBm` and `dB`
/// suffixes are stripped without scaling.
pub fn parse_si(input: &str) -> Result<f64> {
    let s = input.trim();
    let bad = || Error::InvalidInput(format!("cannot parse '{input}' as a number"));
    let split = s
        .char_indices()
        .find(|(_, c)| !(c.is_ascii_digit() || matches!(c, '.' | '-' | '+' | 'e' | 'E')))
        .map(|(i, _)| i)
        .unwrap_or(s.len());
    // an 'e' directly followed by a letter is the start of a unit, not an exponent
    let (mut num, mut suffix) = s.split_at(split);
    if let Some(stripped) = num.strip_suffix(['e', 'E']) {
        num = stripped;
        suffix = &s[num.len()..];
    }
    if num.is_empty() {
        return Err(bad());
    }
    let suffix = suffix.trim();
    let shift = if suffix.is_empty() || suffix == "dBm" || suffix == "dB" {
        0
    } else {
        let mut found = None;
        if BASE_UNITS.contains(&suffix) {
            found = Some(0);
        } else {
            for (p, e) in PREFIXES {
                if let Some(rest) = suffix.strip_prefix(p) {
                    if BASE_UNITS.contains(&rest) {
                        found = Some(*e);
                        break;
                    }
                }
            }
        }
        found.ok_or_else(|| Error::InvalidInput(format!("unknown unit suffix '{suffix}' in '{input}'")))?
    };
    if shift == 0 {
        return num.parse::<f64>().map_err(|_| bad());
    }
    let (mantissa, exp) = match num.find(['e', 'E']) {
        Some(i) => (&num[..i], num[i + 1..].parse::<i32>().map_err(|_| bad())?),
        None => (num, 0),
    };
    format!("{mantissa}e{}", exp + shift).parse::<f64>().map_err(|_| bad())
}

/// dBm to watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    1e-3 * 10f64.powf(dbm / 10.0)
}

/// Field-amplitude ratio for a power change in dB.
pub fn db_amplitude_ratio(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}
