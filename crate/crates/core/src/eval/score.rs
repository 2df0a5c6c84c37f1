//! Nine-cell challenge score: three target datasets times {1, 5, 10} shots.
//!
//! `Score = 2 * avg(1-shot) + avg(5-shot) + avg(10-shot)`, each average over
//! the three datasets. The arithmetic only needs a field, so it also runs on
//! exact rationals, which is how published tables are checked.

use num_rational::Ratio;
use num_traits::Num;
use serde_json::json;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const SHOTS: [usize; 3] = [1, 5, 10];

/// mAP cells as percentages, indexed `cells[dataset][shot]` with shots in
/// [`SHOTS`] order (the column order of the published results table).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreCard<T> {
    pub cells: [[T; 3]; 3],
    pub score: T,
}

impl<T: Num + Copy> ScoreCard<T> {
    pub fn from_cells(cells: [[T; 3]; 3]) -> Self {
        ScoreCard {
            cells,
            score: challenge_score(&cells),
        }
    }
}

impl<T: Scalar> ScoreCard<T> {
    pub fn validate(&self) -> Result<()> {
        let hundred = T::lit(100.0);
        if self.cells.iter().flatten().all(|&c| c >= T::zero() && c <= hundred) {
            Ok(())
        } else {
            Err(Error::InvalidParameter("score cells must lie in [0, 100]".into()))
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let cells: Vec<Vec<f64>> = self
            .cells
            .iter()
            .map(|row| row.iter().map(|c| c.to_f64_lossy()).collect())
            .collect();
        json!({
            "cells": cells,
            "score": round_half_even_2dp(self.score.to_f64_lossy()),
        })
    }
}

/// Weighted challenge score from `cells[dataset][shot]`.
pub fn challenge_score<T: Num + Copy>(cells: &[[T; 3]; 3]) -> T {
    let two = T::one() + T::one();
    let three = two + T::one();
    let shot_avg = |s: usize| (cells[0][s] + cells[1][s] + cells[2][s]) / three;
    two * shot_avg(0) + shot_avg(1) + shot_avg(2)
}

/// Exact rational value of a plain decimal literal such as `-57.04`.
pub fn parse_decimal(s: &str) -> Result<Ratio<i64>> {
    let bad = || Error::InvalidParameter(format!("not a decimal number: {s:?}"));
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let (int, frac) = body.split_once('.').unwrap_or((body, ""));
    if int.is_empty() && frac.is_empty()
        || !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit())
        || frac.len() > 15
    {
        return Err(bad());
    }
    let digits = format!("{int}{frac}");
    let numer: i64 = if digits.is_empty() { 0 } else { digits.parse().map_err(|_| bad())? };
    let denom = 10i64.pow(frac.len() as u32);
    let v = Ratio::new(numer, denom);
    Ok(if neg { -v } else { v })
}

/// Round to two decimals, ties to even, exactly.
pub fn round_half_even_2dp_exact(x: Ratio<i64>) -> Ratio<i64> {
    let scaled = x * Ratio::from_integer(100);
    let floor = scaled.floor();
    let rem = scaled - floor;
    let half = Ratio::new(1, 2);
    let base = floor.to_integer();
    let rounded = if rem > half || (rem == half && base % 2 != 0) {
        base + 1
    } else {
        base
    };
    Ratio::new(rounded, 100)
}

/// Round to two decimals, ties to even, on the exact binary value of `x`.
pub fn round_half_even_2dp(x: f64) -> f64 {
    format!("{x:.2}").parse().unwrap_or(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exact(cells: [[&str; 3]; 3]) -> Ratio<i64> {
        challenge_score(&cells.map(|row| row.map(|c| parse_decimal(c).unwrap())))
    }

    #[test]
    fn table_rows_reproduce() {
        let fdu = exact([["57.04", "57.15", "58.08"], ["59.23", "59.23", "59.23"], ["45.23", "46.17", "48.77"]]);
        assert_eq!(fdu, parse_decimal("217.21").unwrap());
        let cd = exact([["34.61", "41.14", "42.06"], ["63.26", "63.00", "61.29"], ["39.71", "47.43", "48.30"]]);
        assert_eq!(round_half_even_2dp_exact(cd), parse_decimal("192.79").unwrap());
    }

    #[test]
    fn zero_cells_zero_score() {
        assert_eq!(challenge_score(&[[0.0f64; 3]; 3]), 0.0);
    }

    #[test]
    fn score_is_linear_with_shot_weights() {
        let base = [[10.0, 20.0, 30.0], [40.0, 50.0, 60.0], [70.0, 80.0, 90.0]];
        let s0 = challenge_score(&base);
        for d in 0..3 {
            for (s, w) in [2.0f64 / 3.0, 1.0 / 3.0, 1.0 / 3.0].into_iter().enumerate() {
                let mut c = base;
                c[d][s] += 1.5;
                assert!((challenge_score(&c) - s0 - 1.5 * w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parse_decimal_cases() {
        assert_eq!(parse_decimal("57.04").unwrap(), Ratio::new(5704, 100));
        assert_eq!(parse_decimal("-1.5").unwrap(), Ratio::new(-3, 2));
        assert_eq!(parse_decimal("12").unwrap(), Ratio::from_integer(12));
        assert_eq!(parse_decimal(".5").unwrap(), Ratio::new(1, 2));
        assert!(parse_decimal("1e3").is_err());
        assert!(parse_decimal("").is_err());
        assert!(parse_decimal("1.2.3").is_err());
    }

    #[test]
    fn half_even_rounding() {
        let r = |s| round_half_even_2dp_exact(parse_decimal(s).unwrap());
        assert_eq!(r("1.125"), parse_decimal("1.12").unwrap());
        assert_eq!(r("1.135"), parse_decimal("1.14").unwrap());
        assert_eq!(r("-1.125"), parse_decimal("-1.12").unwrap());
        assert_eq!(r("150.6"), parse_decimal("150.60").unwrap());
        assert_eq!(round_half_even_2dp(1.125), 1.12);
        assert_eq!(round_half_even_2dp(1.375), 1.38);
        assert_eq!(round_half_even_2dp(192.793333), 192.79);
    }

    #[test]
    fn card_validation() {
        let ok = ScoreCard::from_cells([[50.0f64; 3]; 3]);
        assert!(ok.validate().is_ok());
        assert!((ok.score - 200.0).abs() < 1e-12);
        assert!(ScoreCard::from_cells([[101.0f64; 3]; 3]).validate().is_err());
    }
}
