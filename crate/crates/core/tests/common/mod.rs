//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use colosla_core::rulesdb::ViolationLevel::{self, L1, L2};

/// Example contract bands written out as plain comparisons.
pub fn table_band(rule_id: &str, x: f64) -> ViolationLevel {
    match rule_id {
        "CUST_A_PWR_01" => {
            if x <= 30.0 {
                ViolationLevel::None
            } else if x <= 35.0 {
                L1
            } else {
                L2
            }
        }
        "CUST_A_TEMP_01" => {
            if (18.0..=27.0).contains(&x) {
                ViolationLevel::None
            } else if (x > 27.0 && x <= 29.0) || (16.0..18.0).contains(&x) {
                L1
            } else {
                L2
            }
        }
        "CUST_A_HUM_01" => {
            if (40.0..=60.0).contains(&x) {
                ViolationLevel::None
            } else if (35.0..40.0).contains(&x) || (x > 60.0 && x <= 65.0) {
                L1
            } else {
                L2
            }
        }
        other => panic!("no oracle for {other}"),
    }
}

/// (rule id, channel column, sub-window steps at 30 s cadence, finite endpoints)
pub const TABLE: [(&str, usize, usize, &[f64]); 3] = [
    ("CUST_A_PWR_01", 0, 10, &[30.0, 35.0]),
    ("CUST_A_TEMP_01", 1, 30, &[16.0, 18.0, 27.0, 29.0]),
    ("CUST_A_HUM_01", 2, 30, &[35.0, 40.0, 60.0, 65.0]),
];

/// Brute force: every complete sub-window, severity max.
pub fn brute_label(rule_id: &str, col: usize, sub: usize, future: &[Vec<f64>]) -> ViolationLevel {
    let mut worst = ViolationLevel::None;
    let mut k = 0;
    while (k + 1) * sub <= future.len() {
        let mut sum = 0.0;
        for row in &future[k * sub..(k + 1) * sub] {
            sum += row[col];
        }
        let level = table_band(rule_id, sum / sub as f64);
        if level > worst {
            worst = level;
        }
        k += 1;
    }
    worst
}

pub fn next_up(x: f64) -> f64 {
    if x >= 0.0 { f64::from_bits(x.to_bits() + 1) } else { f64::from_bits(x.to_bits() - 1) }
}

pub fn next_down(x: f64) -> f64 {
    if x > 0.0 { f64::from_bits(x.to_bits() - 1) } else { f64::from_bits(x.to_bits() + 1) }
}
