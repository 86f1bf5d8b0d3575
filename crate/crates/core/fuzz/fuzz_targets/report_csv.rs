#![no_main]

use libfuzzer_sys::fuzz_target;
use qif_fda::harness::parse_report_csv;

fuzz_target!(|data: &[u8]| {
    if let Ok(lines) = parse_report_csv(data) {
        for line in &lines {
            assert!(line.coefficients.iter().flatten().flatten().all(|v| v.is_finite()));
        }
    }
});
