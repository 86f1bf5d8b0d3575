#![no_main]

use libfuzzer_sys::fuzz_target;
use qif_fda::pipeline::{parse_methods, BandwidthPolicy, Method};
use qif_fda::simgen::Scenario;

// Tokens accepted on the command line print back to something that parses
// to the same value.
fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };

    for allow_unsafe in [false, true] {
        if let Ok(sc) = Scenario::parse_with(s, allow_unsafe) {
            assert_eq!(Scenario::parse_with(&sc.to_string(), true).unwrap(), sc);
            if !allow_unsafe {
                assert!(sc.is_standard());
            }
        }
    }
    if let Ok(m) = s.parse::<Method>() {
        assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
    }
    if let Ok(list) = parse_methods(s) {
        assert!(!list.is_empty());
    }
    if let Ok(BandwidthPolicy::Fixed(h)) = s.parse::<BandwidthPolicy>() {
        assert!(h.is_finite() && h > 0.0);
        assert_eq!(
            h.to_string().parse::<BandwidthPolicy>().unwrap(),
            BandwidthPolicy::Fixed(h)
        );
    }
});
