#![no_main]

use libfuzzer_sys::fuzz_target;
use qif_fda::funcdata::load_csv;

fuzz_target!(|data: &[u8]| {
    let Ok(ds) = load_csv(data) else { return };
    assert!(ds.samples().iter().all(|s| s.len() >= 2));
    assert!(ds
        .samples()
        .iter()
        .flat_map(|s| s.times())
        .all(|t| (0.0..=1.0).contains(t)));

    // times are already in [0, 1], so a write/read cycle is the identity
    let mut buf = Vec::new();
    ds.write_csv(&mut buf).unwrap();
    let again = load_csv(buf.as_slice()).unwrap();
    assert_eq!(ds.samples(), again.samples());
});
