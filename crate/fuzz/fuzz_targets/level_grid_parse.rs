#![no_main]

use libfuzzer_sys::fuzz_target;
use palmfield::config::{parse_level_grid, MAX_GRID_POINTS};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(grid) = parse_level_grid(text) {
        assert!(grid.len() <= MAX_GRID_POINTS + 1);
        assert!(grid.iter().all(|v| v.is_finite()));
    }
});
