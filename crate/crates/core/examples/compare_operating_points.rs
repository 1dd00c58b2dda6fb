//! Iso-compute and iso-accuracy comparison of two systems.

use vap::evalharness::{compare_points, CompareMode, OperatingPoint};

fn main() {
    let baseline = [
        OperatingPoint::new("uniform 32", Some(32.0), 127.2, 56.1),
        OperatingPoint::new("uniform 96", Some(96.0), 232.5, 63.3),
    ];
    let candidate = [
        OperatingPoint::new("surprise 16", Some(16.0), 125.5, 58.6),
        OperatingPoint::new("surprise 32", Some(32.0), 190.4, 63.3),
    ];
    for mode in [CompareMode::IsoCompute, CompareMode::IsoAccuracy] {
        print!("{}", compare_points(&baseline, &candidate, mode).to_text());
        println!();
    }
}
