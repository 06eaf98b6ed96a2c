//! Prints effective depth, network calls and predicted tape memory for a grid
//! of recursion schedules.
//!
//! cargo run --release --example recursion_depth -- [batch] [budget_gib]

use trm::model::{param_count_for, NetConfig};
use trm::recursion::{effective_depth, estimate_tape_bytes, RecursionSchedule, Variant};

fn main() {
    let batch: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(768);
    let budget: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(40.0);
    let net = NetConfig::default();
    println!(
        "{:<8} {:>3} {:>3} {:>6} {:>6} {:>7} {:>8} {:>10} {:>9}",
        "variant", "n", "T", "layers", "depth", "calls", "tracked", "params", "tape GiB"
    );
    let rows = [
        (Variant::Trm, 6, 3, 2),
        (Variant::Trm, 12, 3, 2),
        (Variant::Trm, 6, 1, 2),
        (Variant::Trm, 3, 3, 4),
        (Variant::SingleZ, 6, 3, 2),
        (Variant::MultiZ, 6, 3, 2),
        (Variant::Hrm, 2, 2, 4),
    ];
    for (variant, n, t, layers) in rows {
        let cfg = NetConfig {
            n_layers: layers,
            ..net.clone()
        };
        let s = RecursionSchedule::new(variant, n, t, 16);
        let gib = estimate_tape_bytes(&cfg, &s, batch, 4) as f64 / (1u64 << 30) as f64;
        let depth = effective_depth(t, n, layers);
        println!(
            "{:<8} {:>3} {:>3} {:>6} {:>6} {:>7} {:>8} {:>10} {:>8.1}{}",
            variant.as_str(),
            n,
            t,
            layers,
            depth,
            s.total_calls(),
            s.tracked_calls(),
            param_count_for(&cfg, variant),
            gib,
            if gib > budget { " over budget" } else { "" }
        );
    }
}
