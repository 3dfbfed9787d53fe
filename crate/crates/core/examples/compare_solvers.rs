//! Accelerates the toy network with several solver/mode combinations and
//! prints the final-layer deviation from the original for a few seeds.
//!
//! ```text
//! cargo run --release -p lraccel-core --example compare_solvers -- [speedup] [seeds] [iid|smooth]
//! ```

use lraccel_core::decompose::SolverKind;
use lraccel_core::pipeline::{accelerate_model, evaluate, AccelConfig, Calibration, Mode};
use lraccel_core::toy::{toy_images, toy_net_with, ToyFilters, TOY_FILTERS};

fn main() -> lraccel_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let r: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(4.0);
    let seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let filters = match args.get(3).map(String::as_str) {
        Some("iid") => ToyFilters::Iid,
        _ => TOY_FILTERS,
    };
    let combos = [
        (Mode::Channel2d, SolverKind::Nonlinear),
        (Mode::Channel2d, SolverKind::Asymmetric),
        (Mode::Asym3d, SolverKind::Asymmetric),
    ];
    println!("final-layer mean |deviation| on held-out images, {filters:?} filters, r = {r}");
    println!("seed  {}", combos.map(|(m, s)| format!("{m:?}/{s:?}")).join("  "));
    for seed in 0..seeds {
        let net = toy_net_with(seed, filters);
        let data = toy_images(300, net.input_shape(), seed);
        let (cal, held_out) = data.split_tail(100);
        let mut row = format!("{seed:>4}");
        for (mode, solver) in combos {
            let mut cfg = AccelConfig::new(r, mode, solver);
            cfg.calibration = Calibration { n_images: 200, positions_per_image: 10, seed };
            let out = accelerate_model(&net, &cal, &cfg)?;
            let rep = evaluate(&net, &out.net, &held_out)?;
            row += &format!("  {:>10.4} ({:.2}x)", rep.mean_abs_deviation, rep.theoretical_speedup);
        }
        println!("{row}");
    }
    Ok(())
}
