//! Measured vs theoretical speedup of an accelerated conv stack.
//!
//! `cargo run --release --example speedup -- [channels] [size] [depth] [r]`

use lraccel_core::bench::benchmark;
use lraccel_core::decompose::SolverKind;
use lraccel_core::pipeline::{accelerate_model, AccelConfig, Mode};
use lraccel_core::toy::{conv_stack, toy_images};

fn main() -> lraccel_core::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let arg = |i: usize, default: usize| args.get(i).copied().unwrap_or(default);
    let (channels, size, depth, r) = (arg(0, 64), arg(1, 32), arg(2, 3), arg(3, 4));
    let net = conv_stack(channels, depth, size, 0);
    let data = toy_images(20, net.input_shape(), 1);
    for mode in [Mode::Channel2d, Mode::Asym3d] {
        let mut cfg = AccelConfig::new(r as f64, mode, SolverKind::Linear);
        cfg.calibration.n_images = 20;
        let fast = accelerate_model(&net, &data, &cfg)?.net;
        let b = benchmark(&fast, None, 9, Some(&net))?;
        println!(
            "{mode:?}: theoretical {:.2}x measured {:.2}x ({:.2} ms vs {:.2} ms)",
            b.theoretical_speedup.unwrap_or(f64::NAN),
            b.measured_speedup.unwrap_or(f64::NAN),
            b.model.median_seconds * 1e3,
            b.reference.as_ref().map_or(f64::NAN, |t| t.median_seconds * 1e3)
        );
    }
    Ok(())
}
