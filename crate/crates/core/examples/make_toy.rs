//! Writes the toy network and a calibration dataset, for trying the CLI.
//!
//! `cargo run --release -p lraccel-core --example make_toy -- OUT_DIR [seed] [images]`
//!
//! Produces `OUT_DIR/model` and `OUT_DIR/data`.

use std::path::PathBuf;

use lraccel_core::io::{save_dataset, save_model};
use lraccel_core::toy::{toy_images, toy_net};

fn main() -> lraccel_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "toy".into()));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));
    let images: usize = args.next().map_or(300, |s| s.parse().expect("image count"));
    let net = toy_net(seed);
    save_model(&net, &out.join("model"))?;
    save_dataset(&toy_images(images, net.input_shape(), seed), &out.join("data"))?;
    println!("wrote {} and {} ({images} images)", out.join("model").display(), out.join("data").display());
    Ok(())
}
