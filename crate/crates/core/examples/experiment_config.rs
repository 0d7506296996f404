//! Loads the desk preset, applies overrides and prints the resolved config;
//! an invalid override shows which keys are involved.

use spoofnet::harness::ExperimentConfig;

fn main() {
    let mut cfg = ExperimentConfig::default();
    cfg.set("fusion.mode", "cnn_gate").unwrap();
    cfg.set("split.mode", "frequency").unwrap();
    cfg.validate().unwrap();
    print!("{}", cfg.to_text());
    let grid = cfg.model_config().encoder.grid().unwrap();
    println!("# patch grid {} x {}", grid.h, grid.w);

    cfg.set("fusion.k", "13").unwrap();
    match cfg.validate() {
        Ok(()) => println!("unexpectedly valid"),
        Err(e) => println!("rejected: {e}"),
    }
}
