//! Architecture accounting: parameter counts and FLOP estimates for the
//! built-in configurations and a custom one, plus a per-scope breakdown
//! of where a built model's parameters live.
//!
//! ```text
//! cargo run --example inspect_architecture
//! ```

use gripnet::model::{
    flop_estimate, param_count, scope_of, Model, ModelConfig, ParamScope, StemConfig,
};
use gripnet::Result;

fn main() -> Result<()> {
    let custom = ModelConfig {
        input_size: 128,
        stem: StemConfig { kernel: 7, stride: 2, out_channels: 32 },
        channel_schedule: vec![32, 64, 128],
        pi_hidden: vec![64, 64],
        ..ModelConfig::tiny()
    };
    let configs = [
        ("full", ModelConfig::full()),
        ("tiny", ModelConfig::tiny()),
        ("custom", custom),
    ];

    println!(
        "{:<8} {:>6} {:>22} {:>12} {:>12} {:>10}",
        "config", "input", "channels", "features", "params", "GFLOPs"
    );
    for (name, cfg) in &configs {
        let params = param_count(cfg)?;
        let flops = flop_estimate(cfg)?;
        println!(
            "{:<8} {:>6} {:>22} {:>12} {:>12} {:>10.3}",
            name,
            format!("{0}x{0}", cfg.input_size),
            format!("{:?}", cfg.channel_schedule),
            cfg.feature_dim(),
            params,
            flops as f64 / 1e9
        );
    }

    // Where the parameters live, from an actually built model. The
    // estimator and the built model must agree exactly.
    let cfg = ModelConfig::tiny();
    let model = Model::build(&cfg, 0)?;
    let mut by_scope = [("backbone", 0u64), ("point head", 0), ("spread head", 0)];
    let mut buffers = 0u64;
    for name in model.param_names() {
        let len = model.param(&name).expect("listed param").len() as u64;
        match scope_of(&name) {
            ParamScope::Backbone => by_scope[0].1 += len,
            ParamScope::PointHead => by_scope[1].1 += len,
            ParamScope::IntervalHead => by_scope[2].1 += len,
            ParamScope::Buffer => buffers += len,
        }
    }
    let learned: u64 = by_scope.iter().map(|(_, n)| n).sum();
    println!("\ntiny model, parameter placement:");
    for (scope, n) in by_scope {
        println!("  {scope:<12} {n:>7}  ({:.1}%)", 100.0 * n as f64 / learned as f64);
    }
    println!("  {:<12} {learned:>7}", "total");
    println!("  plus {buffers} normalisation statistics (tracked, not trained)");
    assert_eq!(learned, param_count(&cfg)?);
    println!("\nestimator and built model agree on the parameter count");
    Ok(())
}
