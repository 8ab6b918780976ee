use std::time::Instant;

use seglab_core::attention::{AttentionConfig, AttentionVariant};
use seglab_core::data::{phantom_slices, PhantomSpec};
use seglab_core::models::{build_model, Architecture, Backbone, ModelConfig};
use seglab_core::training::{train, validate, LrSchedule, TrainConfig};

fn main() -> seglab_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let c: usize = args.get(1).map_or(16, |s| s.parse().unwrap());
    let lr: f64 = args.get(2).map_or(0.1, |s| s.parse().unwrap());
    let iters: usize = args.get(3).map_or(200, |s| s.parse().unwrap());
    let spec = PhantomSpec { n_cases: 1, slices_per_case: 8, image_size: 64, ..Default::default() };
    let slices = phantom_slices(&spec)?;
    let cfg = ModelConfig {
        architecture: Architecture::Unet3p,
        backbone: Backbone::ResnetTiny,
        decoder_channels: c,
        attention: AttentionConfig::with_variant(AttentionVariant::Cbam),
        input_size: 64,
        ..Default::default()
    };
    let mut model = build_model(&cfg, 0)?;
    println!("params {}", model.param_count());
    let tc = TrainConfig {
        lr0: lr,
        max_iterations: iters,
        epochs: 1000,
        validate_every: 25,
        lr_schedule: LrSchedule::Poly,
        ..Default::default()
    };
    let t = Instant::now();
    let out = train(&mut model, &slices, &slices, &tc)?;
    for v in &out.log.validations {
        let s = &out.log.steps[v.iteration - 1];
        println!("{} loss {:.4} dice {:.4}", v.iteration, s.total_loss, v.val_dice);
    }
    println!("final {:?} in {:?}", validate(&model, &slices)?, t.elapsed());
    Ok(())
}
