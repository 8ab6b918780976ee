use seglab_core::attention::AttentionVariant;
use seglab_core::models::{build_model, ModelConfig};

fn main() {
    for v in AttentionVariant::ALL {
        let mut c = ModelConfig::default();
        c.attention.variant = v;
        let m = build_model(&c, 0).unwrap();
        println!("{:<28} {}", c.display_name(), m.param_count());
    }
    let m = build_model(&ModelConfig::unet_baseline(), 0).unwrap();
    println!("UNet {}", m.param_count());
}
