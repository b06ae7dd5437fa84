//! Generates the shapes-on-texture toy set and writes a few images as PNG.
//!
//! cargo run --release --example toy_dataset -- /tmp/toy_png

use projection_regret::data::save_image_dir;
use projection_regret::data::toy::{gen_toy_dataset, shape_kind, ToySpec};

fn main() -> projection_regret::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "toy_png".into());
    let spec = ToySpec {
        resolution: 24,
        n_semantic_classes: 3,
        n_background_textures: 4,
        samples_per_class: 8,
        seed: 7,
    };
    let d = gen_toy_dataset(&spec)?;
    for class in 0..spec.n_semantic_classes {
        let b = d.classes(&[class]);
        println!("class {} ({:?}): {} images", class, shape_kind(class), b.len());
        save_image_dir(&b, &out, &format!("class{}_", class))?;
    }
    println!("background labels of class 0: {:?}", &d.background_labels[..spec.samples_per_class]);
    println!("wrote {}", out);
    Ok(())
}
