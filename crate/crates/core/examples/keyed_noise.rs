//! Noise draws are addressed by key, so a sample's noise does not depend on
//! which batch it lands in or on the order work is done.

use projection_regret::rng::{gaussian_rows, NoiseKey, Role};

fn main() {
    let key = NoiseKey::new(42, 3, 0, Role::Dx, 1);
    let a = key.gaussian(4);
    let b = NoiseKey::new(42, 3, 0, Role::Dx, 1).gaussian(4);
    assert_eq!(a, b);
    println!("sample 3, draw 1: {:?}", a);
    println!("sample 3, draw 2: {:?}", key.with_draw(2).gaussian(4));
    println!("other role:       {:?}", key.with_role(Role::Y).gaussian(4));

    // rows of a batch are the same whatever their neighbours are
    let keys: Vec<NoiseKey> = (0..3).map(|s| NoiseKey::new(42, s, 0, Role::Dx, 1)).collect();
    let batch = gaussian_rows(&keys, &[1, 2, 2]);
    assert_eq!(batch.row(2), &NoiseKey::new(42, 2, 0, Role::Dx, 1).gaussian(4)[..]);
    println!("batch of 3 rows, shape {:?}", batch.shape());
}
