//! Regenerates the checked-in test fixtures under `tests/fixtures/`.
//!
//! `cargo run -p trim-core --example gen_fixtures`
//!
//! The operating-point fixture is a 24x24 patch grid (576 tokens, D = 16) scored against
//! the text direction e0. 123 patches inside a 12x12 box have cosine similarity in
//! [0.90, 0.99]; the remaining 453 have cosine in [-0.05, 0.05]. After softmax the IQR
//! fence sits far below the planted patches and far above the background.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trim_core::tensor_io::{write_tensor, Matrix};

const SIDE: usize = 24;
const DIM: usize = 16;
const PLANTED: usize = 123;

fn unit_row(cos: f64, other_axis: usize) -> Vec<f32> {
    let mut row = vec![0f32; DIM];
    row[0] = cos as f32;
    row[other_axis] = (1.0 - cos * cos).sqrt() as f32;
    row
}

fn main() -> anyhow::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    std::fs::create_dir_all(&dir)?;

    let planted: Vec<usize> = (0..SIDE * SIDE)
        .filter(|&i| (5..17).contains(&(i / SIDE)) && (4..16).contains(&(i % SIDE)))
        .take(PLANTED)
        .collect();

    let n_background = SIDE * SIDE - PLANTED;
    let mut background_cos: Vec<f64> =
        (0..n_background).map(|j| -0.05 + 0.1 * j as f64 / (n_background - 1) as f64).collect();
    background_cos.shuffle(&mut ChaCha8Rng::seed_from_u64(576));

    let mut rows = Vec::with_capacity(SIDE * SIDE);
    let (mut p, mut b) = (0, 0);
    for i in 0..SIDE * SIDE {
        let axis = 1 + i % (DIM - 1);
        if planted.get(p) == Some(&i) {
            rows.push(unit_row(0.90 + 0.09 * p as f64 / (PLANTED - 1) as f64, axis));
            p += 1;
        } else {
            rows.push(unit_row(background_cos[b], axis));
            b += 1;
        }
    }

    let mut text = vec![0f32; DIM];
    text[0] = 1.0;

    write_tensor(dir.join("operating_point_patches.trimt"), &Matrix::from_rows(&rows)?)?;
    write_tensor(dir.join("operating_point_text.trimt"), &Matrix::row_vector(text)?)?;
    println!("wrote fixtures to {}", dir.display());
    Ok(())
}
