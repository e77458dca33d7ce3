//! Rough timing of the network's forward, backward and second-order passes.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sigmeta::diffcore::{Graph, Tensor};
use sigmeta::netmodel::{init_parameters, Model, SignatureNet, INPUT_HEIGHT, INPUT_WIDTH};

fn batch(b: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(&[b, 1, INPUT_HEIGHT, INPUT_WIDTH], |_| {
        if rng.gen_bool(0.1) {
            1.0
        } else {
            0.0
        }
    })
}

fn main() -> sigmeta::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let theta = init_parameters::<f32>(0);
    let adapt = batch(10, &mut rng);
    let query = batch(15, &mut rng);
    let labels_a: Vec<f32> = (0..10).map(|i| (i < 5) as u8 as f32).collect();
    let labels_q: Vec<f32> = (0..15).map(|i| (i < 5) as u8 as f32).collect();

    let t = Instant::now();
    let mut g = Graph::new();
    let p = theta.to_graph_const(&mut g);
    let x = g.constant(adapt.clone());
    let _ = SignatureNet.forward(&mut g, &p, x)?;
    println!("forward x10: {:?}", t.elapsed());

    let t = Instant::now();
    let mut g = Graph::new();
    let p = theta.to_graph(&mut g);
    let x = g.constant(adapt.clone());
    let z = SignatureNet.forward(&mut g, &p, x)?;
    let l = g.bce_with_logits(z, &labels_a)?;
    let l = g.mean(l);
    let _ = g.grad_tensors(l, &p)?;
    println!("forward+backward x10: {:?}", t.elapsed());

    for &k in &[1usize, 5] {
        let t = Instant::now();
        let mut g = Graph::new();
        let p = theta.to_graph(&mut g);
        let x = g.constant(adapt.clone());
        let mut cur = p.clone();
        for _ in 0..k {
            let z = SignatureNet.forward(&mut g, &cur, x)?;
            let l = g.bce_with_logits(z, &labels_a)?;
            let l = g.mean(l);
            let gr = g.grad(l, &cur, true)?;
            cur = g.sgd_step(&cur, &gr, 0.01)?;
        }
        let inner = t.elapsed();
        let xq = g.constant(query.clone());
        let z = SignatureNet.forward(&mut g, &cur, xq)?;
        let l = g.bce_with_logits(z, &labels_q)?;
        let l = g.mean(l);
        let _ = g.grad_tensors(l, &p)?;
        println!(
            "episode K={k}: inner {:?}, total {:?}, nodes {}",
            inner,
            t.elapsed(),
            g.len()
        );
    }
    Ok(())
}
