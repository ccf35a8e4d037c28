// temporary profiling harness
use mfpnet::graph::Graph;
use mfpnet::model::{build_model, ModelSpec, Variant};
use mfpnet::tensor::Tensor;
use mfpnet::train::{build_loss, LabelBatch};
use std::time::Instant;

fn main() {
    let spec = ModelSpec { input_extent: 64, ..ModelSpec::new(Variant::MfpBica, 5, 8, 6) };
    let (model, params) = build_model::<f32>(&spec, 7).unwrap();
    println!("params: {}", params.param_count());
    let input_t = Tensor::rand_uniform(&[8, 1, 64, 64], -1.0, 1.0, 3).unwrap();
    let labels = LabelBatch::new((8, 64, 64), (0..8*64*64).map(|i| (i % 6) as u8).collect()).unwrap();

    // warmup + timed
    for round in 0..3 {
        let t0 = Instant::now();
        let mut g = Graph::<f32>::new();
        let nodes = params.register(&mut g);
        let input = g.constant(input_t.clone());
        let logits = model.forward(&mut g, &nodes, input).unwrap();
        let t_fwd = t0.elapsed();
        let loss = build_loss(&mut g, logits, &labels).unwrap();
        let t_loss = t0.elapsed();
        let _grads = g.backward(loss.total).unwrap();
        let t_bwd = t0.elapsed();
        if round == 2 {
            println!("fwd {:?}  loss {:?}  bwd {:?}  total {:?}", t_fwd, t_loss - t_fwd, t_bwd - t_loss, t_bwd);
        }
    }
}
