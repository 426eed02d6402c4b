//! Micro-benchmark for the hot kernels. Run with
//! `cargo run --release -p cure-core --example kernel_bench`.

use cure_core::bounds::{bound_backward, bound_forward, ibp_loss_grad, AbsWeights, BoxBounds};
use cure_core::config::build_network;
use cure_core::network::UpdateDelta;
use cure_core::{InitScheme, Tensor};
use std::time::Instant;

fn main() {
    let net = build_network("cnn4:16,128", &[1, 28, 28], 10)
        .unwrap()
        .init(InitScheme::default(), 1);
    let x: Vec<f64> = (0..784).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
    let xt = Tensor::new(vec![1, 28, 28], x.clone()).unwrap();
    let reps = 200;

    let t = Instant::now();
    let mut sink = 0.0;
    for _ in 0..reps {
        sink += net.forward(&xt).unwrap().data()[0];
    }
    println!("forward:        {:7.3} ms", t.elapsed().as_secs_f64() * 1e3 / reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        sink += net.input_grad_ce(&x, 3).unwrap().0;
    }
    println!("input_grad_ce:  {:7.3} ms", t.elapsed().as_secs_f64() * 1e3 / reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        let (_, g) = net.backward_ce(&xt, 3).unwrap();
        sink += g.layer(0)[0];
    }
    println!("backward_ce:    {:7.3} ms", t.elapsed().as_secs_f64() * 1e3 / reps as f64);

    let abs = AbsWeights::new(&net);
    let region = BoxBounds::around(&x, &vec![0.05; 784]);
    let t = Instant::now();
    for _ in 0..reps {
        let eval = bound_forward(&net, &abs, &region, 3, true).unwrap();
        sink += eval.u_delta[0];
    }
    println!("bound_forward:  {:7.3} ms", t.elapsed().as_secs_f64() * 1e3 / reps as f64);

    let eval = bound_forward(&net, &abs, &region, 3, true).unwrap();
    let (_, d_ud) = ibp_loss_grad(&eval.u_delta, 3);
    let t = Instant::now();
    for _ in 0..reps {
        let mut grads = UpdateDelta::zeros_like(&net);
        bound_backward(&net, &abs, &eval, &d_ud, &mut grads);
        sink += grads.layer(0)[0];
    }
    println!("bound_backward: {:7.3} ms", t.elapsed().as_secs_f64() * 1e3 / reps as f64);

    eprintln!("(sink {sink:e})");
}
