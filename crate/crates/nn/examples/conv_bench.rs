use std::time::Instant;
use syncguard_nn::{Conv2dSpec, Graph, Tensor};

fn main() {
    for &(cin, cout) in &[(8usize, 8usize), (13, 8), (16, 16), (32, 32), (8, 8)] {
        let mut best = (f64::MAX, f64::MAX);
        for _ in 0..5 {
            let mut g = Graph::new();
            let x = g.input(Tensor::filled(&[cin, 87, 513], 0.1), true);
            let w = g.input(Tensor::filled(&[cout, cin, 3, 3], 0.01), true);
            let t = Instant::now();
            let y = g.conv2d(x, w, None, Conv2dSpec::same((3, 3), (2, 2)));
            let fwd = t.elapsed().as_secs_f64();
            let s = g.sum_all(y);
            let t = Instant::now();
            let _ = g.backward(s);
            let bwd = t.elapsed().as_secs_f64();
            best = (best.0.min(fwd), best.1.min(bwd));
        }
        let macs = 87.0 * 513.0 * (cin * cout * 9) as f64;
        println!(
            "{cin}->{cout}: fwd {:.2}ms ({:.1} GFLOPS) bwd {:.2}ms",
            best.0 * 1e3,
            2.0 * macs / best.0 / 1e9,
            best.1 * 1e3
        );
    }
}
