use troika::graph::kernels::matmul_acc;
use std::time::Instant;

fn main() {
    for &(m, k, n) in &[(64usize, 576usize, 4096usize), (128, 1152, 1024), (256, 2304, 64), (16, 144, 4096), (32, 288, 4096)] {
        let a = vec![1.0f32; m * k];
        let b = vec![1.0f32; k * n];
        let mut c = vec![0.0f32; m * n];
        let t0 = Instant::now();
        let mut reps = 0;
        while t0.elapsed().as_secs_f64() < 0.5 {
            matmul_acc(&a, &b, &mut c, m, k, n);
            reps += 1;
        }
        let gflops = (2.0 * (m * k * n * reps) as f64) / t0.elapsed().as_secs_f64() / 1e9;
        println!("f32 {m}x{k}x{n}: {gflops:.1} GFLOP/s ({reps} reps)");
    }
}
