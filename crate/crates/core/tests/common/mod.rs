/// Greedy herding recomputed from scratch at every step.
pub fn herding_oracle(features: &[Vec<f64>], m: usize) -> Vec<usize> {
    let n = features.len();
    let dim = features[0].len();
    let mu: Vec<f64> = (0..dim).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n as f64).collect();
    let mut chosen: Vec<usize> = Vec::new();
    for _ in 0..m {
        let dists: Vec<(usize, f64)> = (0..n)
            .filter(|i| !chosen.contains(i))
            .map(|i| {
                let set: Vec<usize> = chosen.iter().copied().chain([i]).collect();
                let d = (0..dim)
                    .map(|j| {
                        let mean = set.iter().map(|&s| features[s][j]).sum::<f64>() / set.len() as f64;
                        (mu[j] - mean).powi(2)
                    })
                    .sum::<f64>();
                (i, d)
            })
            .collect();
        let min = dists.iter().map(|&(_, d)| d).fold(f64::INFINITY, f64::min);
        chosen.push(dists.iter().find(|&&(_, d)| d <= min + 1e-12).unwrap().0);
    }
    chosen
}
